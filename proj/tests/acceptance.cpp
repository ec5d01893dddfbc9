// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
// Usage: acceptance [work-dir]  (default: ./acceptance-runs)

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mta/config.hpp"
#include "mta/harness.hpp"
#include "mta/rouge.hpp"
#include "mta/schedule.hpp"
#include "mta/tokenizer.hpp"

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool pass, const std::string& name, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!pass) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

struct Suite {
  const char* binary;
  const char* filter;
};

// Runs each gtest binary with its filter; true when all of them pass and at
// least one test was selected by every filter.
bool run_suites(const std::vector<Suite>& suites, const fs::path& work, std::string& detail) {
  bool ok = true;
  std::size_t ran = 0;
  for (const auto& s : suites) {
    const fs::path log = work / (fs::path(s.binary).filename().string() + ".log");
    const std::string cmd = std::string("'") + s.binary + "' --gtest_filter='" + s.filter + "' > '" + log.string() +
                            "' 2>&1";
    const int raw = std::system(cmd.c_str());
    const bool pass = WIFEXITED(raw) && WEXITSTATUS(raw) == 0;
    std::ifstream is(log);
    std::size_t n = 0;
    for (std::string line; std::getline(is, line);)
      if (line.rfind("[       OK ]", 0) == 0) ++n;
    if (!pass || n == 0) {
      ok = false;
      detail += std::string(" failed: ") + fs::path(s.binary).filename().string() + " " + s.filter + ";";
    }
    ran += n;
  }
  detail = std::to_string(ran) + " tests" + detail;
  return ok;
}

void suite_criterion(const std::string& name, const std::vector<Suite>& suites, const fs::path& work,
                     double time_limit = 0.0) {
  const auto t0 = Clock::now();
  std::string detail;
  bool ok = run_suites(suites, work, detail);
  const double secs = seconds_since(t0);
  detail += ", " + fmt(secs, 3) + " s";
  if (time_limit > 0.0) {
    detail += " (limit " + fmt(time_limit, 3) + " s)";
    ok = ok && secs < time_limit;
  }
  report(ok, name, detail);
}

void schedule_criterion() {
  using L = std::vector<std::size_t>;
  const bool a = mta::select_layers(12, 3, 3) == L{6, 9, 12};
  const bool b = mta::select_layers(24, 2, 6) == L{14, 16, 18, 20, 22, 24};
  const bool c = mta::select_layers(24, 2, 5) == L{16, 18, 20, 22, 24};
  const bool d = mta::map_layer(6, 12, 48) == 24;
  const auto s = mta::assign_granularity(mta::select_layers(12, 3, 3), 1, 12, 48);
  const bool e = s.entries[0].granularity == mta::Granularity::word &&
                 s.entries[1].granularity == mta::Granularity::phrase &&
                 s.entries[2].granularity == mta::Granularity::phrase;
  report(a && b && c && d && e, "schedule-reproduction",
         "{6,9,12} " + std::string(a ? "ok" : "wrong") + ", {14..24} " + (b ? "ok" : "wrong") + ", {16..24} " +
             (c ? "ok" : "wrong") + ", map_layer(6,12,48)=" + std::to_string(mta::map_layer(6, 12, 48)) +
             ", word/phrase split " + (e ? "ok" : "wrong"));
}

void rouge_criterion() {
  const auto w = [](const char* s) { return mta::split_whitespace(s); };
  const double same = mta::rouge_l(w("the cat sat"), w("the cat sat")).f1;
  const double disjoint = mta::rouge_l(w("a b c"), w("d e f")).f1;
  const double partial = mta::rouge_l(w("the cat"), w("the cat sat")).f1;
  const bool ok = same == 1.0 && disjoint == 0.0 && partial == 0.8;
  report(ok, "rouge-l-unit-values",
         "identical " + fmt(same, 17) + ", disjoint " + fmt(disjoint, 17) + ", partial " + fmt(partial, 17));
}

// Desk-scale configuration: default model sizes, longer distillation, and a
// projector learning rate equal to the student's.
mta::RunConfig desk_config(std::uint64_t seed, bool mta_terms) {
  mta::RunConfig c = mta::default_run_config();
  c.seed = seed;
  c.distill.optim.epochs = 16;
  c.distill.projector_lr = c.distill.optim.lr;
  if (!mta_terms) c.distill.lambda_dsa = c.distill.lambda_hid = 0.0;
  c.resolve();
  return c;
}

void desk_scale_criterion(const fs::path& work) {
  const auto t0 = Clock::now();
  mta::RunConfig tc = desk_config(1, true);
  const fs::path tdir = work / "teacher";
  const mta::TeacherRun trun = mta::train_teacher(tc, tdir);
  std::cout << "  teacher: copy_accuracy " << fmt(trun.heldout.copy_accuracy) << ", heldout_ce "
            << fmt(trun.heldout.heldout_ce) << ", " << fmt(seconds_since(t0), 3) << " s" << std::endl;
  const mta::TransformerLM teacher = mta::TransformerLM::load(tdir / "teacher.ckpt");

  int dsa_wins = 0;
  bool ce_ok = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto with = mta::distill(desk_config(seed, true), teacher, work / ("mta-seed" + std::to_string(seed)));
    const auto base = mta::distill(desk_config(seed, false), teacher, work / ("base-seed" + std::to_string(seed)));
    const bool equal_steps = with.steps == base.steps;
    const bool dsa_lower = with.heldout.mean_dsa < base.heldout.mean_dsa;
    const double ratio = with.heldout.heldout_ce / base.heldout.heldout_ce;
    dsa_wins += dsa_lower && equal_steps ? 1 : 0;
    ce_ok = ce_ok && ratio <= 1.02 && equal_steps;
    std::cout << "  seed " << seed << ": steps " << with.steps << "/" << base.steps << ", dsa "
              << fmt(with.heldout.mean_dsa) << " vs " << fmt(base.heldout.mean_dsa) << ", heldout_ce "
              << fmt(with.heldout.heldout_ce) << " vs " << fmt(base.heldout.heldout_ce) << " (ratio " << fmt(ratio)
              << ")" << std::endl;
  }
  const double secs = seconds_since(t0);
  const bool in_time = secs <= 30.0 * 60.0;
  report(dsa_wins >= 2 && ce_ok && in_time, "desk-scale-distillation",
         "(a) DSA lower on " + std::to_string(dsa_wins) + "/3 seeds, (b) CE within +2% on all seeds: " +
             (ce_ok ? "yes" : "no") + ", " + fmt(secs, 4) + " s (limit 1800 s)");
}

}  // namespace

int main(int argc, char** argv) {
  mta::configure_allocator();
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance-runs");
  fs::remove_all(work);
  fs::create_directories(work);

  suite_criterion("gradient-suite",
                  {{MTA_TEST_LOSSES, "*GradientsMatchFiniteDifferences*"},
                   {MTA_TEST_MODEL, "Model.ParameterGradientsMatchFiniteDifferences"}},
                  work, 120.0);
  suite_criterion("oracle-suite",
                  {{MTA_TEST_LOSSES, "Dsa.VectorizedMatchesNaiveDoubleLoop"},
                   {MTA_TEST_SALIENCY, "TokenWeights.*ScalarOracle"},
                   {MTA_TEST_SPANS, "SpanReps.MatchesScalarLoop"}},
                  work);
  suite_criterion("invariant-suite",
                  {{MTA_TEST_SALIENCY, "TokenWeights.RowsSumToOneAndPaddingIsZero:TokenWeights.TwoTokensSplitEvenly"},
                   {MTA_TEST_LOSSES,
                    "Dsa.RotationAndScalingInvariance:Dsa.IdenticalAndPerSpanScaledGeometryIsZero:"
                    "Dsa.TotalIsZeroForIdenticalModels:Fdd.DerivativeCosineCases:Total.ZeroLambdaReducesToBaseBitForBit"},
                   {MTA_TEST_HARNESS,
                    "Distill.DeterministicAndTeacherUntouched:TeacherTraining.DeterministicAndLearning:"
                    "Distill.ZeroWeightsMatchPlainBaseline"}},
                  work);
  schedule_criterion();
  desk_scale_criterion(work);
  rouge_criterion();

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
