#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

#include "mta/config.hpp"
#include "mta/harness.hpp"
#include "mta/optim.hpp"
#include "mta/rouge.hpp"
#include "mta/spans.hpp"
#include "test_util.hpp"

using namespace mta;
using mta::testing::TempDir;
using nlohmann::json;

namespace {

const std::filesystem::path kFixtures = std::filesystem::path(MTA_SOURCE_DIR) / "tests" / "fixtures";

RunConfig toy_config() {
  RunConfig c = load_config(kFixtures / "toy_config.json");
  c.resolve();
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::string> words(const std::string& s) { return split_whitespace(s); }

std::string config_error(const std::string& text) {
  try {
    RunConfig c = config_from_json_text(text);
    c.resolve();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::vector<json> read_jsonl(const std::filesystem::path& p) {
  std::vector<json> rows;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) rows.push_back(json::parse(line));
  return rows;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  RunConfig c = default_run_config();
  c.seed = 99;
  c.distill.base = BaseKind::fdd;
  c.distill.layers = {1, 2};
  c.distill.span_pool_weights = SpanPoolWeights::teacher;
  const std::string text = config_to_json_text(c);
  EXPECT_EQ(config_to_json_text(config_from_json_text(text)), text);
}

TEST(Config, ErrorsNameTheFieldPath) {
  EXPECT_EQ(config_error(R"({"student":{"bogus":1}})").rfind("student.bogus", 0), 0u);
  EXPECT_EQ(config_error(R"({"distill":{"lambda_dsa":"two"}})").rfind("distill.lambda_dsa", 0), 0u);
  EXPECT_EQ(config_error(R"({"student":{"d_model":30,"n_heads":4}})").rfind("student.n_heads", 0), 0u);
  EXPECT_EQ(config_error(R"({"distill":{"skew_alpha":1.0}})").rfind("distill.skew_alpha", 0), 0u);
  EXPECT_EQ(config_error(R"({"distill":{"lambda_hid":-1}})").rfind("distill.lambda_hid", 0), 0u);
  EXPECT_EQ(config_error("{}"), "");
}

TEST(Rouge, HandValues) {
  EXPECT_DOUBLE_EQ(rouge_l(words("the cat sat"), words("the cat sat")).f1, 1.0);
  EXPECT_DOUBLE_EQ(rouge_l(words("a b"), words("c d")).f1, 0.0);
  const RougeScore s = rouge_l(words("the cat"), words("the cat sat"));
  EXPECT_DOUBLE_EQ(s.precision, 1.0);
  EXPECT_NEAR(s.recall, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(s.f1, 0.8);
  EXPECT_DOUBLE_EQ(rouge_l({}, words("x")).f1, 0.0);
  EXPECT_THROW((void)rouge_l(words("x"), {}), Error);
  EXPECT_EQ(lcs_length(words("a b c d"), words("b d a c")), 2u);
}

TEST(Optim, AdamFirstStepMovesBySignedLr) {
  Tape tape;
  TapeScope scope(tape);
  Tensor p({3}, {1.0, -2.0, 0.5}, true);
  Adam adam({p}, AdamOptions{});
  const Tensor loss = sum(p * Tensor({3}, {3.0, -0.5, 0.0}));
  backward(loss);
  adam.step(0.1);
  EXPECT_NEAR(p[0], 0.9, 1e-8);
  EXPECT_NEAR(p[1], -1.9, 1e-8);
  EXPECT_DOUBLE_EQ(p[2], 0.5);
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Optim, CosineScheduleAndClipping) {
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0, 100, 10), 0.1);
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 9, 100, 10), 1.0);
  EXPECT_NEAR(cosine_lr(1.0, 55, 100, 10), 0.5, 1e-3);
  EXPECT_LE(cosine_lr(1.0, 99, 100, 10), 0.01);
  Tape tape;
  TapeScope scope(tape);
  Tensor p({2}, {0.0, 0.0}, true);
  backward(sum(p * Tensor({2}, {3.0, 4.0})));
  EXPECT_DOUBLE_EQ(clip_grad_norm({p}, 1.0), 5.0);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(p.grad()[1], 0.8, 1e-15);
}

TEST(Seeds, DerivedStreamsDiffer) {
  EXPECT_EQ(derive_seed(1, "teacher-init"), derive_seed(1, "teacher-init"));
  EXPECT_NE(derive_seed(1, "teacher-init"), derive_seed(1, "student-init"));
  EXPECT_NE(derive_seed(1, "teacher-init"), derive_seed(2, "teacher-init"));
}

TEST(HiddenDumpIo, RoundTripAndCorruption) {
  TempDir dir("dump");
  const RunConfig c = toy_config();
  const Dataset data = load_dataset(c, false);
  const TransformerLM model(c.teacher, 3);
  const std::vector<EncodedSample> few(data.heldout.begin(), data.heldout.begin() + 3);
  const HiddenDump dump = export_hidden(model, few);
  ASSERT_EQ(dump.records.size(), 3u);
  EXPECT_EQ(dump.records[0].states.size(), c.teacher.n_layers + 1);
  write_hidden_dump(dir / "h.mtad", dump);
  EXPECT_EQ(read_hidden_dump(dir / "h.mtad"), dump);

  const std::string bytes = slurp(dir / "h.mtad");
  std::ofstream(dir / "short.mtad", std::ios::binary) << bytes.substr(0, bytes.size() - 1);
  try {
    (void)read_hidden_dump(dir / "short.mtad");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "magic.mtad", std::ios::binary) << "XXXXX" << bytes.substr(5);
  EXPECT_THROW((void)read_hidden_dump(dir / "magic.mtad"), Error);
  std::ofstream(dir / "long.mtad", std::ios::binary) << bytes << 'x';
  EXPECT_THROW((void)read_hidden_dump(dir / "long.mtad"), Error);
}

TEST(Probe, DumpMatchesLiveTeacher) {
  TempDir dir("probe");
  const RunConfig c = toy_config();
  const Dataset data = load_dataset(c, true);
  const TransformerLM teacher(c.teacher, 5), student(c.student, 6);
  const auto schedule = c.schedule();
  write_hidden_dump(dir / "t.mtad", export_hidden(teacher, data.heldout));
  const HiddenDump dump = read_hidden_dump(dir / "t.mtad");
  const auto live = probe_dsa(student, &teacher, nullptr, data.heldout, schedule, SpanPoolWeights::own);
  const auto cached = probe_dsa(student, nullptr, &dump, data.heldout, schedule, SpanPoolWeights::own);
  ASSERT_EQ(live.size(), cached.size());
  ASSERT_EQ(live.size(), data.heldout.size() * schedule.entries.size());
  for (std::size_t i = 0; i < live.size(); ++i) {
    EXPECT_EQ(live[i].sample_id, cached[i].sample_id);
    EXPECT_EQ(live[i].teacher_layer, cached[i].teacher_layer);
    EXPECT_LE(std::abs(live[i].dsa - cached[i].dsa), 1e-6);
  }
  write_probe_csv(dir.path(), live, schedule);
  EXPECT_TRUE(std::filesystem::exists(dir / "probe_dsa.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "probe_dsa_samples.csv"));
}

TEST(TeacherTraining, ZeroEpochsKeepsInitialization) {
  TempDir dir("t0");
  RunConfig c = toy_config();
  c.teacher_training.epochs = 0;
  (void)train_teacher(c, dir.path());
  const TransformerLM saved = TransformerLM::load(dir / "teacher.ckpt");
  const TransformerLM fresh(c.teacher, derive_seed(c.seed, "teacher-init"));
  ASSERT_EQ(saved.parameters().size(), fresh.parameters().size());
  for (std::size_t i = 0; i < fresh.parameters().size(); ++i) {
    EXPECT_EQ(mta::testing::to_vec(saved.parameters()[i].value), mta::testing::to_vec(fresh.parameters()[i].value))
        << fresh.parameters()[i].name;
  }
}

TEST(TeacherTraining, DeterministicAndLearning) {
  TempDir a("ta"), b("tb");
  const RunConfig c = toy_config();
  const TeacherRun ra = train_teacher(c, a.path());
  (void)train_teacher(c, b.path());
  EXPECT_EQ(slurp(a / "teacher.ckpt"), slurp(b / "teacher.ckpt"));
  EXPECT_EQ(slurp(a / "metrics.json"), slurp(b / "metrics.json"));
  EXPECT_EQ(slurp(a / "losses.jsonl"), slurp(b / "losses.jsonl"));
  ASSERT_EQ(ra.epoch_train_ce.size(), c.teacher_training.epochs);
  EXPECT_LT(ra.epoch_train_ce.back(), ra.epoch_train_ce.front());
  for (const char* f : {"config.json", "log.txt", "losses.jsonl", "metrics.json"})
    EXPECT_TRUE(std::filesystem::exists(a / f)) << f;
}

TEST(Distill, DeterministicAndTeacherUntouched) {
  TempDir a("da"), b("db");
  const RunConfig c = toy_config();
  const TransformerLM teacher = TransformerLM::load(kFixtures / "toy_teacher.ckpt");
  const std::string before = slurp(kFixtures / "toy_teacher.ckpt");
  const DistillRun ra = distill(c, teacher, a.path());
  (void)distill(c, teacher, b.path());
  EXPECT_EQ(slurp(a / "student.ckpt"), slurp(b / "student.ckpt"));
  EXPECT_EQ(slurp(a / "losses.jsonl"), slurp(b / "losses.jsonl"));
  EXPECT_EQ(slurp(a / "metrics.json"), slurp(b / "metrics.json"));
  for (const char* f : {"config.json", "schedule.txt", "log.txt"}) EXPECT_TRUE(std::filesystem::exists(a / f)) << f;
  teacher.save(a / "teacher_after.ckpt");
  EXPECT_EQ(slurp(a / "teacher_after.ckpt"), before);
  ASSERT_FALSE(ra.reports.empty());
  EXPECT_EQ(ra.reports.size(), ra.steps);
  EXPECT_GT(ra.reports[0].dsa, 0.0);
  EXPECT_EQ(read_jsonl(a / "losses.jsonl").size(), ra.steps);
}

TEST(Distill, ZeroWeightsMatchPlainBaseline) {
  TempDir a("z1"), b("z2");
  RunConfig c = toy_config();
  c.distill.lambda_dsa = 0.0;
  c.distill.lambda_hid = 0.0;
  const TransformerLM teacher = TransformerLM::load(kFixtures / "toy_teacher.ckpt");
  const DistillRun with = distill(c, teacher, a.path(), DistillOptions{true, true, true});
  const DistillRun without = distill(c, teacher, b.path(), DistillOptions{true, false, true});
  EXPECT_EQ(slurp(a / "student.ckpt"), slurp(b / "student.ckpt"));
  ASSERT_EQ(with.reports.size(), without.reports.size());
  for (std::size_t i = 0; i < with.reports.size(); ++i) {
    EXPECT_EQ(with.reports[i].base, without.reports[i].base) << "step " << i;
    EXPECT_EQ(with.reports[i].total, without.reports[i].total) << "step " << i;
  }
  EXPECT_GT(with.reports[0].dsa, 0.0);
  EXPECT_EQ(without.reports[0].dsa, 0.0);
}

TEST(Distill, MismatchedSpansRejectedBeforeTraining) {
  TempDir dir("mismatch");
  RunConfig c = toy_config();
  const AnnotatedCorpus gen = generate_grammar_corpus(c.synthetic.train + c.synthetic.heldout, c.synthetic.seed);
  std::vector<Sample> samples = gen.samples;
  samples[4].text = "a dog sees the cat | a dog sees the cat";
  samples[4].response_start = 21;
  write_corpus_jsonl(dir / "corpus.jsonl", samples);
  write_span_jsonl(dir / "spans.jsonl", gen.spans);
  c.paths.corpus = (dir / "corpus.jsonl").string();
  c.paths.spans = (dir / "spans.jsonl").string();
  c.heldout = c.synthetic.heldout;
  c.synthetic = SyntheticData{};
  const TransformerLM teacher = TransformerLM::load(kFixtures / "toy_teacher.ckpt");
  try {
    (void)distill(c, teacher, dir / "out");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(samples[4].id), std::string::npos) << e.what();
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "out" / "student.ckpt"));
}

TEST(Eval, PinnedMetricsOnToyCheckpoints) {
  const RunConfig c = toy_config();
  const TransformerLM teacher = TransformerLM::load(kFixtures / "toy_teacher.ckpt");
  const TransformerLM student = TransformerLM::load(kFixtures / "toy_student.ckpt");
  const Dataset data = load_dataset(c, true);
  const auto schedule = c.schedule();
  EvalOptions options;
  options.teacher = &teacher;
  options.schedule = &schedule;
  const json got = json::parse(evaluate(student, *data.tokenizer, data.heldout, options).to_json());
  std::ifstream is(kFixtures / "toy_student_eval.json");
  const json want = json::parse(is);
  EXPECT_EQ(got["samples"], want["samples"]);
  EXPECT_EQ(got["tokens"], want["tokens"]);
  for (const char* k : {"heldout_ce", "response_ce", "copy_accuracy"})
    EXPECT_NEAR(got[k].get<double>(), want[k].get<double>(), 1e-9) << k;
  EXPECT_NEAR(got["rouge_l"]["f1"].get<double>(), want["rouge_l"]["f1"].get<double>(), 1e-9);
  EXPECT_NEAR(got["dsa"]["mean"].get<double>(), want["dsa"]["mean"].get<double>(), 1e-9);
}

TEST(Eval, TeacherScoresItselfPerfectlyOnDsa) {
  const RunConfig c = toy_config();
  RunConfig same = c;
  same.student = c.teacher;
  const TransformerLM teacher = TransformerLM::load(kFixtures / "toy_teacher.ckpt");
  const Dataset data = load_dataset(same, true);
  const auto schedule = same.schedule();
  EvalOptions options;
  options.teacher = &teacher;
  options.schedule = &schedule;
  options.generate = false;
  const EvalMetrics m = evaluate(teacher, *data.tokenizer, data.heldout, options);
  EXPECT_TRUE(m.has_dsa);
  EXPECT_NEAR(m.mean_dsa, 0.0, 1e-12);
  EXPECT_NEAR(m.heldout_ppl, std::exp(m.heldout_ce), 1e-9 * m.heldout_ppl);
}
