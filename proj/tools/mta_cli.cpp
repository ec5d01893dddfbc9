#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "mta/config.hpp"
#include "mta/harness.hpp"
#include "mta/hidden_dump.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run config (JSON); defaults apply when omitted");
  cmd->add_option("--seed", c.seed, "Run seed; overrides the config")->envname("MTA_SEED");
  cmd->add_option("--out", c.out, "Output directory (file for export-hidden and gen-config)");
  cmd->add_flag("-v,--verbose", c.verbose, "Echo the run log to stderr");
}

mta::RunConfig resolve(const Common& c) {
  mta::RunConfig config = c.config.empty() ? mta::default_run_config() : mta::load_config(c.config);
  if (c.seed) config.seed = *c.seed;
  if (!c.out.empty()) config.paths.out = c.out;
  config.validate();
  return config;
}

std::string pick(const std::string& flag, const std::string& fallback, const char* what) {
  const std::string& v = flag.empty() ? fallback : flag;
  if (v.empty()) throw mta::ConfigError(std::string(what) + ": no checkpoint given");
  return v;
}

const std::vector<mta::EncodedSample>& split_of(const mta::Dataset& data, const std::string& split) {
  return split == "train" ? data.train : data.heldout;
}

}  // namespace

int main(int argc, char** argv) {
  mta::configure_allocator();
  CLI::App app{"Multi-granular trajectory alignment distillation at desk scale", "mta"};
  app.require_subcommand(1);

  Common common;
  std::string teacher_path, model_path, dump_path, split = "heldout";
  bool response_only = false;

  auto* train = app.add_subcommand("train-teacher", "Pretrain a teacher on the configured corpus");
  add_common(train, common);

  auto* distill = app.add_subcommand("distill", "Distill a student from a frozen teacher");
  add_common(distill, common);
  distill->add_option("--teacher", teacher_path, "Teacher checkpoint; defaults to paths.teacher");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  add_common(eval, common);
  eval->add_option("--model", model_path, "Checkpoint to evaluate")->required();
  eval->add_option("--teacher", teacher_path, "Teacher checkpoint; enables the DSA probe");
  eval->add_flag("--response-only", response_only, "Held-out cross-entropy over response tokens only");

  auto* probe = app.add_subcommand("probe-dsa", "Per-layer structural discrepancy table and plot data");
  add_common(probe, common);
  probe->add_option("--model", model_path, "Student checkpoint")->required();
  probe->add_option("--teacher", teacher_path, "Teacher checkpoint; defaults to paths.teacher");
  probe->add_option("--teacher-dump", dump_path, "Teacher hidden-state dump used instead of a live forward");
  probe->add_option("--split", split, "heldout or train")->check(CLI::IsMember({"heldout", "train"}));

  auto* exporter = app.add_subcommand("export-hidden", "Write every layer's hidden states to a dump file");
  add_common(exporter, common);
  exporter->add_option("--model", model_path, "Checkpoint to run")->required();
  exporter->add_option("--split", split, "heldout or train")->check(CLI::IsMember({"heldout", "train"}));

  auto* gen = app.add_subcommand("gen-config", "Print or write the default run config");
  add_common(gen, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen) {
      mta::RunConfig config = mta::default_run_config();
      if (!common.config.empty()) config = mta::load_config(common.config);
      if (common.seed) config.seed = *common.seed;
      config.validate();
      const std::string text = mta::config_to_json_text(config);
      if (common.out.empty()) {
        std::cout << text;
      } else {
        mta::save_config(common.out, config);
      }
      return 0;
    }

    const mta::RunConfig config = resolve(common);
    const bool quiet = !common.verbose;

    if (*train) {
      const auto run = mta::train_teacher(config, config.paths.out, quiet);
      std::cout << run.heldout.to_json() << '\n';
      return 0;
    }
    if (*distill) {
      const auto teacher = mta::TransformerLM::load(pick(teacher_path, config.paths.teacher, "paths.teacher"));
      mta::DistillOptions options;
      options.quiet = quiet;
      const auto run = mta::distill(config, teacher, config.paths.out, options);
      std::cout << run.heldout.to_json() << '\n';
      return 0;
    }
    if (*eval) {
      const auto model = mta::TransformerLM::load(model_path);
      std::optional<mta::TransformerLM> teacher;
      if (!teacher_path.empty()) teacher.emplace(mta::TransformerLM::load(teacher_path));
      const mta::Dataset data = mta::load_dataset(config, teacher.has_value());
      const mta::LayerSchedule schedule = config.schedule();
      mta::EvalOptions options;
      options.response_only = response_only;
      options.pool = config.distill.span_pool_weights;
      if (teacher) {
        options.teacher = &*teacher;
        options.schedule = &schedule;
      }
      const auto metrics = mta::evaluate(model, *data.tokenizer, data.heldout, options);
      std::filesystem::create_directories(config.paths.out);
      std::ofstream(std::filesystem::path(config.paths.out) / "eval_metrics.json") << metrics.to_json() << '\n';
      std::cout << metrics.to_json() << '\n';
      return 0;
    }
    if (*probe) {
      const auto student = mta::TransformerLM::load(model_path);
      std::optional<mta::TransformerLM> teacher;
      std::optional<mta::HiddenDump> dump;
      if (!dump_path.empty()) {
        dump = mta::read_hidden_dump(dump_path);
      } else {
        teacher.emplace(mta::TransformerLM::load(pick(teacher_path, config.paths.teacher, "paths.teacher")));
      }
      const mta::Dataset data = mta::load_dataset(config, true);
      const mta::LayerSchedule schedule = config.schedule();
      const auto rows = mta::probe_dsa(student, teacher ? &*teacher : nullptr, dump ? &*dump : nullptr,
                                       split_of(data, split), schedule, config.distill.span_pool_weights);
      mta::write_probe_csv(config.paths.out, rows, schedule);
      std::ifstream table(std::filesystem::path(config.paths.out) / "probe_dsa.csv");
      std::cout << table.rdbuf();
      return 0;
    }
    if (*exporter) {
      const auto model = mta::TransformerLM::load(model_path);
      const mta::Dataset data = mta::load_dataset(config, false);
      const auto dump = mta::export_hidden(model, split_of(data, split));
      std::filesystem::path target = config.paths.out;
      if (std::filesystem::is_directory(target)) target /= "hidden.mtad";
      mta::write_hidden_dump(target, dump);
      std::cout << "wrote " << dump.records.size() << " samples to " << target.string() << '\n';
      return 0;
    }
  } catch (const mta::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
