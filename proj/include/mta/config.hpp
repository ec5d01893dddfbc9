#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mta/losses.hpp"
#include "mta/model.hpp"

namespace mta {

// Raised for invalid run configs; the message starts with the field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct OptimConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t warmup_steps = 0;
  double grad_clip = 1.0;  // <= 0 disables
  double weight_decay = 0.0;
  bool response_only = false;  // supervise only response tokens
};

struct SyntheticData {
  std::size_t train = 1000;
  std::size_t heldout = 200;
  std::uint64_t seed = 7;
};

struct DistillConfig {
  BaseKind base = BaseKind::kl;
  double lambda_dsa = 2.0;
  double lambda_hid = 0.2;
  double skew_alpha = 0.1;
  std::size_t stride = 1;
  std::size_t budget = 2;
  std::size_t word_count = 1;
  std::vector<std::size_t> layers;  // explicit student layers; overrides stride/budget
  SpanPoolWeights span_pool_weights = SpanPoolWeights::own;
  double projector_lr = 5e-4;
  std::size_t eval_every = 0;  // steps between held-out evals; 0 = end only
  OptimConfig optim;
};

struct RunPaths {
  std::string corpus;  // empty: synthetic grammar corpus
  std::string spans;   // empty with a synthetic corpus: generated gold spans
  std::string teacher;  // teacher checkpoint for distill/eval
  std::string out = "run";
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string tokenizer = "whitespace";
  SyntheticData synthetic;
  std::size_t heldout = 200;  // trailing samples of a file corpus held out
  ModelConfig teacher{4, 64, 4, 0, 48};
  ModelConfig student{2, 32, 2, 0, 48};
  OptimConfig teacher_training;
  DistillConfig distill;
  RunPaths paths;

  // Fills vocab sizes left at 0 from the tokenizer, then checks every
  // cross-field constraint. Throws ConfigError("path.to.field: why").
  void resolve();
  void validate() const;
  LayerSchedule schedule() const;
};

RunConfig default_run_config();

// Unknown keys and type mismatches are reported with their field path.
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace mta
