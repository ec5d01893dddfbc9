#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mta/config.hpp"
#include "mta/corpus.hpp"
#include "mta/hidden_dump.hpp"
#include "mta/losses.hpp"
#include "mta/model.hpp"
#include "mta/tokenizer.hpp"

namespace mta {

// Thrown when a training step produces a NaN or infinite loss.
class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

// Keeps large tensor buffers on the heap instead of fresh mappings; a pure
// speed setting for glibc, a no-op elsewhere.
void configure_allocator();

// Independent seed for a named stream derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& stream);

struct Dataset {
  std::unique_ptr<Tokenizer> tokenizer;
  std::vector<EncodedSample> train;
  std::vector<EncodedSample> heldout;
  bool has_spans = false;
};

// Synthetic grammar corpus or the configured JSONL corpus, tokenized and
// split. With `need_spans` every sample must have a matching annotation; the
// first offending sample id is reported otherwise.
Dataset load_dataset(const RunConfig& config, bool need_spans);

// Appends to <out>/log.txt and echoes to stderr unless quiet.
class RunLog {
 public:
  RunLog(const std::filesystem::path& dir, bool quiet);
  void line(const std::string& text);

 private:
  std::ofstream os_;
  bool quiet_;
};

struct EvalOptions {
  bool response_only = false;  // positions used for heldout_ce
  std::size_t batch_size = 32;
  bool generate = true;        // greedy continuation for ROUGE-L
  const TransformerLM* teacher = nullptr;  // enables the DSA probe
  const LayerSchedule* schedule = nullptr;
  SpanPoolWeights pool = SpanPoolWeights::own;
};

struct EvalMetrics {
  std::size_t samples = 0;
  std::size_t tokens = 0;
  double heldout_ce = 0.0;
  double heldout_ppl = 0.0;
  double response_ce = 0.0;
  double copy_accuracy = 0.0;  // teacher-forced argmax accuracy on response positions
  double rouge_l_precision = 0.0;
  double rouge_l_recall = 0.0;
  double rouge_l_f1 = 0.0;
  bool has_dsa = false;
  double mean_dsa = 0.0;
  std::map<std::size_t, double> per_layer_dsa;  // keyed by student layer
  std::size_t dsa_degenerate = 0;

  std::string to_json() const;  // deterministic, pretty-printed
};

EvalMetrics evaluate(const TransformerLM& model, const Tokenizer& tokenizer, const std::vector<EncodedSample>& data,
                     const EvalOptions& options);

// Greedy continuation of each prompt for as many tokens as its reference.
std::vector<std::vector<std::int32_t>> greedy_continue(const TransformerLM& model,
                                                       const std::vector<EncodedSample>& data,
                                                       std::int32_t pad_id);

struct TeacherRun {
  std::vector<double> epoch_train_ce;
  EvalMetrics heldout;
};

// Writes config.json, log.txt, losses.jsonl, metrics.json and teacher.ckpt.
TeacherRun train_teacher(const RunConfig& config, const std::filesystem::path& out, bool quiet = true);

struct DistillRun {
  std::vector<LossReport> reports;
  EvalMetrics heldout;
  std::size_t steps = 0;
};

struct DistillOptions {
  bool quiet = true;
  bool report_inactive_terms = true;
  bool save_checkpoint = true;
};

// Writes config.json, schedule.txt, log.txt, losses.jsonl, metrics.json and
// student.ckpt. The teacher is never modified.
DistillRun distill(const RunConfig& config, const TransformerLM& teacher, const std::filesystem::path& out,
                   const DistillOptions& options = {});

struct ProbeRow {
  std::string sample_id;
  std::size_t student_layer = 0;
  std::size_t teacher_layer = 0;
  Granularity granularity = Granularity::word;
  double dsa = 0.0;
  bool degenerate = false;
};

// Per-sample, per-layer DSA between a student and teacher traces. Teacher
// traces come from a live forward, or from `teacher_dump` when given.
std::vector<ProbeRow> probe_dsa(const TransformerLM& student, const TransformerLM* teacher,
                                const HiddenDump* teacher_dump, const std::vector<EncodedSample>& data,
                                const LayerSchedule& schedule, SpanPoolWeights pool);

// probe_dsa.csv (per-layer means) and probe_dsa_samples.csv (plot data).
void write_probe_csv(const std::filesystem::path& out, const std::vector<ProbeRow>& rows,
                     const LayerSchedule& schedule);

}  // namespace mta
