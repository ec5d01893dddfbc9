#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mta/model.hpp"
#include "mta/schedule.hpp"
#include "mta/spans.hpp"
#include "mta/tensor.hpp"

namespace mta {

enum class BaseKind { kl, skew_kl, skew_rkl, fdd };
enum class SpanPoolWeights { own, teacher };

const char* to_string(BaseKind k);
BaseKind base_kind_from_string(const std::string& s);
const char* to_string(SpanPoolWeights w);
SpanPoolWeights span_pool_weights_from_string(const std::string& s);

// ---- token-level divergences ------------------------------------------------
// Logits are [..., V]; `mask` holds one 0/1 entry per row and selects the
// positions averaged over. An all-zero mask is rejected.

Tensor kd_forward_kl(const Tensor& p_logits, const Tensor& q_logits, std::span<const double> mask);
// KL(p || alpha p + (1 - alpha) q)
Tensor skew_kl(const Tensor& p_logits, const Tensor& q_logits, double alpha, std::span<const double> mask);
// KL(q || (1 - alpha) p + alpha q)
Tensor skew_rkl(const Tensor& p_logits, const Tensor& q_logits, double alpha, std::span<const double> mask);

// Same divergences over log-probabilities, as used by the trajectory loss.
Tensor kl_from_log_probs(const Tensor& log_p, const Tensor& log_q, std::span<const double> mask);

// ---- FDD trajectory / derivative --------------------------------------------

// Vocabulary-space images y_l = log softmax(head(h_l)), keyed by layer.
using VocabTrajectory = std::map<std::size_t, Tensor>;

VocabTrajectory project_layers(const TransformerLM& model, const ForwardTrace& trace,
                               const std::vector<std::size_t>& layers);

struct FddStats {
  std::size_t skipped_tokens = 0;  // ||dy|| below threshold
};

// sum_j KL(P(y^T_phi(l_j)) || P(y^S_l_j)), token-mean per layer.
Tensor fdd_traj(const VocabTrajectory& teacher, const VocabTrajectory& student, const LayerSchedule& schedule,
                std::span<const double> mask);
// sum_j token-mean (1 - cos(dy^T, dy^S)), dy_l = y_l - y_{l-1}.
Tensor fdd_der(const VocabTrajectory& teacher, const VocabTrajectory& student, const LayerSchedule& schedule,
               std::span<const double> mask, FddStats* stats = nullptr);

Tensor fdd_traj(const TransformerLM& teacher, const ForwardTrace& teacher_trace, const TransformerLM& student,
                const ForwardTrace& student_trace, const LayerSchedule& schedule, std::span<const double> mask);
Tensor fdd_der(const TransformerLM& teacher, const ForwardTrace& teacher_trace, const TransformerLM& student,
               const ForwardTrace& student_trace, const LayerSchedule& schedule, std::span<const double> mask,
               FddStats* stats = nullptr);

// Layers the FDD losses read: each scheduled layer and its predecessor.
std::vector<std::size_t> fdd_student_layers(const LayerSchedule& schedule);
std::vector<std::size_t> fdd_teacher_layers(const LayerSchedule& schedule);

// ---- dynamic structural alignment -------------------------------------------

struct DsaStats {
  std::size_t degenerate = 0;  // span sets with fewer than two spans
};

// Cosine-distance matrix 1 - cos(U_i, U_j) of [n, d] span reps.
Tensor cosine_distance_matrix(const Tensor& reps);

// sum_{i<j} w_i w_j (d(U^S_i, U^S_j) - d(U^T_i, U^T_j))^2
Tensor dsa_layer(const Tensor& student_reps, const Tensor& teacher_reps, const Tensor& span_weights,
                 DsaStats* stats = nullptr);

// Everything the span-level losses need for one batch.
struct AlignmentInputs {
  const ForwardTrace& student;
  const ForwardTrace& teacher;
  const std::vector<AlignedSpans>& spans;  // one per batch row
  const LayerSchedule& schedule;
  SpanPoolWeights pool = SpanPoolWeights::own;
};

// Teacher token weights per teacher layer, computed once per batch.
class TeacherWeightCache {
 public:
  const Tensor& get(const ForwardTrace& teacher, std::size_t layer);

 private:
  std::map<std::size_t, Tensor> cache_;
};

struct DsaResult {
  Tensor total;                                // mean over schedule entries
  std::vector<double> per_layer;               // one per schedule entry
  DsaStats stats;
};

// Each layer term is the batch mean of dsa_layer over that entry's spans.
DsaResult dsa_total(const AlignmentInputs& in, TeacherWeightCache& teacher_weights);

// ---- hidden representation alignment ----------------------------------------

struct Projectors {
  std::vector<Tensor> weights;  // one [d_S, d_T] matrix per schedule entry

  // Uniform in [-a, a], a = sqrt(6 / (d_S + d_T)).
  static Projectors init(std::size_t n_layers, std::size_t d_student, std::size_t d_teacher, std::uint64_t seed);
};

struct HidStats {
  std::size_t skipped_tokens = 0;  // zero-norm projected or teacher vectors
};

// One layer: sum over covered tokens of w_t (1 - cos(projected_t, teacher_t)),
// divided by the batch size. projected and teacher are [B, T, d_T], weights
// [B, T], covered one 0/1 entry per token. Zero-norm tokens are skipped.
Tensor hid_layer(const Tensor& projected, const Tensor& teacher, const Tensor& weights,
                 std::span<const double> covered, HidStats* stats = nullptr, std::size_t* used = nullptr);

// sum_l sum_{t in M_l} w^T_t (1 - cos(H^S_t W_l, H^T_t)), M_l = span-covered
// tokens at the entry's granularity; batch mean over rows.
Tensor hid_loss(const AlignmentInputs& in, const Projectors& projectors, TeacherWeightCache& teacher_weights,
                HidStats* stats = nullptr);

// ---- total objective --------------------------------------------------------

struct LossWeights {
  double lambda_dsa = 2.0;
  double lambda_hid = 0.2;
  double skew_alpha = 0.1;
};

struct LossReport {
  std::size_t step = 0;
  double base = 0.0;
  double dsa = 0.0;
  double hid = 0.0;
  double traj = 0.0;
  double der = 0.0;
  double total = 0.0;
  std::map<std::size_t, double> per_layer_dsa;  // keyed by student layer

  // base + traj + der + lambda_dsa dsa + lambda_hid hid, in that order.
  double recompose(const LossWeights& w) const;
  std::string to_json_line() const;
};

struct ObjectiveInputs {
  const TransformerLM& teacher;
  const ForwardTrace& teacher_trace;
  const TransformerLM& student;
  const ForwardTrace& student_trace;
  const std::vector<AlignedSpans>& spans;
  const LayerSchedule& schedule;
  const Projectors* projectors = nullptr;
  std::span<const double> mask;
  BaseKind base = BaseKind::kl;
  LossWeights weights;
  SpanPoolWeights pool = SpanPoolWeights::own;
  // Evaluate inactive (lambda = 0) terms detached for the report.
  bool report_inactive_terms = true;
};

struct Objective {
  Tensor total;
  LossReport report;
};

Objective total_loss(const ObjectiveInputs& in);

}  // namespace mta
