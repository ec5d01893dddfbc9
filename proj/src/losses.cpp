#include "mta/losses.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "mta/saliency.hpp"

namespace mta {

namespace {

constexpr double kMinNorm = 1e-12;

double mask_count(std::span<const double> mask) {
  double n = 0.0;
  for (double m : mask) n += m;
  return n;
}

// Mean of one-value-per-row `rows` over the rows selected by `mask`.
Tensor masked_row_mean(const Tensor& rows, std::span<const double> mask, const char* who) {
  if (rows.numel() != mask.size()) {
    throw ShapeError(std::string(who) + ": mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(rows.numel()) + " positions");
  }
  const double count = mask_count(mask);
  if (!(count > 0.0)) throw Error(std::string(who) + ": mask selects no positions");
  const Tensor w(rows.shape(), std::vector<double>(mask.begin(), mask.end()));
  return scale(sum(rows * w), 1.0 / count);
}

void check_logits(const char* who, const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw ShapeError(std::string(who) + ": shape mismatch " + to_string(p.shape()) + " vs " + to_string(q.shape()));
  }
}

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("skew coefficient alpha must lie in [0, 1], got " + std::to_string(alpha));
}

Tensor one_minus(const Tensor& x) { return add_scalar(neg(x), 1.0); }

const Tensor& trajectory_at(const VocabTrajectory& traj, std::size_t layer, const char* side) {
  const auto it = traj.find(layer);
  if (it == traj.end()) {
    throw Error(std::string("FDD: ") + side + " layer " + std::to_string(layer) + " not available in the trace");
  }
  return it->second;
}

Tensor row_slice(const Tensor& x, std::size_t b) {
  Shape shape(x.shape().begin() + 1, x.shape().end());
  return reshape(slice(x, 0, b, 1), std::move(shape));
}

// 1.0 where a batch row's token lies inside one of its spans.
std::vector<double> coverage(const std::vector<AlignedSpans>& spans, Granularity g, std::size_t batch,
                             std::size_t seq) {
  std::vector<double> out(batch * seq, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (const TokenSpan& s : spans[b].at(g).spans) {
      for (std::size_t t = s.first; t <= s.last && t < seq; ++t) out[b * seq + t] = 1.0;
    }
  }
  return out;
}

}  // namespace

const char* to_string(BaseKind k) {
  switch (k) {
    case BaseKind::kl: return "kl";
    case BaseKind::skew_kl: return "skew_kl";
    case BaseKind::skew_rkl: return "skew_rkl";
    case BaseKind::fdd: return "fdd";
  }
  return "?";
}

BaseKind base_kind_from_string(const std::string& s) {
  if (s == "kl") return BaseKind::kl;
  if (s == "skew_kl") return BaseKind::skew_kl;
  if (s == "skew_rkl") return BaseKind::skew_rkl;
  if (s == "fdd") return BaseKind::fdd;
  throw Error("unknown base_kind '" + s + "'");
}

const char* to_string(SpanPoolWeights w) { return w == SpanPoolWeights::own ? "own" : "teacher"; }

SpanPoolWeights span_pool_weights_from_string(const std::string& s) {
  if (s == "own") return SpanPoolWeights::own;
  if (s == "teacher") return SpanPoolWeights::teacher;
  throw Error("unknown span_pool_weights '" + s + "'");
}

// ---- divergences ------------------------------------------------------------

Tensor kl_from_log_probs(const Tensor& log_p, const Tensor& log_q, std::span<const double> mask) {
  check_logits("kl", log_p, log_q);
  const Tensor rows = sum(exp(log_p) * (log_p - log_q), -1);
  return masked_row_mean(rows, mask, "kl");
}

Tensor kd_forward_kl(const Tensor& p_logits, const Tensor& q_logits, std::span<const double> mask) {
  check_logits("kd_forward_kl", p_logits, q_logits);
  return kl_from_log_probs(log_softmax(p_logits), log_softmax(q_logits), mask);
}

Tensor skew_kl(const Tensor& p_logits, const Tensor& q_logits, double alpha, std::span<const double> mask) {
  check_alpha(alpha);
  check_logits("skew_kl", p_logits, q_logits);
  const Tensor log_p = log_softmax(p_logits);
  const Tensor p = softmax(p_logits);
  const Tensor mix = scale(p, alpha) + scale(softmax(q_logits), 1.0 - alpha);
  return masked_row_mean(sum(p * (log_p - log(mix)), -1), mask, "skew_kl");
}

Tensor skew_rkl(const Tensor& p_logits, const Tensor& q_logits, double alpha, std::span<const double> mask) {
  check_alpha(alpha);
  check_logits("skew_rkl", p_logits, q_logits);
  const Tensor log_q = log_softmax(q_logits);
  const Tensor q = softmax(q_logits);
  const Tensor mix = scale(softmax(p_logits), 1.0 - alpha) + scale(q, alpha);
  return masked_row_mean(sum(q * (log_q - log(mix)), -1), mask, "skew_rkl");
}

// ---- FDD ----------------------------------------------------------------------

VocabTrajectory project_layers(const TransformerLM& model, const ForwardTrace& trace,
                               const std::vector<std::size_t>& layers) {
  VocabTrajectory out;
  for (std::size_t l : layers) out.emplace(l, model.project_to_vocab(trace.layer(l)));
  return out;
}

std::vector<std::size_t> fdd_student_layers(const LayerSchedule& schedule) {
  std::set<std::size_t> s;
  for (const auto& e : schedule.entries) {
    s.insert(e.student_layer);
    s.insert(e.student_layer - 1);
  }
  return {s.begin(), s.end()};
}

std::vector<std::size_t> fdd_teacher_layers(const LayerSchedule& schedule) {
  std::set<std::size_t> s;
  for (const auto& e : schedule.entries) {
    s.insert(e.teacher_layer);
    s.insert(e.teacher_layer - 1);
  }
  return {s.begin(), s.end()};
}

Tensor fdd_traj(const VocabTrajectory& teacher, const VocabTrajectory& student, const LayerSchedule& schedule,
                std::span<const double> mask) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& e : schedule.entries) {
    const Tensor& yt = trajectory_at(teacher, e.teacher_layer, "teacher");
    const Tensor& ys = trajectory_at(student, e.student_layer, "student");
    total = total + kl_from_log_probs(yt, ys, mask);
  }
  return total;
}

Tensor fdd_der(const VocabTrajectory& teacher, const VocabTrajectory& student, const LayerSchedule& schedule,
               std::span<const double> mask, FddStats* stats) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& e : schedule.entries) {
    if (e.student_layer == 0 || e.teacher_layer == 0) throw Error("FDD derivative needs layer >= 1");
    const Tensor dt = trajectory_at(teacher, e.teacher_layer, "teacher") -
                      trajectory_at(teacher, e.teacher_layer - 1, "teacher");
    const Tensor ds = trajectory_at(student, e.student_layer, "student") -
                      trajectory_at(student, e.student_layer - 1, "student");
    if (dt.shape() != ds.shape()) {
      throw ShapeError("fdd_der: shape mismatch " + to_string(dt.shape()) + " vs " + to_string(ds.shape()));
    }
    const Tensor dot = sum(dt * ds, -1);
    const Tensor nt = l2_norm(dt);
    const Tensor ns = l2_norm(ds);
    if (dot.numel() != mask.size()) throw ShapeError("fdd_der: mask does not match positions");
    std::vector<double> keep(mask.size(), 0.0);
    std::vector<std::uint8_t> drop(mask.size(), 1);
    double count = 0.0;
    for (std::size_t r = 0; r < mask.size(); ++r) {
      if (mask[r] == 0.0) continue;
      if (nt[r] < kMinNorm || ns[r] < kMinNorm) {
        if (stats) ++stats->skipped_tokens;
        continue;
      }
      keep[r] = 1.0;
      drop[r] = 0;
      count += 1.0;
    }
    if (count == 0.0) continue;
    const Tensor den = masked_fill(nt * ns, Mask(dot.shape(), std::move(drop)), 1.0);
    const Tensor dist = one_minus(dot / den);
    total = total + scale(sum(dist * Tensor(dot.shape(), std::move(keep))), 1.0 / count);
  }
  return total;
}

Tensor fdd_traj(const TransformerLM& teacher, const ForwardTrace& teacher_trace, const TransformerLM& student,
                const ForwardTrace& student_trace, const LayerSchedule& schedule, std::span<const double> mask) {
  std::vector<std::size_t> tl, sl;
  for (const auto& e : schedule.entries) {
    tl.push_back(e.teacher_layer);
    sl.push_back(e.student_layer);
  }
  return fdd_traj(project_layers(teacher, teacher_trace, tl), project_layers(student, student_trace, sl), schedule,
                  mask);
}

Tensor fdd_der(const TransformerLM& teacher, const ForwardTrace& teacher_trace, const TransformerLM& student,
               const ForwardTrace& student_trace, const LayerSchedule& schedule, std::span<const double> mask,
               FddStats* stats) {
  return fdd_der(project_layers(teacher, teacher_trace, fdd_teacher_layers(schedule)),
                 project_layers(student, student_trace, fdd_student_layers(schedule)), schedule, mask, stats);
}

// ---- DSA ----------------------------------------------------------------------

Tensor cosine_distance_matrix(const Tensor& reps) {
  if (reps.rank() != 2) throw ShapeError("cosine_distance_matrix: expected [n, d], got " + to_string(reps.shape()));
  const Tensor norms = l2_norm(reps, true);
  for (std::size_t i = 0; i < norms.numel(); ++i) {
    if (norms[i] < kMinNorm) throw Error("cosine distance: span " + std::to_string(i) + " has a zero representation");
  }
  const Tensor unit = reps / norms;
  return one_minus(matmul(unit, transpose(unit)));
}

Tensor dsa_layer(const Tensor& student_reps, const Tensor& teacher_reps, const Tensor& span_weights,
                 DsaStats* stats) {
  if (student_reps.rank() != 2 || teacher_reps.rank() != 2) {
    throw ShapeError("dsa_layer: span reps must be [n, d], got " + to_string(student_reps.shape()) + " and " +
                     to_string(teacher_reps.shape()));
  }
  const std::size_t n = student_reps.dim(0);
  if (teacher_reps.dim(0) != n || span_weights.shape() != Shape{n}) {
    throw Error("dsa_layer: span-count mismatch: student " + std::to_string(n) + ", teacher " +
                std::to_string(teacher_reps.dim(0)) + ", weights " + to_string(span_weights.shape()));
  }
  if (n < 2) {
    if (stats) ++stats->degenerate;
    return Tensor::scalar(0.0);
  }
  const Tensor gap = cosine_distance_matrix(student_reps) - cosine_distance_matrix(teacher_reps);
  std::vector<double> upper(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) upper[i * n + j] = 1.0;
  const Tensor pair_weights = matmul(reshape(span_weights, {n, 1}), reshape(span_weights, {1, n})) *
                              Tensor({n, n}, std::move(upper));
  return sum(pair_weights * square(gap));
}

const Tensor& TeacherWeightCache::get(const ForwardTrace& teacher, std::size_t layer) {
  auto it = cache_.find(layer);
  if (it == cache_.end()) it = cache_.emplace(layer, token_weights(teacher.layer(layer), teacher.padding)).first;
  return it->second;
}

DsaResult dsa_total(const AlignmentInputs& in, TeacherWeightCache& teacher_weights) {
  if (in.schedule.entries.empty()) throw Error("dsa_total: empty layer schedule");
  const Tensor& first = in.student.layer(0);
  const std::size_t B = first.dim(0), T = first.dim(1);
  if (in.spans.size() != B) {
    throw Error("dsa_total: " + std::to_string(in.spans.size()) + " span sets for a batch of " + std::to_string(B));
  }
  DsaResult result;
  Tensor total = Tensor::scalar(0.0);
  for (const auto& e : in.schedule.entries) {
    const Tensor& hs = in.student.layer(e.student_layer);
    const Tensor& ht = in.teacher.layer(e.teacher_layer);
    if (ht.dim(0) != B || ht.dim(1) != T) throw ShapeError("dsa_total: teacher and student batches differ");
    const Tensor& wt = teacher_weights.get(in.teacher, e.teacher_layer);
    const Tensor ws = in.pool == SpanPoolWeights::own ? token_weights(hs, in.student.padding) : wt;
    Tensor layer_sum = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const TokenSpanMap& map = in.spans[b].at(e.granularity);
      if (map.size() < 2) {
        ++result.stats.degenerate;
        continue;
      }
      const Tensor wt_b = row_slice(wt, b);
      const Tensor us = span_representations(row_slice(hs, b), row_slice(ws, b), map);
      const Tensor ut = span_representations(row_slice(ht, b), wt_b, map);
      layer_sum = layer_sum + dsa_layer(us, ut, span_weights(wt_b, map), &result.stats);
    }
    const Tensor layer_mean = scale(layer_sum, 1.0 / static_cast<double>(B));
    result.per_layer.push_back(layer_mean.item());
    total = total + layer_mean;
  }
  result.total = scale(total, 1.0 / static_cast<double>(in.schedule.entries.size()));
  return result;
}

// ---- hidden alignment ---------------------------------------------------------

Projectors Projectors::init(std::size_t n_layers, std::size_t d_student, std::size_t d_teacher, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double a = std::sqrt(6.0 / static_cast<double>(d_student + d_teacher));
  std::uniform_real_distribution<double> dist(-a, a);
  Projectors p;
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::vector<double> w(d_student * d_teacher);
    for (double& v : w) v = dist(rng);
    p.weights.emplace_back(Shape{d_student, d_teacher}, std::move(w), true);
  }
  return p;
}

Tensor hid_layer(const Tensor& projected, const Tensor& teacher, const Tensor& weights,
                 std::span<const double> covered, HidStats* stats, std::size_t* used) {
  if (projected.rank() != 3 || projected.shape() != teacher.shape()) {
    throw ShapeError("hid_layer: shape mismatch " + to_string(projected.shape()) + " vs " + to_string(teacher.shape()));
  }
  const std::size_t B = projected.dim(0), T = projected.dim(1);
  if (weights.shape() != Shape{B, T} || covered.size() != B * T) {
    throw ShapeError("hid_layer: weights or coverage do not match [" + std::to_string(B) + ", " + std::to_string(T) +
                     "]");
  }
  const Tensor dot = sum(projected * teacher, -1);  // [B, T]
  const Tensor np = l2_norm(projected);
  const Tensor nt = l2_norm(teacher);
  std::vector<double> keep(covered.begin(), covered.end());
  std::vector<std::uint8_t> drop(B * T, 1);
  std::size_t n = 0;
  for (std::size_t r = 0; r < B * T; ++r) {
    if (keep[r] == 0.0) continue;
    if (np[r] < kMinNorm || nt[r] < kMinNorm) {
      keep[r] = 0.0;
      if (stats) ++stats->skipped_tokens;
      continue;
    }
    drop[r] = 0;
    ++n;
  }
  if (used) *used = n;
  const Tensor den = masked_fill(np * nt, Mask({B, T}, std::move(drop)), 1.0);
  const Tensor dist = one_minus(dot / den);
  const Tensor term = sum(dist * weights * Tensor({B, T}, std::move(keep)));
  return scale(term, 1.0 / static_cast<double>(B));
}

Tensor hid_loss(const AlignmentInputs& in, const Projectors& projectors, TeacherWeightCache& teacher_weights,
                HidStats* stats) {
  if (projectors.weights.size() != in.schedule.entries.size()) {
    throw Error("hid_loss: " + std::to_string(projectors.weights.size()) + " projectors for " +
                std::to_string(in.schedule.entries.size()) + " scheduled layers");
  }
  Tensor total = Tensor::scalar(0.0);
  bool any_covered = false;
  for (std::size_t i = 0; i < in.schedule.entries.size(); ++i) {
    const auto& e = in.schedule.entries[i];
    const Tensor& hs = in.student.layer(e.student_layer);
    const Tensor& ht = in.teacher.layer(e.teacher_layer);
    const Tensor& w = projectors.weights[i];
    if (w.shape() != Shape{hs.dim(2), ht.dim(2)}) {
      throw ShapeError("hid_loss: projector " + to_string(w.shape()) + " does not map d_S=" +
                       std::to_string(hs.dim(2)) + " to d_T=" + std::to_string(ht.dim(2)));
    }
    const std::size_t B = hs.dim(0), T = hs.dim(1);
    if (in.spans.size() != B) throw Error("hid_loss: span sets do not match the batch");
    const std::vector<double> covered = coverage(in.spans, e.granularity, B, T);
    std::size_t used = 0;
    total = total + hid_layer(matmul(hs, w), ht, teacher_weights.get(in.teacher, e.teacher_layer), covered, stats,
                              &used);
    if (used) any_covered = true;
  }
  if (!any_covered) throw Error("hid_loss: no span-covered token in any scheduled layer");
  return total;
}

// ---- total --------------------------------------------------------------------

double LossReport::recompose(const LossWeights& w) const {
  return base + traj + der + w.lambda_dsa * dsa + w.lambda_hid * hid;
}

std::string LossReport::to_json_line() const {
  nlohmann::json j;
  j["step"] = step;
  j["base"] = base;
  j["traj"] = traj;
  j["der"] = der;
  j["dsa"] = dsa;
  j["hid"] = hid;
  j["total"] = total;
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [l, v] : per_layer_dsa) layers[std::to_string(l)] = v;
  j["per_layer_dsa"] = layers;
  return j.dump();
}

Objective total_loss(const ObjectiveInputs& in) {
  if (in.weights.lambda_dsa < 0.0 || in.weights.lambda_hid < 0.0) throw Error("loss weights must be non-negative");
  Objective out;
  LossReport& rep = out.report;

  Tensor base;
  switch (in.base) {
    case BaseKind::kl:
    case BaseKind::fdd: base = kd_forward_kl(in.teacher_trace.logits, in.student_trace.logits, in.mask); break;
    case BaseKind::skew_kl:
      base = skew_kl(in.teacher_trace.logits, in.student_trace.logits, in.weights.skew_alpha, in.mask);
      break;
    case BaseKind::skew_rkl:
      base = skew_rkl(in.teacher_trace.logits, in.student_trace.logits, in.weights.skew_alpha, in.mask);
      break;
  }
  rep.base = base.item();
  Tensor total = base;

  if (in.base == BaseKind::fdd) {
    const auto yt = project_layers(in.teacher, in.teacher_trace, fdd_teacher_layers(in.schedule));
    const auto ys = project_layers(in.student, in.student_trace, fdd_student_layers(in.schedule));
    const Tensor traj = fdd_traj(yt, ys, in.schedule, in.mask);
    const Tensor der = fdd_der(yt, ys, in.schedule, in.mask);
    rep.traj = traj.item();
    rep.der = der.item();
    total = total + traj + der;
  }

  const bool dsa_active = in.weights.lambda_dsa > 0.0;
  const bool hid_active = in.weights.lambda_hid > 0.0;
  if (dsa_active || hid_active || in.report_inactive_terms) {
    const AlignmentInputs align{in.student_trace, in.teacher_trace, in.spans, in.schedule, in.pool};
    TeacherWeightCache cache;
    {
      std::optional<NoGradScope> detached;
      if (!dsa_active) detached.emplace();
      const DsaResult dsa = dsa_total(align, cache);
      rep.dsa = dsa.total.item();
      for (std::size_t i = 0; i < in.schedule.entries.size(); ++i) {
        rep.per_layer_dsa[in.schedule.entries[i].student_layer] = dsa.per_layer[i];
      }
      if (dsa_active) total = total + scale(dsa.total, in.weights.lambda_dsa);
    }
    if (in.projectors) {
      std::optional<NoGradScope> detached;
      if (!hid_active) detached.emplace();
      const Tensor hid = hid_loss(align, *in.projectors, cache);
      rep.hid = hid.item();
      if (hid_active) total = total + scale(hid, in.weights.lambda_hid);
    } else if (hid_active) {
      throw Error("hidden alignment is enabled but no projectors were supplied");
    }
  }
  rep.total = total.item();
  out.total = total;
  return out;
}

}  // namespace mta
