#include "mta/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mta/optim.hpp"
#include "mta/rouge.hpp"
#include "mta/saliency.hpp"

namespace mta {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::vector<const EncodedSample*> rows_of(const std::vector<EncodedSample>& data, std::size_t begin, std::size_t end) {
  std::vector<const EncodedSample*> rows;
  for (std::size_t i = begin; i < end; ++i) rows.push_back(&data[i]);
  return rows;
}

std::vector<std::vector<const EncodedSample*>> epoch_batches(const std::vector<EncodedSample>& data,
                                                             std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<const EncodedSample*>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    std::vector<const EncodedSample*> rows;
    for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) rows.push_back(&data[order[j]]);
    batches.push_back(std::move(rows));
  }
  return batches;
}

std::uint64_t parameter_digest(const TransformerLM& model) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : model.parameters()) {
    for (double v : p.value.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = (h ^ bits) * 1099511628211ull;
    }
  }
  return h;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

[[noreturn]] void abort_non_finite(const std::filesystem::path& out, std::size_t step, std::size_t epoch,
                                   const std::vector<const EncodedSample*>& rows, const json& values) {
  json dump{{"step", step}, {"epoch", epoch}, {"values", values}};
  json ids = json::array();
  for (const auto* r : rows) ids.push_back(r->id);
  dump["sample_ids"] = ids;
  write_text(out / "nan_step.json", dump.dump(2) + "\n");
  throw NonFiniteLoss("non-finite loss at step " + std::to_string(step) + "; batch written to " +
                      (out / "nan_step.json").string());
}

double elapsed_seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& stream) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : stream) h = (h ^ c) * 1099511628211ull;
  return splitmix64(seed ^ splitmix64(h));
}

Dataset load_dataset(const RunConfig& config, bool need_spans) {
  Dataset ds;
  ds.tokenizer = make_tokenizer(config.tokenizer);
  std::vector<Sample> samples;
  std::vector<SpanAnnotation> spans;
  std::size_t n_heldout = 0;
  if (config.paths.corpus.empty()) {
    AnnotatedCorpus gen =
        generate_grammar_corpus(config.synthetic.train + config.synthetic.heldout, config.synthetic.seed);
    samples = std::move(gen.samples);
    if (need_spans) spans = std::move(gen.spans);
    n_heldout = config.synthetic.heldout;
  } else {
    samples = read_corpus_jsonl(config.paths.corpus);
    n_heldout = config.heldout;
    if (need_spans) {
      if (config.paths.spans.empty()) throw ConfigError("paths.spans: required for this command");
      spans = read_span_jsonl(config.paths.spans);
    }
  }
  if (samples.empty()) throw Error("corpus is empty");
  if (n_heldout >= samples.size()) {
    throw ConfigError(std::string(config.paths.corpus.empty() ? "synthetic.heldout" : "heldout") +
                      ": leaves no training samples");
  }
  if (need_spans) {
    std::set<std::string> corpus_ids;
    for (const auto& s : samples) {
      if (!corpus_ids.insert(s.id).second) throw Error("sample " + s.id + ": duplicate id in corpus");
    }
    std::set<std::string> span_ids;
    for (const auto& a : spans) {
      if (!span_ids.insert(a.sample_id).second) throw Error("sample " + a.sample_id + ": duplicate span annotation");
      if (!corpus_ids.count(a.sample_id)) throw Error("sample " + a.sample_id + ": span annotation has no corpus sample");
    }
  }
  const std::size_t max_len = std::min(config.teacher.max_seq_len, config.student.max_seq_len);
  std::vector<EncodedSample> encoded = encode_corpus(samples, spans, *ds.tokenizer, max_len);
  const std::size_t n_train = encoded.size() - n_heldout;
  ds.train.assign(std::make_move_iterator(encoded.begin()), std::make_move_iterator(encoded.begin() + n_train));
  ds.heldout.assign(std::make_move_iterator(encoded.begin() + n_train), std::make_move_iterator(encoded.end()));
  ds.has_spans = need_spans;
  return ds;
}

RunLog::RunLog(const std::filesystem::path& dir, bool quiet) : os_(dir / "log.txt", std::ios::app), quiet_(quiet) {
  if (!os_) throw Error("cannot write " + (dir / "log.txt").string());
}

void RunLog::line(const std::string& text) {
  os_ << text << '\n';
  os_.flush();
  if (!quiet_) std::cerr << text << '\n';
}

std::string EvalMetrics::to_json() const {
  json j{{"samples", samples},
         {"tokens", tokens},
         {"heldout_ce", heldout_ce},
         {"heldout_ppl", heldout_ppl},
         {"response_ce", response_ce},
         {"copy_accuracy", copy_accuracy},
         {"rouge_l", {{"precision", rouge_l_precision}, {"recall", rouge_l_recall}, {"f1", rouge_l_f1}}}};
  if (has_dsa) {
    json layers = json::object();
    for (const auto& [l, v] : per_layer_dsa) layers[std::to_string(l)] = v;
    j["dsa"] = {{"mean", mean_dsa}, {"per_layer", layers}, {"degenerate", dsa_degenerate}};
  }
  return j.dump(2);
}

std::vector<std::vector<std::int32_t>> greedy_continue(const TransformerLM& model,
                                                       const std::vector<EncodedSample>& data,
                                                       std::int32_t pad_id) {
  NoGradScope no_grad;
  const std::size_t V = model.config().vocab_size;
  std::vector<std::vector<std::int32_t>> seqs, out(data.size());
  std::vector<std::size_t> remaining;
  std::size_t steps = 0;
  for (const auto& s : data) {
    const auto& ids = s.encoding.ids;
    const std::size_t prompt = std::max<std::size_t>(1, s.response_token);
    seqs.emplace_back(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(std::min(prompt, ids.size())));
    remaining.push_back(ids.size() > prompt ? ids.size() - prompt : 0);
    steps = std::max(steps, remaining.back());
  }
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (remaining[i] > 0) active.push_back(i);
    TokenBatch batch;
    batch.batch = active.size();
    for (std::size_t i : active) batch.seq = std::max(batch.seq, seqs[i].size());
    batch.ids.assign(batch.batch * batch.seq, pad_id);
    std::vector<std::uint8_t> pad(batch.batch * batch.seq, 1);
    for (std::size_t b = 0; b < active.size(); ++b) {
      const auto& s = seqs[active[b]];
      for (std::size_t t = 0; t < s.size(); ++t) {
        batch.ids[b * batch.seq + t] = s[t];
        pad[b * batch.seq + t] = 0;
      }
    }
    batch.padding = Mask({batch.batch, batch.seq}, std::move(pad));
    const ForwardTrace trace = model.forward(batch);
    const auto logits = trace.logits.data();
    for (std::size_t b = 0; b < active.size(); ++b) {
      const std::size_t i = active[b];
      const double* row = logits.data() + (b * batch.seq + seqs[i].size() - 1) * V;
      const auto best = static_cast<std::int32_t>(std::max_element(row, row + V) - row);
      seqs[i].push_back(best);
      out[i].push_back(best);
      --remaining[i];
    }
  }
  return out;
}

EvalMetrics evaluate(const TransformerLM& model, const Tokenizer& tokenizer, const std::vector<EncodedSample>& data,
                     const EvalOptions& options) {
  if (data.empty()) throw Error("evaluation set is empty");
  NoGradScope no_grad;
  EvalMetrics m;
  m.samples = data.size();
  const std::size_t V = model.config().vocab_size;
  double ce_sum = 0.0, resp_sum = 0.0;
  std::size_t n_ce = 0, n_resp = 0, n_correct = 0, n_dsa_rows = 0;
  std::map<std::size_t, double> dsa_sums;
  const bool probe = options.teacher && options.schedule;

  for (std::size_t begin = 0; begin < data.size(); begin += options.batch_size) {
    const auto rows = rows_of(data, begin, std::min(data.size(), begin + options.batch_size));
    const Batch batch = make_batch(rows, tokenizer.pad_id(), options.response_only);
    const ForwardTrace trace = model.forward(batch.tokens);
    const Tensor logp = log_softmax(trace.logits);
    const auto lp = logp.data();
    const std::size_t T = batch.tokens.seq;
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const std::size_t len = rows[b]->encoding.ids.size();
      for (std::size_t t = 0; t + 1 < len; ++t) {
        const double* row = lp.data() + (b * T + t) * V;
        const double nll = -row[batch.targets[b * T + t]];
        if (batch.loss_mask[b * T + t] != 0.0) {
          ce_sum += nll;
          ++n_ce;
        }
        if (t + 1 >= rows[b]->response_token) {
          resp_sum += nll;
          ++n_resp;
          const auto best = std::max_element(row, row + V) - row;
          if (best == batch.targets[b * T + t]) ++n_correct;
        }
      }
    }
    if (probe) {
      const ForwardTrace tt = options.teacher->forward(batch.tokens);
      const AlignmentInputs in{trace, tt, batch.spans, *options.schedule, options.pool};
      TeacherWeightCache cache;
      const DsaResult r = dsa_total(in, cache);
      for (std::size_t i = 0; i < options.schedule->entries.size(); ++i) {
        dsa_sums[options.schedule->entries[i].student_layer] += r.per_layer[i] * static_cast<double>(rows.size());
      }
      m.dsa_degenerate += r.stats.degenerate;
      n_dsa_rows += rows.size();
    }
  }
  m.tokens = n_ce;
  m.heldout_ce = n_ce ? ce_sum / static_cast<double>(n_ce) : 0.0;
  m.heldout_ppl = std::exp(m.heldout_ce);
  m.response_ce = n_resp ? resp_sum / static_cast<double>(n_resp) : 0.0;
  m.copy_accuracy = n_resp ? static_cast<double>(n_correct) / static_cast<double>(n_resp) : 0.0;

  if (probe) {
    m.has_dsa = true;
    double total = 0.0;
    for (auto& [l, v] : dsa_sums) {
      v /= static_cast<double>(n_dsa_rows);
      total += v;
    }
    m.per_layer_dsa = dsa_sums;
    m.mean_dsa = total / static_cast<double>(dsa_sums.size());
  }

  if (options.generate) {
    const auto outputs = greedy_continue(model, data, tokenizer.pad_id());
    double p = 0.0, r = 0.0, f = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& ids = data[i].encoding.ids;
      if (data[i].response_token >= ids.size()) continue;
      const std::vector<std::int32_t> ref_ids(ids.begin() + static_cast<std::ptrdiff_t>(data[i].response_token),
                                              ids.end());
      const auto reference = tokenizer.words(tokenizer.decode(ref_ids));
      if (reference.empty()) continue;
      const RougeScore s = rouge_l(tokenizer.words(tokenizer.decode(outputs[i])), reference);
      p += s.precision;
      r += s.recall;
      f += s.f1;
      ++n;
    }
    if (n) {
      m.rouge_l_precision = p / static_cast<double>(n);
      m.rouge_l_recall = r / static_cast<double>(n);
      m.rouge_l_f1 = f / static_cast<double>(n);
    }
  }
  return m;
}

TeacherRun train_teacher(const RunConfig& config, const std::filesystem::path& out, bool quiet) {
  config.validate();
  Dataset data = load_dataset(config, false);
  std::filesystem::create_directories(out);
  save_config(out / "config.json", config);
  RunLog log(out, quiet);
  const auto started = std::chrono::steady_clock::now();

  TransformerLM teacher(config.teacher, derive_seed(config.seed, "teacher-init"));
  const OptimConfig& oc = config.teacher_training;
  Adam opt(teacher.parameter_tensors(), {.lr = oc.lr, .weight_decay = oc.weight_decay});
  std::mt19937_64 shuffle_rng(derive_seed(config.seed, "teacher-shuffle"));
  const std::size_t per_epoch = (data.train.size() + oc.batch_size - 1) / oc.batch_size;
  const std::size_t total_steps = per_epoch * oc.epochs;
  log.line("train-teacher: " + std::to_string(data.train.size()) + " train / " + std::to_string(data.heldout.size()) +
           " held-out samples, " + std::to_string(teacher.parameter_count()) + " parameters, " +
           std::to_string(total_steps) + " steps");

  std::ofstream losses(out / "losses.jsonl");
  TeacherRun run;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < oc.epochs; ++epoch) {
    double epoch_sum = 0.0;
    const auto batches = epoch_batches(data.train, oc.batch_size, shuffle_rng);
    for (const auto& rows : batches) {
      Tape tape;
      TapeScope scope(tape);
      const Batch batch = make_batch(rows, data.tokenizer->pad_id(), oc.response_only);
      const ForwardTrace trace = teacher.forward(batch.tokens);
      const Tensor ce = cross_entropy(trace.logits, batch.targets, batch.loss_mask);
      const double value = ce.item();
      if (!std::isfinite(value)) abort_non_finite(out, step, epoch, rows, {{"ce", fmt(value)}});
      tape.backward(ce);
      clip_grad_norm(opt.params(), oc.grad_clip);
      const double lr = cosine_lr(oc.lr, step, total_steps, oc.warmup_steps);
      opt.step(lr);
      opt.zero_grad();
      losses << json{{"step", step}, {"epoch", epoch}, {"ce", value}, {"lr", lr}}.dump() << '\n';
      epoch_sum += value;
      ++step;
    }
    run.epoch_train_ce.push_back(epoch_sum / static_cast<double>(batches.size()));
    log.line("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(oc.epochs) +
             " train_ce=" + fmt(run.epoch_train_ce.back()) + " elapsed=" + fmt(elapsed_seconds(started), 4) + "s");
  }

  EvalOptions eo;
  eo.response_only = oc.response_only;
  run.heldout = evaluate(teacher, *data.tokenizer, data.heldout, eo);
  log.line("held-out ce=" + fmt(run.heldout.heldout_ce) + " ppl=" + fmt(run.heldout.heldout_ppl) +
           " copy_accuracy=" + fmt(run.heldout.copy_accuracy) + " rouge_l_f1=" + fmt(run.heldout.rouge_l_f1));

  json metrics;
  metrics["command"] = "train-teacher";
  metrics["epoch_train_ce"] = run.epoch_train_ce;
  metrics["heldout"] = json::parse(run.heldout.to_json());
  metrics["steps"] = step;
  write_text(out / "metrics.json", metrics.dump(2) + "\n");
  teacher.save(out / "teacher.ckpt");
  log.line("wrote " + (out / "teacher.ckpt").string());
  return run;
}

DistillRun distill(const RunConfig& config, const TransformerLM& teacher, const std::filesystem::path& out,
                   const DistillOptions& options) {
  config.validate();
  if (!(teacher.config() == config.teacher)) {
    throw ConfigError("teacher: checkpoint architecture differs from the configured teacher");
  }
  const LayerSchedule schedule = config.schedule();
  // Span/corpus mismatches surface here, before any training.
  Dataset data = load_dataset(config, true);

  std::filesystem::create_directories(out);
  save_config(out / "config.json", config);
  write_text(out / "schedule.txt", schedule.describe());
  RunLog log(out, options.quiet);
  log.line(schedule.describe());
  const auto started = std::chrono::steady_clock::now();
  const std::uint64_t teacher_digest = parameter_digest(teacher);

  const DistillConfig& dc = config.distill;
  const OptimConfig& oc = dc.optim;
  TransformerLM student(config.student, derive_seed(config.seed, "student-init"));
  Projectors projectors = Projectors::init(schedule.entries.size(), config.student.d_model, config.teacher.d_model,
                                           derive_seed(config.seed, "projector-init"));
  Adam opt_student(student.parameter_tensors(), {.lr = oc.lr, .weight_decay = oc.weight_decay});
  Adam opt_proj(projectors.weights, {.lr = dc.projector_lr});
  std::vector<Tensor> clipped = student.parameter_tensors();
  clipped.insert(clipped.end(), projectors.weights.begin(), projectors.weights.end());

  std::mt19937_64 shuffle_rng(derive_seed(config.seed, "distill-shuffle"));
  const std::size_t per_epoch = (data.train.size() + oc.batch_size - 1) / oc.batch_size;
  const std::size_t total_steps = per_epoch * oc.epochs;
  const LossWeights weights{dc.lambda_dsa, dc.lambda_hid, dc.skew_alpha};
  log.line("distill: base=" + std::string(to_string(dc.base)) + " lambda_dsa=" + fmt(dc.lambda_dsa) +
           " lambda_hid=" + fmt(dc.lambda_hid) + " steps=" + std::to_string(total_steps) +
           " student_parameters=" + std::to_string(student.parameter_count()));

  EvalOptions eo;
  eo.response_only = oc.response_only;
  eo.teacher = &teacher;
  eo.schedule = &schedule;
  eo.pool = dc.span_pool_weights;

  std::ofstream losses(out / "losses.jsonl");
  std::ofstream evals;
  if (dc.eval_every) evals.open(out / "evals.jsonl");
  DistillRun run;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < oc.epochs; ++epoch) {
    for (const auto& rows : epoch_batches(data.train, oc.batch_size, shuffle_rng)) {
      Tape tape;
      TapeScope scope(tape);
      const Batch batch = make_batch(rows, data.tokenizer->pad_id(), oc.response_only);
      ForwardTrace teacher_trace;
      {
        NoGradScope frozen;
        teacher_trace = teacher.forward(batch.tokens);
      }
      const ForwardTrace student_trace = student.forward(batch.tokens);
      const ObjectiveInputs in{teacher,       teacher_trace,   student,           student_trace,
                               batch.spans,   schedule,        &projectors,       batch.loss_mask,
                               dc.base,       weights,         dc.span_pool_weights, options.report_inactive_terms};
      Objective obj = total_loss(in);
      obj.report.step = step;
      if (!std::isfinite(obj.report.total)) {
        abort_non_finite(out, step, epoch, rows, json::parse(obj.report.to_json_line()));
      }
      tape.backward(obj.total);
      clip_grad_norm(clipped, oc.grad_clip);
      opt_student.step(cosine_lr(oc.lr, step, total_steps, oc.warmup_steps));
      opt_proj.step(cosine_lr(dc.projector_lr, step, total_steps, oc.warmup_steps));
      opt_student.zero_grad();
      opt_proj.zero_grad();
      losses << obj.report.to_json_line() << '\n';
      run.reports.push_back(obj.report);
      ++step;
      if (step % 50 == 0) {
        log.line("step " + std::to_string(step) + "/" + std::to_string(total_steps) + " total=" +
                 fmt(obj.report.total) + " base=" + fmt(obj.report.base) + " dsa=" + fmt(obj.report.dsa) +
                 " hid=" + fmt(obj.report.hid) + " elapsed=" + fmt(elapsed_seconds(started), 4) + "s");
      }
      if (dc.eval_every && step % dc.eval_every == 0) {
        EvalOptions quick = eo;
        quick.generate = false;
        const EvalMetrics em = evaluate(student, *data.tokenizer, data.heldout, quick);
        evals << json{{"step", step}, {"heldout_ce", em.heldout_ce}, {"mean_dsa", em.mean_dsa}}.dump() << '\n';
      }
    }
  }
  run.steps = step;
  run.heldout = evaluate(student, *data.tokenizer, data.heldout, eo);
  if (parameter_digest(teacher) != teacher_digest) throw Error("teacher parameters changed during distillation");
  log.line("held-out ce=" + fmt(run.heldout.heldout_ce) + " mean_dsa=" + fmt(run.heldout.mean_dsa) +
           " rouge_l_f1=" + fmt(run.heldout.rouge_l_f1) + " elapsed=" + fmt(elapsed_seconds(started), 4) + "s");

  json metrics;
  metrics["command"] = "distill";
  metrics["steps"] = step;
  metrics["heldout"] = json::parse(run.heldout.to_json());
  write_text(out / "metrics.json", metrics.dump(2) + "\n");
  if (options.save_checkpoint) student.save(out / "student.ckpt");
  return run;
}

std::vector<ProbeRow> probe_dsa(const TransformerLM& student, const TransformerLM* teacher,
                                const HiddenDump* teacher_dump, const std::vector<EncodedSample>& data,
                                const LayerSchedule& schedule, SpanPoolWeights pool) {
  if (!teacher && !teacher_dump) throw Error("probe_dsa needs a teacher model or a teacher dump");
  NoGradScope no_grad;
  std::unordered_map<std::string, const HiddenRecord*> records;
  if (teacher_dump) {
    for (const auto& r : teacher_dump->records) records.emplace(r.sample_id, &r);
  }
  std::vector<ProbeRow> rows;
  for (const auto& s : data) {
    TokenBatch batch;
    batch.batch = 1;
    batch.seq = s.encoding.ids.size();
    batch.ids = s.encoding.ids;
    batch.padding = Mask::filled({1, batch.seq}, false);
    const ForwardTrace st = student.forward(batch);
    ForwardTrace tt;
    if (teacher_dump) {
      const auto it = records.find(s.id);
      if (it == records.end()) throw Error("sample " + s.id + ": not present in the teacher dump");
      if (it->second->ids != s.encoding.ids) throw Error("sample " + s.id + ": dump token ids differ from the corpus");
      tt = trace_from_record(*it->second, teacher_dump->model);
    } else {
      tt = teacher->forward(batch);
    }
    const std::vector<AlignedSpans> spans{s.spans};
    const AlignmentInputs in{st, tt, spans, schedule, pool};
    TeacherWeightCache cache;
    const DsaResult r = dsa_total(in, cache);
    for (std::size_t i = 0; i < schedule.entries.size(); ++i) {
      const auto& e = schedule.entries[i];
      rows.push_back({s.id, e.student_layer, e.teacher_layer, e.granularity, r.per_layer[i],
                      s.spans.at(e.granularity).size() < 2});
    }
  }
  return rows;
}

void write_probe_csv(const std::filesystem::path& out, const std::vector<ProbeRow>& rows,
                     const LayerSchedule& schedule) {
  std::filesystem::create_directories(out);
  std::ofstream samples(out / "probe_dsa_samples.csv");
  samples << std::setprecision(17) << "sample_id,student_layer,teacher_layer,granularity,dsa,degenerate\n";
  for (const auto& r : rows) {
    samples << r.sample_id << ',' << r.student_layer << ',' << r.teacher_layer << ',' << to_string(r.granularity)
            << ',' << r.dsa << ',' << (r.degenerate ? 1 : 0) << '\n';
  }
  std::ofstream table(out / "probe_dsa.csv");
  table << std::setprecision(17) << "student_layer,teacher_layer,granularity,samples,degenerate,mean_dsa\n";
  for (const auto& e : schedule.entries) {
    double sum = 0.0;
    std::size_t n = 0, degenerate = 0;
    for (const auto& r : rows) {
      if (r.student_layer != e.student_layer) continue;
      sum += r.dsa;
      ++n;
      if (r.degenerate) ++degenerate;
    }
    table << e.student_layer << ',' << e.teacher_layer << ',' << to_string(e.granularity) << ',' << n << ','
          << degenerate << ',' << (n ? sum / static_cast<double>(n) : 0.0) << '\n';
  }
}

}  // namespace mta
