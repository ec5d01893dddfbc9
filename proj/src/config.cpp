#include "mta/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mta/tokenizer.hpp"

namespace mta {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) { throw ConfigError(path + ": " + why); }

// Reads optional fields of one JSON object and rejects keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(at(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const std::string& key, std::uint64_t& out, int) {
    std::size_t tmp = out;
    read(key, tmp);
    out = tmp;
  }
  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(at(key), "expected a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(at(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(at(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(at(key), "expected an array");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_number_unsigned()) fail(at(key) + "[" + std::to_string(i) + "]", "expected a non-negative integer");
        out.push_back((*v)[i].get<std::size_t>());
      }
    }
  }
  template <typename Enum, typename Parse>
  void read_enum(const std::string& key, Enum& out, Parse parse) {
    std::string s;
    if (!find(key)) return;
    read(key, s);
    try {
      out = parse(s);
    } catch (const Error& e) {
      fail(at(key), e.what());
    }
  }

  template <typename Fn>
  void object(const std::string& key, Fn fn) {
    if (const json* v = find(key)) {
      Reader child(*v, at(key));
      fn(child);
      child.finish();
    }
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) fail(at(key), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_model(Reader& r, ModelConfig& m) {
  r.read("n_layers", m.n_layers);
  r.read("d_model", m.d_model);
  r.read("n_heads", m.n_heads);
  r.read("vocab_size", m.vocab_size);
  r.read("max_seq_len", m.max_seq_len);
  r.read("d_ff", m.d_ff);
  r.read("tie_embeddings", m.tie_embeddings);
}

void read_optim(Reader& r, OptimConfig& o) {
  r.read("epochs", o.epochs);
  r.read("batch_size", o.batch_size);
  r.read("lr", o.lr);
  r.read("warmup_steps", o.warmup_steps);
  r.read("grad_clip", o.grad_clip);
  r.read("weight_decay", o.weight_decay);
  r.read("response_only", o.response_only);
}

json model_json(const ModelConfig& m) {
  return {{"n_layers", m.n_layers},     {"d_model", m.d_model}, {"n_heads", m.n_heads},
          {"vocab_size", m.vocab_size}, {"max_seq_len", m.max_seq_len}, {"d_ff", m.d_ff},
          {"tie_embeddings", m.tie_embeddings}};
}

json optim_json(const OptimConfig& o) {
  return {{"epochs", o.epochs},       {"batch_size", o.batch_size},     {"lr", o.lr},
          {"warmup_steps", o.warmup_steps}, {"grad_clip", o.grad_clip}, {"weight_decay", o.weight_decay},
          {"response_only", o.response_only}};
}

void check_model(const ModelConfig& m, const std::string& path) {
  try {
    m.validate();
  } catch (const Error& e) {
    throw ConfigError(path + "." + e.what());
  }
}

void check_optim(const OptimConfig& o, const std::string& path) {
  if (o.batch_size == 0) fail(path + ".batch_size", "must be positive");
  if (!(o.lr > 0.0)) fail(path + ".lr", "must be positive");
  if (o.weight_decay < 0.0) fail(path + ".weight_decay", "must be non-negative");
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.teacher_training.epochs = 20;
  c.teacher_training.batch_size = 16;
  c.teacher_training.lr = 3e-3;
  c.teacher_training.warmup_steps = 20;
  c.distill.optim.epochs = 4;
  c.distill.optim.batch_size = 16;
  c.distill.optim.lr = 2e-3;
  c.distill.optim.warmup_steps = 10;
  c.distill.optim.response_only = true;
  c.resolve();
  return c;
}

void RunConfig::resolve() {
  std::unique_ptr<Tokenizer> tok;
  try {
    tok = make_tokenizer(tokenizer);
  } catch (const Error& e) {
    fail("tokenizer", e.what());
  }
  if (teacher.vocab_size == 0) teacher.vocab_size = tok->vocab_size();
  if (student.vocab_size == 0) student.vocab_size = tok->vocab_size();
  validate();
}

void RunConfig::validate() const {
  std::unique_ptr<Tokenizer> tok;
  try {
    tok = make_tokenizer(tokenizer);
  } catch (const Error& e) {
    fail("tokenizer", e.what());
  }
  check_model(teacher, "teacher");
  check_model(student, "student");
  if (teacher.vocab_size != tok->vocab_size()) {
    fail("teacher.vocab_size", "must equal the " + tokenizer + " tokenizer vocabulary (" +
                                   std::to_string(tok->vocab_size()) + ")");
  }
  if (student.vocab_size != teacher.vocab_size) fail("student.vocab_size", "must equal teacher.vocab_size");
  if (student.n_layers == 0) fail("student.n_layers", "must be positive for layer alignment");
  if (teacher.n_layers == 0) fail("teacher.n_layers", "must be positive for layer alignment");
  check_optim(teacher_training, "teacher_training");
  check_optim(distill.optim, "distill.optim");
  if (distill.lambda_dsa < 0.0) fail("distill.lambda_dsa", "must be non-negative");
  if (distill.lambda_hid < 0.0) fail("distill.lambda_hid", "must be non-negative");
  if (!(distill.skew_alpha >= 0.0 && distill.skew_alpha < 1.0)) fail("distill.skew_alpha", "must lie in [0, 1)");
  if (!(distill.projector_lr > 0.0)) fail("distill.projector_lr", "must be positive");
  if (paths.corpus.empty()) {
    if (synthetic.train == 0) fail("synthetic.train", "must be positive");
    if (synthetic.heldout == 0) fail("synthetic.heldout", "must be positive");
    if (tokenizer != "whitespace" && tokenizer != "byte") fail("tokenizer", "unsupported");
    if (!paths.spans.empty()) fail("paths.spans", "must be empty when the synthetic corpus is used");
  } else if (heldout == 0) {
    fail("heldout", "must be positive");
  }
  if (paths.out.empty()) fail("paths.out", "must not be empty");
  try {
    (void)schedule();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    fail(distill.layers.empty() ? "distill.budget" : "distill.layers", e.what());
  }
}

LayerSchedule RunConfig::schedule() const {
  if (!distill.layers.empty()) {
    for (std::size_t i = 0; i < distill.layers.size(); ++i) {
      const std::size_t l = distill.layers[i];
      if (l < 1 || l > student.n_layers) {
        fail("distill.layers[" + std::to_string(i) + "]",
             "must lie in 1.." + std::to_string(student.n_layers));
      }
    }
    if (distill.word_count > distill.layers.size()) fail("distill.word_count", "exceeds the number of layers");
    return assign_granularity(distill.layers, distill.word_count, student.n_layers, teacher.n_layers);
  }
  if (distill.budget == 0) fail("distill.budget", "must be positive");
  if (distill.word_count > distill.budget) fail("distill.word_count", "exceeds distill.budget");
  if (distill.budget > 1 && distill.stride == 0) fail("distill.stride", "must be positive");
  return build_schedule(student.n_layers, teacher.n_layers, distill.stride, distill.budget, distill.word_count);
}

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("<root>: ") + e.what());
  }
  RunConfig c;
  Reader r(j, "");
  r.read("seed", c.seed, 0);
  r.read("tokenizer", c.tokenizer);
  r.read("heldout", c.heldout);
  r.object("synthetic", [&](Reader& s) {
    s.read("train", c.synthetic.train);
    s.read("heldout", c.synthetic.heldout);
    s.read("seed", c.synthetic.seed, 0);
  });
  r.object("teacher", [&](Reader& m) { read_model(m, c.teacher); });
  r.object("student", [&](Reader& m) { read_model(m, c.student); });
  r.object("teacher_training", [&](Reader& o) { read_optim(o, c.teacher_training); });
  r.object("distill", [&](Reader& d) {
    d.read_enum("base", c.distill.base, base_kind_from_string);
    d.read("lambda_dsa", c.distill.lambda_dsa);
    d.read("lambda_hid", c.distill.lambda_hid);
    d.read("skew_alpha", c.distill.skew_alpha);
    d.read("stride", c.distill.stride);
    d.read("budget", c.distill.budget);
    d.read("word_count", c.distill.word_count);
    d.read("layers", c.distill.layers);
    d.read_enum("span_pool_weights", c.distill.span_pool_weights, span_pool_weights_from_string);
    d.read("projector_lr", c.distill.projector_lr);
    d.read("eval_every", c.distill.eval_every);
    d.object("optim", [&](Reader& o) { read_optim(o, c.distill.optim); });
  });
  r.object("paths", [&](Reader& p) {
    p.read("corpus", c.paths.corpus);
    p.read("spans", c.paths.spans);
    p.read("teacher", c.paths.teacher);
    p.read("out", c.paths.out);
  });
  r.finish();
  c.resolve();
  return c;
}

std::string config_to_json_text(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["tokenizer"] = c.tokenizer;
  j["heldout"] = c.heldout;
  j["synthetic"] = {{"train", c.synthetic.train}, {"heldout", c.synthetic.heldout}, {"seed", c.synthetic.seed}};
  j["teacher"] = model_json(c.teacher);
  j["student"] = model_json(c.student);
  j["teacher_training"] = optim_json(c.teacher_training);
  j["distill"] = {{"base", to_string(c.distill.base)},
                  {"lambda_dsa", c.distill.lambda_dsa},
                  {"lambda_hid", c.distill.lambda_hid},
                  {"skew_alpha", c.distill.skew_alpha},
                  {"stride", c.distill.stride},
                  {"budget", c.distill.budget},
                  {"word_count", c.distill.word_count},
                  {"layers", c.distill.layers},
                  {"span_pool_weights", to_string(c.distill.span_pool_weights)},
                  {"projector_lr", c.distill.projector_lr},
                  {"eval_every", c.distill.eval_every},
                  {"optim", optim_json(c.distill.optim)}};
  j["paths"] = {{"corpus", c.paths.corpus}, {"spans", c.paths.spans}, {"teacher", c.paths.teacher}, {"out", c.paths.out}};
  return j.dump(2) + "\n";
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("<file>: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return config_from_json_text(ss.str());
}

void save_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << config_to_json_text(config);
}

}  // namespace mta
