#include "mta/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "mta/binary_io.hpp"

namespace mta {

using nlohmann::json;

void ModelConfig::validate() const {
  const auto fail = [](const std::string& field, const std::string& why) { throw Error(field + ": " + why); };
  if (d_model == 0) fail("d_model", "must be positive");
  if (n_heads == 0) fail("n_heads", "must be positive");
  if (d_model % n_heads != 0) fail("n_heads", "must divide d_model");
  if (vocab_size == 0) fail("vocab_size", "must be positive");
  if (max_seq_len == 0) fail("max_seq_len", "must be positive");
}

std::size_t TokenBatch::length(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < seq; ++t)
    if (!padded(b, t)) ++n;
  return n;
}

const Tensor& ForwardTrace::layer(std::size_t l) const {
  if (l >= hidden_states.size()) {
    throw Error("layer " + std::to_string(l) + " outside trace with " + std::to_string(n_layers()) + " layers");
  }
  return hidden_states[l];
}

namespace {

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

constexpr const char* kCheckpointFormat = "mta-checkpoint";

json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},       {"d_model", c.d_model}, {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
          {"d_ff", c.d_ff},               {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.d_ff = j.value("d_ff", std::size_t{0});
  c.tie_embeddings = j.value("tie_embeddings", false);
  return c;
}

}  // namespace

std::string model_config_to_json_text(const ModelConfig& c) { return config_to_json(c).dump(); }

ModelConfig model_config_from_json_text(const std::string& text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(std::string("model config: ") + e.what());
  }
}

TransformerLM::TransformerLM(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;
  const std::size_t ff = config_.ff_width();
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, config_.n_layers)));

  params_.push_back({"tok_emb", normal_init({config_.vocab_size, d}, 0.02, rng)});
  params_.push_back({"pos_emb", normal_init({config_.max_seq_len, d}, 0.02, rng)});
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    params_.push_back({p + "ln1.gain", Tensor::full({d}, 1.0, true)});
    params_.push_back({p + "ln1.bias", Tensor::zeros({d}, true)});
    params_.push_back({p + "attn.w_qkv", normal_init({d, 3 * d}, 0.02, rng)});
    params_.push_back({p + "attn.b_qkv", Tensor::zeros({3 * d}, true)});
    params_.push_back({p + "attn.w_out", normal_init({d, d}, proj_std, rng)});
    params_.push_back({p + "attn.b_out", Tensor::zeros({d}, true)});
    params_.push_back({p + "ln2.gain", Tensor::full({d}, 1.0, true)});
    params_.push_back({p + "ln2.bias", Tensor::zeros({d}, true)});
    params_.push_back({p + "mlp.w_fc", normal_init({d, ff}, 0.02, rng)});
    params_.push_back({p + "mlp.b_fc", Tensor::zeros({ff}, true)});
    params_.push_back({p + "mlp.w_proj", normal_init({ff, d}, proj_std, rng)});
    params_.push_back({p + "mlp.b_proj", Tensor::zeros({d}, true)});
  }
  params_.push_back({"ln_f.gain", Tensor::full({d}, 1.0, true)});
  params_.push_back({"ln_f.bias", Tensor::zeros({d}, true)});
  if (!config_.tie_embeddings) params_.push_back({"lm_head", normal_init({d, config_.vocab_size}, 0.02, rng)});
  bind();
}

void TransformerLM::bind() {
  std::size_t i = 0;
  tok_emb_ = params_[i++].value;
  pos_emb_ = params_[i++].value;
  blocks_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Block b;
    b.ln1_g = params_[i++].value;
    b.ln1_b = params_[i++].value;
    b.w_qkv = params_[i++].value;
    b.b_qkv = params_[i++].value;
    b.w_o = params_[i++].value;
    b.b_o = params_[i++].value;
    b.ln2_g = params_[i++].value;
    b.ln2_b = params_[i++].value;
    b.w_fc = params_[i++].value;
    b.b_fc = params_[i++].value;
    b.w_proj = params_[i++].value;
    b.b_proj = params_[i++].value;
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = params_[i++].value;
  lnf_b_ = params_[i++].value;
  if (!config_.tie_embeddings) w_head_ = params_[i++].value;
}

Tensor TransformerLM::block_forward(const Block& blk, const Tensor& x, const Mask& causal) const {
  const std::size_t d = config_.d_model;
  const std::size_t hd = d / config_.n_heads;
  const Tensor h = layer_norm(x, blk.ln1_g, blk.ln1_b);
  const Tensor qkv = matmul(h, blk.w_qkv) + blk.b_qkv;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> heads;
  heads.reserve(config_.n_heads);
  for (std::size_t i = 0; i < config_.n_heads; ++i) {
    const Tensor q = slice(qkv, -1, i * hd, hd);
    const Tensor k = slice(qkv, -1, d + i * hd, hd);
    const Tensor v = slice(qkv, -1, 2 * d + i * hd, hd);
    const Tensor att = softmax(scale(matmul(q, transpose(k)), inv_sqrt), causal);
    heads.push_back(matmul(att, v));
  }
  const Tensor merged = heads.size() == 1 ? heads[0] : concat(heads, -1);
  const Tensor x1 = x + (matmul(merged, blk.w_o) + blk.b_o);
  const Tensor h2 = layer_norm(x1, blk.ln2_g, blk.ln2_b);
  const Tensor m = matmul(gelu(matmul(h2, blk.w_fc) + blk.b_fc), blk.w_proj) + blk.b_proj;
  return x1 + m;
}

ForwardTrace TransformerLM::forward(const TokenBatch& batch) const {
  if (batch.seq > config_.max_seq_len) {
    throw Error("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                std::to_string(config_.max_seq_len));
  }
  if (batch.ids.size() != batch.batch * batch.seq) throw ShapeError("token batch ids do not match batch x seq");
  const std::size_t B = batch.batch, T = batch.seq;

  ForwardTrace trace;
  trace.padding = batch.padding;
  Tensor x = embedding(tok_emb_, batch.ids, {B, T}) + slice(pos_emb_, 0, 0, T);
  trace.hidden_states.push_back(x);

  std::vector<std::uint8_t> bits(B * T * T, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = i + 1; j < T; ++j) bits[(b * T + i) * T + j] = 1;
  const Mask causal({B, T, T}, std::move(bits));

  for (const Block& blk : blocks_) {
    x = block_forward(blk, x, causal);
    trace.hidden_states.push_back(x);
  }
  trace.logits = head_logits(x);
  return trace;
}

Tensor TransformerLM::head_logits(const Tensor& hidden) const {
  if (hidden.rank() == 0 || hidden.shape().back() != config_.d_model) {
    throw ShapeError("head: hidden width " + to_string(hidden.shape()) + " does not match d_model " +
                     std::to_string(config_.d_model));
  }
  const Tensor h = layer_norm(hidden, lnf_g_, lnf_b_);
  return matmul(h, config_.tie_embeddings ? transpose(tok_emb_) : w_head_);
}

Tensor TransformerLM::project_to_vocab(const Tensor& hidden) const { return log_softmax(head_logits(hidden)); }

std::vector<Tensor> TransformerLM::parameter_tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::size_t TransformerLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void TransformerLM::set_trainable(bool trainable) {
  for (auto& p : params_) {
    p.value.set_requires_grad(trainable);
    p.value.zero_grad();
  }
}

void TransformerLM::save(const std::filesystem::path& path) const {
  json header;
  header["format"] = kCheckpointFormat;
  header["version"] = 1;
  header["config"] = config_to_json(config_);
  json manifest = json::array();
  for (const auto& p : params_) manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  header["params"] = manifest;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  os << header.dump() << '\n';
  for (const auto& p : params_)
    for (double v : p.value.data()) binio::write_f64(os, v);
  if (!os) throw Error("failed writing checkpoint " + path.string());
}

TransformerLM TransformerLM::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw Error("checkpoint " + path.string() + ": missing header");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw Error("checkpoint " + path.string() + ": bad header: " + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat) throw Error("checkpoint " + path.string() + ": wrong format");

  TransformerLM model(config_from_json(header.at("config")), 0);
  const json& manifest = header.at("params");
  if (manifest.size() != model.params_.size()) {
    throw Error("checkpoint " + path.string() + ": manifest lists " + std::to_string(manifest.size()) +
                " tensors, config implies " + std::to_string(model.params_.size()));
  }
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    auto& p = model.params_[i];
    if (manifest[i].at("name").get<std::string>() != p.name ||
        manifest[i].at("shape").get<Shape>() != p.value.shape()) {
      throw Error("checkpoint " + path.string() + ": manifest entry " + std::to_string(i) + " does not match " +
                  p.name);
    }
    for (double& v : p.value.mutable_data()) v = binio::read_f64(is, p.name.c_str());
  }
  if (is.peek() != std::char_traits<char>::eof()) throw Error("checkpoint " + path.string() + ": trailing bytes");
  return model;
}

}  // namespace mta
