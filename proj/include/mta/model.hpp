#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mta/tensor.hpp"

namespace mta {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 64;
  std::size_t d_ff = 0;  // 0 selects 4 * d_model
  bool tie_embeddings = false;

  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_model; }
  // Throws with the offending field name.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Right-padded token ids. padding[b * seq + t] is set for padded slots.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
  Mask padding;

  bool padded(std::size_t b, std::size_t t) const { return padding[b * seq + t]; }
  std::size_t length(std::size_t b) const;
};

struct ForwardTrace {
  // n_layers + 1 entries of [batch, seq, d_model]; entry 0 is the embedding output.
  std::vector<Tensor> hidden_states;
  Tensor logits;  // [batch, seq, vocab]; empty (rank 0) for traces imported from dumps
  Mask padding;   // [batch, seq]

  std::size_t n_layers() const { return hidden_states.empty() ? 0 : hidden_states.size() - 1; }
  const Tensor& layer(std::size_t l) const;
};

// Compact JSON form used by checkpoint and dump headers.
std::string model_config_to_json_text(const ModelConfig& c);
ModelConfig model_config_from_json_text(const std::string& text);

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Pre-norm decoder-only transformer with learned positional embeddings.
class TransformerLM {
 public:
  TransformerLM(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Causal forward pass. Hidden states stay on the tape when parameters
  // require grad; a frozen model records nothing.
  ForwardTrace forward(const TokenBatch& batch) const;

  // Final layer norm followed by the output projection.
  Tensor head_logits(const Tensor& hidden) const;
  // y = log softmax(head(h)): the vocabulary-space image of any layer's state.
  Tensor project_to_vocab(const Tensor& hidden) const;

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);

  void save(const std::filesystem::path& path) const;
  static TransformerLM load(const std::filesystem::path& path);

 private:
  struct Block {
    Tensor ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };

  TransformerLM() = default;
  void bind();
  Tensor block_forward(const Block& blk, const Tensor& x, const Mask& causal) const;

  ModelConfig config_;
  std::vector<NamedTensor> params_;
  Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_, w_head_;
  std::vector<Block> blocks_;
};

}  // namespace mta
