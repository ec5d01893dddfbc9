#include <gtest/gtest.h>

#include <fstream>

#include "mta/gradcheck.hpp"
#include "mta/model.hpp"
#include "test_util.hpp"

using namespace mta;
using mta::testing::TempDir;
using mta::testing::to_vec;

namespace {

TokenBatch make_tokens(std::size_t batch, std::size_t seq, std::vector<std::int32_t> ids,
                       std::vector<std::uint8_t> pad = {}) {
  TokenBatch t;
  t.batch = batch;
  t.seq = seq;
  t.ids = std::move(ids);
  if (pad.empty()) pad.assign(batch * seq, 0);
  t.padding = Mask({batch, seq}, std::move(pad));
  return t;
}

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 8;
  return c;
}

const Tensor& param(const TransformerLM& m, const std::string& name) {
  for (const auto& p : m.parameters())
    if (p.name == name) return p.value;
  throw Error("no parameter " + name);
}

// ln_f then lm_head, one row at a time.
std::vector<double> scalar_head(const TransformerLM& m, const double* h) {
  const std::size_t d = m.config().d_model, V = m.config().vocab_size;
  const Tensor& g = param(m, "ln_f.gain");
  const Tensor& b = param(m, "ln_f.bias");
  const Tensor& w = param(m, "lm_head");
  double mu = 0.0;
  for (std::size_t i = 0; i < d; ++i) mu += h[i];
  mu /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) var += (h[i] - mu) * (h[i] - mu);
  var /= static_cast<double>(d);
  std::vector<double> n(d);
  for (std::size_t i = 0; i < d; ++i) n[i] = (h[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
  std::vector<double> logits(V, 0.0);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t i = 0; i < d; ++i) logits[v] += n[i] * w[i * V + v];
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  for (double& x : logits) x = x - mx - std::log(z);
  return logits;
}

}  // namespace

TEST(Model, LogitRowsNormalize) {
  TransformerLM m(small_config(), 5);
  const ForwardTrace tr = m.forward(make_tokens(1, 5, {1, 4, 7, 2, 9}));
  ASSERT_EQ(tr.logits.shape(), (Shape{1, 5, 11}));
  ASSERT_EQ(tr.hidden_states.size(), 3u);
  const Tensor p = softmax(tr.logits);
  for (std::size_t t = 0; t < 5; ++t) {
    double s = 0.0;
    for (std::size_t v = 0; v < 11; ++v) s += p[t * 11 + v];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Model, IdenticalRowsGiveIdenticalTraces) {
  TransformerLM m(small_config(), 6);
  const ForwardTrace tr = m.forward(make_tokens(2, 4, {1, 3, 5, 7, 1, 3, 5, 7}));
  for (const Tensor& h : tr.hidden_states) {
    const std::size_t half = h.numel() / 2;
    for (std::size_t i = 0; i < half; ++i) EXPECT_EQ(h[i], h[half + i]);
  }
}

TEST(Model, ZeroLayerModelIsEmbeddingThenHead) {
  ModelConfig c = small_config();
  c.n_layers = 0;
  TransformerLM m(c, 7);
  const std::vector<std::int32_t> ids{3, 0, 10};
  const ForwardTrace tr = m.forward(make_tokens(1, 3, ids));
  ASSERT_EQ(tr.hidden_states.size(), 1u);
  const Tensor& tok = param(m, "tok_emb");
  const Tensor& pos = param(m, "pos_emb");
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < 8; ++i)
      EXPECT_EQ(tr.hidden_states[0][t * 8 + i], tok[static_cast<std::size_t>(ids[t]) * 8 + i] + pos[t * 8 + i]);
  EXPECT_EQ(to_vec(tr.logits), to_vec(m.head_logits(tr.hidden_states[0])));
}

TEST(Model, RejectsSequenceLongerThanContext) {
  TransformerLM m(small_config(), 1);
  EXPECT_THROW((void)m.forward(make_tokens(1, 9, std::vector<std::int32_t>(9, 1))), Error);
}

TEST(Model, CausalityFutureTokensDoNotLeak) {
  TransformerLM m(small_config(), 8);
  const ForwardTrace a = m.forward(make_tokens(1, 5, {1, 2, 3, 4, 5}));
  const ForwardTrace b = m.forward(make_tokens(1, 5, {1, 2, 3, 9, 0}));
  for (std::size_t l = 0; l < a.hidden_states.size(); ++l)
    for (std::size_t i = 0; i < 3 * 8; ++i) EXPECT_EQ(a.hidden_states[l][i], b.hidden_states[l][i]);
  EXPECT_NE(a.hidden_states[2][3 * 8], b.hidden_states[2][3 * 8]);
}

TEST(Model, PaddedSlotsDoNotAffectRealTokens) {
  TransformerLM m(small_config(), 9);
  const std::vector<std::uint8_t> pad{0, 0, 0, 1, 1};
  const ForwardTrace a = m.forward(make_tokens(1, 5, {1, 2, 3, 0, 0}, pad));
  const ForwardTrace b = m.forward(make_tokens(1, 5, {1, 2, 3, 7, 10}, pad));
  for (std::size_t l = 0; l < a.hidden_states.size(); ++l)
    for (std::size_t i = 0; i < 3 * 8; ++i) EXPECT_EQ(a.hidden_states[l][i], b.hidden_states[l][i]);
}

TEST(Model, FinalLayerProjectionIsLogSoftmaxOfLogits) {
  TransformerLM m(small_config(), 10);
  const ForwardTrace tr = m.forward(make_tokens(1, 4, {1, 5, 6, 2}));
  const Tensor y = m.project_to_vocab(tr.layer(2));
  EXPECT_LT(mta::testing::max_abs_diff(to_vec(y), to_vec(log_softmax(tr.logits))), 1e-14);
}

TEST(Model, AdjacentLayerDeltaMatchesScalarLoop) {
  TransformerLM m(small_config(), 11);
  NoGradScope frozen;
  const ForwardTrace tr = m.forward(make_tokens(1, 4, {1, 5, 6, 2}));
  const Tensor dy = m.project_to_vocab(tr.layer(2)) - m.project_to_vocab(tr.layer(1));
  for (std::size_t t = 0; t < 4; ++t) {
    const auto y2 = scalar_head(m, tr.layer(2).data().data() + t * 8);
    const auto y1 = scalar_head(m, tr.layer(1).data().data() + t * 8);
    for (std::size_t v = 0; v < 11; ++v) EXPECT_NEAR(dy[t * 11 + v], y2[v] - y1[v], 1e-12);
  }
}

TEST(Model, SameSeedSameParameters) {
  const TransformerLM a(small_config(), 42), b(small_config(), 42), c(small_config(), 43);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(to_vec(a.parameters()[i].value), to_vec(b.parameters()[i].value));
    if (to_vec(a.parameters()[i].value) != to_vec(c.parameters()[i].value)) differs = true;
  }
  EXPECT_TRUE(differs);
}

TEST(Model, ConfigValidationNamesField) {
  ModelConfig c = small_config();
  c.n_heads = 3;
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()).rfind("n_heads", 0), 0u) << e.what();
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir("ckpt");
  const TransformerLM m(small_config(), 12);
  m.save(dir / "m.ckpt");
  const TransformerLM back = TransformerLM::load(dir / "m.ckpt");
  EXPECT_TRUE(back.config() == m.config());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(back.parameters()[i].name, m.parameters()[i].name);
    EXPECT_EQ(to_vec(back.parameters()[i].value), to_vec(m.parameters()[i].value));
  }
}

TEST(Checkpoint, TruncationAndTrailingBytesRejected) {
  TempDir dir("ckpt-bad");
  const TransformerLM m(small_config(), 13);
  m.save(dir / "m.ckpt");
  const auto size = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::copy_file(dir / "m.ckpt", dir / "short.ckpt");
  std::filesystem::resize_file(dir / "short.ckpt", size - 1);
  try {
    (void)TransformerLM::load(dir / "short.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
  }
  std::filesystem::copy_file(dir / "m.ckpt", dir / "long.ckpt");
  std::ofstream(dir / "long.ckpt", std::ios::app | std::ios::binary) << 'x';
  EXPECT_THROW((void)TransformerLM::load(dir / "long.ckpt"), Error);
}

TEST(Model, ParameterGradientsMatchFiniteDifferences) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 2;
  c.vocab_size = 5;
  c.max_seq_len = 4;
  TransformerLM m(c, 14);
  const TokenBatch tokens = make_tokens(2, 3, {1, 2, 3, 4, 0, 0}, {0, 0, 0, 0, 0, 1});
  const std::vector<std::int32_t> targets{2, 3, 4, 0, 0, 0};
  const std::vector<double> weights{1, 1, 0, 1, 0, 0};
  // Scale parameters up so the check sees non-trivial curvature.
  for (auto& p : m.parameters())
    for (double& v : p.value.mutable_data()) v *= 20.0;
  const auto f = [&] { return cross_entropy(m.forward(tokens).logits, targets, weights); };
  const GradCheckResult r = finite_diff_check(f, m.parameter_tensors(), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6) << "worst param " << m.parameters()[r.worst_param].name;
}
