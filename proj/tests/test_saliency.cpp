#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "mta/saliency.hpp"
#include "test_util.hpp"

using namespace mta;
using mta::testing::random_tensor;
using mta::testing::to_vec;

namespace {

using Rows = std::vector<std::vector<double>>;

Tensor from_rows(const Rows& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return Tensor({1, rows.size(), rows[0].size()}, std::move(v));
}

Mask no_padding(std::size_t batch, std::size_t seq) { return Mask::filled({batch, seq}, false); }

// Independent scalar version: standardize, score, masked softmax, mean over sources.
std::vector<double> oracle_weights(const Rows& h, const std::vector<bool>& pad) {
  const std::size_t n = h.size(), d = h[0].size();
  Rows hat(n, std::vector<double>(d, 0.0));
  for (std::size_t t = 0; t < n; ++t) {
    if (pad[t]) continue;
    double mean = 0.0;
    for (double x : h[t]) mean += x;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double x : h[t]) var += (x - mean) * (x - mean);
    const double sigma = std::sqrt(var / static_cast<double>(d));
    for (std::size_t j = 0; j < d; ++j) hat[t][j] = h[t][j] / sigma;
  }
  std::size_t valid = 0;
  for (bool p : pad) valid += p ? 0 : 1;
  std::vector<double> w(n, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    if (pad[s]) continue;
    std::vector<double> score(n, -INFINITY);
    double mx = -INFINITY;
    for (std::size_t t = 0; t < n; ++t) {
      if (t == s || pad[t]) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += hat[s][j] * hat[t][j];
      score[t] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, score[t]);
    }
    double z = 0.0;
    for (std::size_t t = 0; t < n; ++t)
      if (std::isfinite(score[t])) z += std::exp(score[t] - mx);
    for (std::size_t t = 0; t < n; ++t)
      if (std::isfinite(score[t])) w[t] += std::exp(score[t] - mx) / z / static_cast<double>(valid);
  }
  return w;
}

Rows random_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Rows r(n, std::vector<double>(d));
  for (auto& row : r)
    for (double& x : row) x = dist(rng);
  return r;
}

}  // namespace

TEST(Standardize, TwoPointVector) {
  const Tensor h = standardize(from_rows({{2.0, -2.0}}));
  EXPECT_EQ(to_vec(h), (std::vector<double>{1.0, -1.0}));
}

TEST(Standardize, ConstantTokenRejectedWithPosition) {
  try {
    (void)standardize(from_rows({{1.0, 2.0}, {3.0, 3.0}}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("token (0, 1)"), std::string::npos) << e.what();
  }
}

TEST(Standardize, PaddedConstantTokenIgnored) {
  const Tensor h = standardize(from_rows({{1.0, 2.0}, {3.0, 3.0}}), Mask({1, 2}, {0, 1}));
  EXPECT_EQ(to_vec(h), (std::vector<double>{2.0, 4.0, 0.0, 0.0}));
}

TEST(Standardize, MatchesScalarLoop) {
  std::mt19937_64 rng(3);
  const Rows rows = random_rows(3, 4, rng);
  const Tensor h = standardize(from_rows(rows));
  for (std::size_t t = 0; t < 3; ++t) {
    double mean = 0.0, var = 0.0;
    for (double x : rows[t]) mean += x;
    mean /= 4.0;
    for (double x : rows[t]) var += (x - mean) * (x - mean);
    const double sigma = std::sqrt(var / 4.0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(h[t * 4 + j], rows[t][j] / sigma, 1e-14);
  }
}

TEST(TokenWeights, TwoTokensSplitEvenly) {
  std::mt19937_64 rng(4);
  const Tensor w = token_weights(random_tensor({1, 2, 6}, rng), no_padding(1, 2));
  EXPECT_EQ(to_vec(w), (std::vector<double>{0.5, 0.5}));
}

TEST(TokenWeights, OrthogonalEqualNormRowsAreUniform) {
  const Tensor h = from_rows({{1, -1, 0, 0, 0, 0}, {0, 0, 1, -1, 0, 0}, {0, 0, 0, 0, 1, -1}});
  const Tensor w = token_weights(h, no_padding(1, 3));
  for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(w[t], 1.0 / 3.0, 1e-15);
}

// [[1,0],[0,1],[1,1]] has a constant third row, which standardization
// rejects; the oracle runs on the nearest well-posed variant instead.
TEST(TokenWeights, ConstantRowExampleRejected) {
  EXPECT_THROW((void)token_weights(from_rows({{1, 0}, {0, 1}, {1, 1}}), no_padding(1, 3)), Error);
}

TEST(TokenWeights, ThreeByTwoMatchesScalarOracle) {
  const Rows rows{{1, 0}, {0, 1}, {1, -1}};
  const Tensor w = token_weights(from_rows(rows), no_padding(1, 3));
  const auto expect = oracle_weights(rows, {false, false, false});
  EXPECT_LE(mta::testing::max_abs_diff(to_vec(w), expect), 1e-12);
}

TEST(TokenWeights, RandomInstancesMatchScalarOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + trial % 9, d = 2 + trial % 7;
    const Rows rows = random_rows(n, d, rng);
    std::vector<bool> pad(n, false);
    std::vector<std::uint8_t> bits(n, 0);
    for (std::size_t t = 2; t < n; ++t)
      if (rng() % 4 == 0) pad[t] = true, bits[t] = 1;
    const Tensor w = token_weights(from_rows(rows), Mask({1, n}, bits));
    EXPECT_LE(mta::testing::max_abs_diff(to_vec(w), oracle_weights(rows, pad)), 1e-12) << "trial " << trial;
  }
}

TEST(TokenWeights, RowsSumToOneAndPaddingIsZero) {
  std::mt19937_64 rng(6);
  const std::size_t B = 4, T = 12;
  std::vector<std::uint8_t> bits(B * T, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = T - 3 * b; t < T; ++t) bits[b * T + t] = 1;
  const Mask pad({B, T}, bits);
  const Tensor w = token_weights(random_tensor({B, T, 8}, rng, 3.0), pad);
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      EXPECT_GE(w[b * T + t], 0.0);
      if (pad[b * T + t]) EXPECT_EQ(w[b * T + t], 0.0);
      s += w[b * T + t];
    }
    EXPECT_NEAR(s, 1.0, 1e-10);
  }
}

TEST(TokenWeights, PaddedValuesDoNotMatter) {
  std::mt19937_64 rng(7);
  const Mask pad({1, 6}, {0, 0, 0, 0, 1, 1});
  Tensor a = random_tensor({1, 6, 5}, rng);
  Tensor b = a.clone();
  for (std::size_t i = 4 * 5; i < 6 * 5; ++i) b.mutable_data()[i] = 1e6 * static_cast<double>(i);
  EXPECT_EQ(to_vec(token_weights(a, pad)), to_vec(token_weights(b, pad)));
}

TEST(TokenWeights, TooFewTokensRejected) {
  std::mt19937_64 rng(8);
  EXPECT_THROW((void)token_weights(random_tensor({1, 3, 4}, rng), Mask({1, 3}, {0, 1, 1})), Error);
}

TEST(TokenWeights, PositivePerTokenScaleInvariance) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> c(0.1, 10.0);
  const Tensor h = random_tensor({2, 7, 6}, rng);
  Tensor scaled = h.clone();
  for (std::size_t r = 0; r < 14; ++r) {
    const double k = c(rng);
    for (std::size_t j = 0; j < 6; ++j) scaled.mutable_data()[r * 6 + j] *= k;
  }
  const Mask pad = no_padding(2, 7);
  EXPECT_LE(mta::testing::max_abs_diff(to_vec(token_weights(h, pad)), to_vec(token_weights(scaled, pad))), 1e-10);
}

TEST(TokenWeights, PermutationEquivariance) {
  std::mt19937_64 rng(10);
  const Rows rows = random_rows(6, 5, rng);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Rows permuted(6);
  for (std::size_t i = 0; i < 6; ++i) permuted[i] = rows[perm[i]];
  const Tensor w = token_weights(from_rows(rows), no_padding(1, 6));
  const Tensor wp = token_weights(from_rows(permuted), no_padding(1, 6));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(wp[i], w[perm[i]], 1e-14);
}

TEST(TokenWeights, GradientFlowsFromStudentStates) {
  std::mt19937_64 rng(11);
  Tensor h = random_tensor({1, 4, 3}, rng, 1.0, true);
  const Tensor target({1, 4}, {0.1, 0.2, 0.3, 0.4});
  const Tensor loss = sum(token_weights(h, no_padding(1, 4)) * target);
  backward(loss);
  double norm = 0.0;
  for (double g : h.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}
