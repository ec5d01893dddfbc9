#include "mta/saliency.hpp"

#include <cmath>

namespace mta {

namespace {

constexpr double kMinSigma = 1e-12;

void check_hidden(const Tensor& hidden, const Mask& padding) {
  if (hidden.rank() != 3) throw ShapeError("saliency: hidden states must be [batch, seq, d], got " + to_string(hidden.shape()));
  const Shape want{hidden.dim(0), hidden.dim(1)};
  if (padding.shape != want) {
    throw ShapeError("saliency: padding mask " + to_string(padding.shape) + " vs hidden " + to_string(hidden.shape()));
  }
}

}  // namespace

Tensor standardize(const Tensor& hidden) {
  if (hidden.rank() != 3) throw ShapeError("standardize: expected [batch, seq, d], got " + to_string(hidden.shape()));
  return standardize(hidden, Mask::filled({hidden.dim(0), hidden.dim(1)}, false));
}

Tensor standardize(const Tensor& hidden, const Mask& padding) {
  check_hidden(hidden, padding);
  const std::size_t B = hidden.dim(0), T = hidden.dim(1), d = hidden.dim(2);
  Tensor sigma = std_dev(hidden, true);  // [B, T, 1]
  const auto sd = sigma.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      if (padding[b * T + t]) continue;
      if (!(sd[b * T + t] > kMinSigma)) {
        throw Error("standardize: token (" + std::to_string(b) + ", " + std::to_string(t) +
                    ") has standard deviation " + std::to_string(sd[b * T + t]) + " <= 1e-12");
      }
    }
  }
  const Mask pad_rows({B, T, 1}, padding.bits);
  sigma = masked_fill(sigma, pad_rows, 1.0);
  const Tensor scaled = hidden / sigma;
  std::vector<std::uint8_t> bits(B * T * d);
  for (std::size_t r = 0; r < B * T; ++r)
    for (std::size_t j = 0; j < d; ++j) bits[r * d + j] = padding.bits[r];
  return masked_fill(scaled, Mask({B, T, d}, std::move(bits)), 0.0);
}

Tensor token_weights(const Tensor& hidden, const Mask& padding) {
  check_hidden(hidden, padding);
  const std::size_t B = hidden.dim(0), T = hidden.dim(1), d = hidden.dim(2);
  std::vector<double> inv_count(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t valid = 0;
    for (std::size_t t = 0; t < T; ++t) valid += padding[b * T + t] ? 0 : 1;
    if (valid < 2) {
      throw Error("token_weights: row " + std::to_string(b) + " has " + std::to_string(valid) +
                  " non-padded tokens, need at least 2");
    }
    inv_count[b] = 1.0 / static_cast<double>(valid);
  }

  const Tensor hat = standardize(hidden, padding);
  const Tensor scores = scale(matmul(hat, transpose(hat)), 1.0 / std::sqrt(static_cast<double>(d)));

  // Destination t is excluded for source s when s == t or t is padding.
  std::vector<std::uint8_t> excluded(B * T * T, 0);
  std::vector<double> source_scale(B * T, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t s = 0; s < T; ++s) {
      source_scale[b * T + s] = padding[b * T + s] ? 0.0 : inv_count[b];
      for (std::size_t t = 0; t < T; ++t) {
        excluded[(b * T + s) * T + t] = (s == t || padding[b * T + t]) ? 1 : 0;
      }
    }
  }
  const Tensor alpha = softmax(scores, Mask({B, T, T}, std::move(excluded)));
  const Tensor per_source = alpha * Tensor({B, T, 1}, std::move(source_scale));
  return sum(per_source, 1);
}

TokenWeights token_weights(const Tensor& hidden, const Mask& padding, std::size_t layer, SourceModel source) {
  return TokenWeights{token_weights(hidden, padding), layer, source};
}

}  // namespace mta
