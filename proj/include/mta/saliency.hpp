#pragma once

#include "mta/tensor.hpp"

namespace mta {

enum class SourceModel { teacher, student };

struct TokenWeights {
  Tensor weights;  // [batch, seq]; zero at padded positions
  std::size_t source_layer = 0;
  SourceModel source_model = SourceModel::teacher;
};

// Divides each token vector by its population standard deviation along the
// feature axis. Rows marked in `padding` ([batch, seq]) are zeroed instead of
// checked. Throws when a non-padded token has sigma <= 1e-12.
Tensor standardize(const Tensor& hidden, const Mask& padding);
Tensor standardize(const Tensor& hidden);

// Bidirectional token importance from standardized pairwise attention:
//   S = H^ H^T / sqrt(d), diagonal and padded destinations masked,
//   alpha = row softmax over destinations,
//   w_t = mean of alpha[s -> t] over non-padded sources s.
// Each row needs at least two non-padded tokens.
Tensor token_weights(const Tensor& hidden, const Mask& padding);

TokenWeights token_weights(const Tensor& hidden, const Mask& padding, std::size_t layer, SourceModel source);

}  // namespace mta
