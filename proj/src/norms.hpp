#pragma once

#include "tensor.hpp"

namespace qknorm {

inline constexpr double kL2Eps = 1e-6;
inline constexpr double kLayerNormEps = 1e-5;

/// x / (||x|| + eps) along `axis`. The zero vector maps to zero.
Tensor l2_normalize(const Tensor& x, int axis = -1, double eps = kL2Eps);

/// Re-centering and re-scaling over the trailing dimension.
struct LayerNormParams {
  Tensor gain;  // [d], starts at 1
  Tensor bias;  // [d], starts at 0
  double eps = kLayerNormEps;

  static LayerNormParams init(std::size_t d);
};

/// (x - mean) / sqrt(var + eps) * gain + bias per trailing slice, using the
/// population variance.
Tensor layer_norm(const Tensor& x, const LayerNormParams& params);

/// g * x / (||x|| + eps) per trailing slice with a single learnable g.
struct ScaleNormParams {
  Tensor g_scale;  // one element, starts at 1/sqrt(d)
  double eps = kL2Eps;

  static ScaleNormParams init(std::size_t d);
};

Tensor scale_norm(const Tensor& x, const ScaleNormParams& params);

/// Unit-length rows for an embedding table [V, d].
Tensor fix_norm_apply(const Tensor& embedding_table);

}  // namespace qknorm
