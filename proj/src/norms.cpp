#include "norms.hpp"

#include <cmath>

#include "error.hpp"
#include "ops.hpp"

namespace qknorm {

Tensor l2_normalize(const Tensor& x, int axis, double eps) {
  require(eps > 0.0, "l2_normalize: eps must be positive");
  const int r = static_cast<int>(x.rank());
  const int a = axis < 0 ? axis + r : axis;
  require(a >= 0 && a < r, "l2_normalize: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= x.shape()[i];
  for (int i = a + 1; i < r; ++i) inner *= x.shape()[i];
  const std::size_t len = x.shape()[a];

  auto in = x.data();
  std::vector<double> out(in.size());
  std::vector<double> norms(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double sq = 0.0;
      for (std::size_t j = 0; j < len; ++j) sq += in[base + j * inner] * in[base + j * inner];
      const double norm = std::sqrt(sq);
      norms[o * inner + i] = norm;
      const double denom = norm + eps;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = in[base + j * inner] / denom;
    }
  }
  return make_result(
      x.shape(), std::move(out), "l2_normalize", {x},
      [norms = std::move(norms), outer, inner, len, eps](detail::Node& self) {
        detail::Node& src = *self.inputs[0];
        auto& gx = src.grad_buffer();
        // y = x / (n + eps);  dx = dy / (n + eps) - x (x . dy) / (n (n + eps)^2)
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            const double norm = norms[o * inner + i];
            const double denom = norm + eps;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
              dot += src.data[base + j * inner] * self.grad[base + j * inner];
            }
            const double radial = norm > 0.0 ? dot / (norm * denom * denom) : 0.0;
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t p = base + j * inner;
              gx[p] += self.grad[p] / denom - src.data[p] * radial;
            }
          }
        }
      });
}

LayerNormParams LayerNormParams::init(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true), kLayerNormEps};
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& params) {
  const std::size_t d = x.dim(-1);
  if (params.gain.numel() != d || params.bias.numel() != d) {
    fail(ErrorCode::kShapeMismatch, "layer_norm: params sized for " +
                                        std::to_string(params.gain.numel()) +
                                        " but input is " + shape_str(x.shape()));
  }
  require(params.eps > 0.0, "layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  auto in = x.data();
  auto gain = params.gain.data();
  auto bias = params.bias.data();
  std::vector<double> out(in.size());
  std::vector<double> xhat(in.size());
  std::vector<double> rstd(rows);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu *= inv_d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var *= inv_d;
    const double rs = 1.0 / std::sqrt(var + params.eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x, params.gain, params.bias},
      [xhat = std::move(xhat), rstd = std::move(rstd), rows, d, inv_d](detail::Node& self) {
        detail::Node& src = *self.inputs[0];
        detail::Node& gain = *self.inputs[1];
        detail::Node& bias = *self.inputs[2];
        const auto& gy = self.grad;
        if (gain.requires_grad) {
          auto& gg = gain.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += gy[r * d + j] * xhat[r * d + j];
        }
        if (bias.requires_grad) {
          auto& gb = bias.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += gy[r * d + j];
        }
        if (src.requires_grad) {
          auto& gx = src.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = gy[r * d + j] * gain.data[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = gy[r * d + j] * gain.data[j];
              gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

ScaleNormParams ScaleNormParams::init(std::size_t d) {
  return {Tensor::scalar(1.0 / std::sqrt(static_cast<double>(d)), true), kL2Eps};
}

Tensor scale_norm(const Tensor& x, const ScaleNormParams& params) {
  return mul_scalar(l2_normalize(x, -1, params.eps), params.g_scale);
}

Tensor fix_norm_apply(const Tensor& embedding_table) {
  require(embedding_table.rank() == 2, "fix_norm_apply: table must be [V, d]");
  return l2_normalize(embedding_table, -1, kL2Eps);
}

}  // namespace qknorm
