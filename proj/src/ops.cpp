#include "ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "error.hpp"

namespace qknorm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  const int a = axis < 0 ? axis + r : axis;
  require(a >= 0 && a < r, "axis " + std::to_string(axis) + " out of range for " +
                               shape_str(shape));
  AxisSplit s;
  for (int i = 0; i < a; ++i) s.outer *= shape[i];
  s.len = shape[a];
  for (int i = a + 1; i < r; ++i) s.inner *= shape[i];
  return s;
}

// Returns how many times `b` repeats inside `a` under suffix broadcasting.
std::size_t broadcast_repeats(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size() &&
            std::equal(b.rbegin(), b.rend(), a.rbegin());
  if (!ok) {
    fail(ErrorCode::kShapeMismatch, std::string(op) + ": cannot broadcast " +
                                        shape_str(b) + " onto " + shape_str(a));
  }
  return shape_numel(a) / shape_numel(b);
}

bool needs_grad(const detail::Node& n) { return n.requires_grad; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    fail(ErrorCode::kShapeMismatch, "matmul: incompatible shapes " + shape_str(sa) +
                                        " and " + shape_str(sb) +
                                        (transpose_b ? " (b transposed)" : ""));
  };
  if (sa.size() < 2 || sb.size() < 2) mismatch();
  const bool shared_b = sb.size() == 2;
  if (!shared_b && (sb.size() != sa.size() ||
                    !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) {
    mismatch();
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (k != kb) mismatch();

  std::size_t batches = shape_numel(sa) / (m * k);
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);

  // A shared right operand lets the whole batch collapse into one product.
  std::size_t rows = m;
  if (shared_b) {
    rows = m * batches;
    batches = 1;
  }
  const std::size_t b_stride = shared_b ? 0 : k * n;

  std::vector<double> out(rows * batches * n);
  for (std::size_t i = 0; i < batches; ++i) {
    ConstMap A(a.data().data() + i * rows * k, rows, k);
    MutMap C(out.data() + i * rows * n, rows, n);
    if (transpose_b) {
      ConstMap B(b.data().data() + i * b_stride, n, k);
      C.noalias() = A * B.transpose();
    } else {
      ConstMap B(b.data().data() + i * b_stride, k, n);
      C.noalias() = A * B;
    }
  }

  return make_result(
      std::move(out_shape), std::move(out), "matmul", {a, b},
      [=](detail::Node& self) {
        detail::Node& na = *self.inputs[0];
        detail::Node& nb = *self.inputs[1];
        for (std::size_t i = 0; i < batches; ++i) {
          ConstMap dC(self.grad.data() + i * rows * n, rows, n);
          if (needs_grad(na)) {
            MutMap dA(na.grad_buffer().data() + i * rows * k, rows, k);
            if (transpose_b) {
              ConstMap B(nb.data.data() + i * b_stride, n, k);
              dA.noalias() += dC * B;
            } else {
              ConstMap B(nb.data.data() + i * b_stride, k, n);
              dA.noalias() += dC * B.transpose();
            }
          }
          if (needs_grad(nb)) {
            ConstMap A(na.data.data() + i * rows * k, rows, k);
            if (transpose_b) {
              MutMap dB(nb.grad_buffer().data() + i * b_stride, n, k);
              dB.noalias() += dC.transpose() * A;
            } else {
              MutMap dB(nb.grad_buffer().data() + i * b_stride, k, n);
              dB.noalias() += A.transpose() * dC;
            }
          }
        }
      });
}

namespace {

enum class Binary { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  const std::size_t reps = broadcast_repeats(a.shape(), b.shape(), name);
  const std::size_t nb = b.numel();
  std::vector<double> out(a.numel());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t r = 0; r < reps; ++r) {
    const double* pa = da.data() + r * nb;
    double* po = out.data() + r * nb;
    switch (kind) {
      case Binary::kAdd:
        for (std::size_t j = 0; j < nb; ++j) po[j] = pa[j] + db[j];
        break;
      case Binary::kSub:
        for (std::size_t j = 0; j < nb; ++j) po[j] = pa[j] - db[j];
        break;
      case Binary::kMul:
        for (std::size_t j = 0; j < nb; ++j) po[j] = pa[j] * db[j];
        break;
    }
  }
  return make_result(a.shape(), std::move(out), name, {a, b},
                     [reps, nb, kind](detail::Node& self) {
                       detail::Node& x = *self.inputs[0];
                       detail::Node& y = *self.inputs[1];
                       const double* g = self.grad.data();
                       if (needs_grad(x)) {
                         auto& gx = x.grad_buffer();
                         for (std::size_t r = 0; r < reps; ++r) {
                           for (std::size_t j = 0; j < nb; ++j) {
                             const double gr = g[r * nb + j];
                             gx[r * nb + j] += kind == Binary::kMul ? gr * y.data[j] : gr;
                           }
                         }
                       }
                       if (needs_grad(y)) {
                         auto& gy = y.grad_buffer();
                         for (std::size_t r = 0; r < reps; ++r) {
                           for (std::size_t j = 0; j < nb; ++j) {
                             const double gr = g[r * nb + j];
                             switch (kind) {
                               case Binary::kAdd: gy[j] += gr; break;
                               case Binary::kSub: gy[j] -= gr; break;
                               case Binary::kMul: gy[j] += gr * x.data[r * nb + j]; break;
                             }
                           }
                         }
                       }
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), "scale", {a},
                     [factor](detail::Node& self) {
                       auto& gx = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * self.grad[i];
                     });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) {
    fail(ErrorCode::kShapeMismatch,
         "mul_scalar: expected a one-element scale, got " + shape_str(s.shape()));
  }
  const double c = s.item();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= c;
  return make_result(a.shape(), std::move(out), "mul_scalar", {a, s},
                     [](detail::Node& self) {
                       detail::Node& x = *self.inputs[0];
                       detail::Node& sc = *self.inputs[1];
                       if (needs_grad(x)) {
                         auto& gx = x.grad_buffer();
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += sc.data[0] * self.grad[i];
                       }
                       if (needs_grad(sc)) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < x.data.size(); ++i) acc += x.data[i] * self.grad[i];
                         sc.grad_buffer()[0] += acc;
                       }
                     });
}

Tensor scale_heads(const Tensor& x, const Tensor& g) {
  if (g.numel() == 1) return mul_scalar(x, g);
  require(x.rank() >= 3, "scale_heads: scores must be [..., h, n_q, n_k]");
  const std::size_t heads = x.dim(-3);
  if (g.numel() != heads) {
    fail(ErrorCode::kShapeMismatch, "scale_heads: " + std::to_string(g.numel()) +
                                        " scales for " + std::to_string(heads) + " heads");
  }
  const std::size_t block = x.dim(-1) * x.dim(-2);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= g.at((i / block) % heads);
  return make_result(x.shape(), std::move(out), "scale_heads", {x, g},
                     [block, heads](detail::Node& self) {
                       detail::Node& xs = *self.inputs[0];
                       detail::Node& gs = *self.inputs[1];
                       if (needs_grad(xs)) {
                         auto& gx = xs.grad_buffer();
                         for (std::size_t i = 0; i < gx.size(); ++i) {
                           gx[i] += gs.data[(i / block) % heads] * self.grad[i];
                         }
                       }
                       if (needs_grad(gs)) {
                         auto& gg = gs.grad_buffer();
                         for (std::size_t i = 0; i < xs.data.size(); ++i) {
                           gg[(i / block) % heads] += xs.data[i] * self.grad[i];
                         }
                       }
                     });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result({1}, {acc}, "sum", {a}, [](detail::Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (double& v : gx) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), "relu", {a}, [](detail::Node& self) {
    detail::Node& x = *self.inputs[0];
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (x.data[i] > 0.0) gx[i] += self.grad[i];
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) {
        const double v = in[base + j * s.inner];
        if (std::isnan(v)) fail(ErrorCode::kDiverged, "softmax: NaN input");
        hi = std::max(hi, v);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(in[base + j * s.inner] - hi);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= total;
    }
  }
  return make_result(x.shape(), std::move(out), "softmax", {x}, [s](detail::Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t p = base + j * s.inner;
          dot += gy[p] * y[p];
        }
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t p = base + j * s.inner;
          gx[p] += y[p] * (gy[p] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) {
        const double v = in[base + j * s.inner];
        if (std::isnan(v)) fail(ErrorCode::kDiverged, "log_softmax: NaN input");
        hi = std::max(hi, v);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) total += std::exp(in[base + j * s.inner] - hi);
      const double lse = hi + std::log(total);
      for (std::size_t j = 0; j < s.len; ++j) {
        out[base + j * s.inner] = in[base + j * s.inner] - lse;
      }
    }
  }
  return make_result(x.shape(), std::move(out), "log_softmax", {x}, [s](detail::Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double total = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) total += gy[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t p = base + j * s.inner;
          gx[p] += gy[p] - std::exp(y[p]) * total;
        }
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorCode::kShapeMismatch,
         "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x},
                     [](detail::Node& self) {
                       auto& gx = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& in_shape = x.shape();
  const std::size_t r = in_shape.size();
  std::vector<bool> seen(r, false);
  bool valid = order.size() == r;
  for (std::size_t i = 0; valid && i < r; ++i) {
    valid = order[i] < r && !seen[order[i]];
    if (valid) seen[order[i]] = true;
  }
  require(valid, "permute: invalid axis order for " + shape_str(in_shape));

  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[order[i]];
    src_stride[i] = in_strides[order[i]];
  }

  // gather[i] = flat input offset of output element i
  std::vector<std::size_t> gather(x.numel());
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < gather.size(); ++i) {
    gather[i] = offset;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        offset += src_stride[d];
        break;
      }
      offset -= src_stride[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  std::vector<double> out(gather.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[gather[i]];
  return make_result(std::move(out_shape), std::move(out), "permute", {x},
                     [gather = std::move(gather)](detail::Node& self) {
                       auto& gx = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < gather.size(); ++i) gx[gather[i]] += self.grad[i];
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require(table.rank() == 2, "gather_rows: table must be [V, d]");
  require(!ids.empty(), "gather_rows: no ids");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      fail(ErrorCode::kInvalidArgument, "token id " + std::to_string(ids[i]) +
                                            " outside vocabulary of size " +
                                            std::to_string(vocab));
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> rows(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), "gather_rows", {table},
                     [rows = std::move(rows), d](detail::Node& self) {
                       auto& gt = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         double* dst = gt.data() + static_cast<std::size_t>(rows[i]) * d;
                         const double* g = self.grad.data() + i * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                       }
                     });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "dropout rate must be in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result(x.shape(), std::move(out), "dropout", {x},
                     [mask = std::move(mask)](detail::Node& self) {
                       auto& gx = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += mask[i] * self.grad[i];
                     });
}

AttentionMask AttentionMask::all(std::size_t n_q, std::size_t n_k) {
  return {1, n_q, n_k, std::vector<unsigned char>(n_q * n_k, 1)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m{1, n, n, std::vector<unsigned char>(n * n, 0)};
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t k = 0; k <= q; ++k) m.keep[q * n + k] = 1;
  }
  return m;
}

Tensor apply_mask(const Tensor& scores, const AttentionMask& mask) {
  require(scores.rank() >= 2, "apply_mask: scores must be at least 2-D");
  const std::size_t n_q = scores.dim(-2);
  const std::size_t n_k = scores.dim(-1);
  const std::size_t slices = scores.numel() / (n_q * n_k);
  if (mask.n_q != n_q || mask.n_k != n_k || mask.batches == 0 ||
      slices % mask.batches != 0 ||
      mask.keep.size() != mask.batches * n_q * n_k) {
    fail(ErrorCode::kShapeMismatch,
         "attention mask [" + std::to_string(mask.batches) + ", " +
             std::to_string(mask.n_q) + ", " + std::to_string(mask.n_k) +
             "] does not fit scores " + shape_str(scores.shape()));
  }
  const std::size_t per_batch = slices / mask.batches;
  std::vector<unsigned char> hidden(scores.numel());
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t s = 0; s < slices; ++s) {
    const unsigned char* keep = mask.keep.data() + (s / per_batch) * n_q * n_k;
    for (std::size_t j = 0; j < n_q * n_k; ++j) {
      if (!keep[j]) {
        out[s * n_q * n_k + j] = kMaskValue;
        hidden[s * n_q * n_k + j] = 1;
      }
    }
  }
  return make_result(scores.shape(), std::move(out), "apply_mask", {scores},
                     [hidden = std::move(hidden)](detail::Node& self) {
                       auto& gx = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < gx.size(); ++i) {
                         if (!hidden[i]) gx[i] += self.grad[i];
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     int ignore_index, double label_smoothing) {
  require(logits.rank() == 2, "cross_entropy: logits must be [N, V]");
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  if (targets.size() != rows) {
    fail(ErrorCode::kShapeMismatch, "cross_entropy: " + std::to_string(targets.size()) +
                                        " targets for " + std::to_string(rows) + " rows");
  }
  require(label_smoothing >= 0.0 && label_smoothing < 1.0,
          "label smoothing must be in [0, 1)");
  auto in = logits.data();
  std::vector<double> probs(in.size());
  std::size_t counted = 0;
  double total = 0.0;
  const double off = label_smoothing / static_cast<double>(vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * vocab;
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) {
      if (std::isnan(row[j])) fail(ErrorCode::kDiverged, "cross_entropy: NaN logit");
      hi = std::max(hi, row[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - hi);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    if (targets[r] == ignore_index) continue;
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < vocab,
            "cross_entropy: target id out of range");
    const double lse = hi + std::log(z);
    double loss = (1.0 - label_smoothing) * (lse - row[targets[r]]);
    if (label_smoothing > 0.0) {
      double all = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) all += lse - row[j];
      loss += off * all;
    }
    total += loss;
    ++counted;
  }
  const double denom = counted ? static_cast<double>(counted) : 1.0;
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result(
      {1}, {total / denom}, "cross_entropy", {logits},
      [probs = std::move(probs), tgt = std::move(tgt), vocab, ignore_index,
       label_smoothing, off, denom](detail::Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        const double g = self.grad[0] / denom;
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          if (tgt[r] == ignore_index) continue;
          for (std::size_t j = 0; j < vocab; ++j) {
            double target_mass = off;
            if (static_cast<int>(j) == tgt[r]) target_mass += 1.0 - label_smoothing;
            gx[r * vocab + j] += g * (probs[r * vocab + j] - target_mass);
          }
        }
      });
}

}  // namespace qknorm
