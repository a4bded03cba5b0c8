#pragma once

#include <span>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace qknorm {

// Broadcasting is limited to leading dimensions: a binary op accepts a second
// operand whose shape equals the first or is a trailing suffix of it.

/// [..., m, k] x [..., k, n] -> [..., m, n]. `b` either carries the same batch
/// extents as `a` or is rank 2 and shared across the batch. With transpose_b,
/// `b` is laid out [..., n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// `s` is a one-element tensor; the product is differentiable in both.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
// x is [..., h, n_q, n_k]; g holds either one value or one value per head.
Tensor scale_heads(const Tensor& x, const Tensor& g);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& a);

/// Max-subtracted softmax along `axis`. Rejects NaN input.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);

/// Row lookup: table [V, d], ids in [0, V) -> [ids.size(), d].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

/// Inverted dropout. Identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// Boolean visibility over [batches, n_q, n_k]; batches is 1 or the leading
/// batch extent of the scores it is applied to.
struct AttentionMask {
  std::size_t batches = 1;
  std::size_t n_q = 0;
  std::size_t n_k = 0;
  std::vector<unsigned char> keep;

  bool visible(std::size_t b, std::size_t q, std::size_t k) const {
    return keep[(b * n_q + q) * n_k + k] != 0;
  }

  static AttentionMask all(std::size_t n_q, std::size_t n_k);
  static AttentionMask causal(std::size_t n);
};

inline constexpr double kMaskValue = -1e9;

/// Scores [..., n_q, n_k] with masked entries replaced by kMaskValue.
Tensor apply_mask(const Tensor& scores, const AttentionMask& mask);

/// Mean token cross-entropy over rows whose target != ignore_index.
/// logits [N, V]; optional uniform label smoothing.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     int ignore_index, double label_smoothing = 0.0);

}  // namespace qknorm
