#include "attention.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"
#include "norms.hpp"

namespace qknorm {

int sequence_length_percentile(std::span<const int> lengths, double p) {
  require(!lengths.empty(), "sequence_length_percentile: empty length list");
  require(p > 0.0 && p <= 100.0, "sequence_length_percentile: p must be in (0, 100]");
  std::vector<int> sorted(lengths.begin(), lengths.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  // p * n first keeps integral products exact, e.g. 7 * 100 / 100.
  auto rank = static_cast<std::size_t>(std::ceil(p * n / 100.0 - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

double g0_init(int length) {
  if (length < 2) {
    fail(ErrorCode::kInvalidArgument,
         "g0_init: L = " + std::to_string(length) +
             " gives L^2 - L <= 0, so log2(L^2 - L) is undefined; need L >= 2");
  }
  const double l = static_cast<double>(length);
  return std::log2(l * l - l);
}

LengthStats LengthStats::compute(std::vector<int> lengths, double percentile) {
  LengthStats stats;
  stats.L = sequence_length_percentile(lengths, percentile);
  stats.lengths = std::move(lengths);
  stats.percentile = percentile;
  stats.g0 = stats.L >= 2 ? g0_init(stats.L) : 0.0;
  return stats;
}

AttentionMode AttentionMode::scaled_dot() { return {}; }

AttentionMode AttentionMode::qknorm(double g_init, bool learnable, std::size_t per_head) {
  require(std::isfinite(g_init), "qknorm: g must be finite");
  AttentionMode mode;
  mode.kind = AttentionKind::kQKNorm;
  mode.g = Tensor::full({per_head > 0 ? per_head : 1}, g_init, learnable);
  return mode;
}

namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
  const bool ok = q.rank() >= 2 && k.rank() == q.rank() && v.rank() == q.rank() &&
                  q.dim(-1) == k.dim(-1) && k.dim(-2) == v.dim(-2) &&
                  std::equal(q.shape().begin(), q.shape().end() - 2, k.shape().begin()) &&
                  std::equal(q.shape().begin(), q.shape().end() - 2, v.shape().begin());
  if (!ok) {
    fail(ErrorCode::kShapeMismatch, "attention: incompatible Q " + shape_str(q.shape()) +
                                        ", K " + shape_str(k.shape()) + ", V " +
                                        shape_str(v.shape()));
  }
}

AttentionResult finish(Tensor scores, const Tensor& v, const AttentionMask* mask) {
  if (mask) scores = apply_mask(scores, *mask);
  Tensor weights = softmax(scores, -1);
  return {matmul(weights, v), weights};
}

}  // namespace

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const AttentionMask* mask) {
  check_qkv(q, k, v);
  const double d_head = static_cast<double>(q.dim(-1));
  Tensor scores = scale(matmul(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(d_head));
  return finish(std::move(scores), v, mask);
}

AttentionResult qknorm_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const Tensor& g, const AttentionMask* mask,
                                 bool normalize_v) {
  check_qkv(q, k, v);
  require(g.defined(), "qknorm_attention: missing g");
  for (double x : g.data()) require(std::isfinite(x), "qknorm_attention: g must be finite");
  Tensor cosines = matmul(l2_normalize(q, -1, kQKNormEps), l2_normalize(k, -1, kQKNormEps),
                          /*transpose_b=*/true);
  Tensor scores = scale_heads(cosines, g);
  return finish(std::move(scores), normalize_v ? l2_normalize(v, -1, kQKNormEps) : v, mask);
}

AttentionResult attend(const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttentionMode& mode, const AttentionMask* mask) {
  if (mode.kind == AttentionKind::kQKNorm) {
    return qknorm_attention(q, k, v, mode.g, mask, mode.normalize_v);
  }
  return scaled_dot_attention(q, k, v, mask);
}

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (double& x : w) x = rng.uniform(-bound, bound);
  return Tensor::from({fan_in, fan_out}, std::move(w), true);
}

}  // namespace

AttentionParams AttentionParams::init(std::size_t d_model, std::size_t num_heads,
                                      Rng& rng) {
  require(num_heads > 0 && d_model % num_heads == 0,
          "attention: d_model " + std::to_string(d_model) +
              " is not divisible by num_heads " + std::to_string(num_heads));
  AttentionParams p;
  p.w_q = xavier(d_model, d_model, rng);
  p.w_k = xavier(d_model, d_model, rng);
  p.w_v = xavier(d_model, d_model, rng);
  p.w_o = xavier(d_model, d_model, rng);
  p.num_heads = num_heads;
  p.head_dim = d_model / num_heads;
  return p;
}

namespace {

// [B, n, d] -> [B, h, n, d/h]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  return permute(reshape(x, {b, n, heads, d / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), n = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, n, h * dh});
}

}  // namespace

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                            const AttentionParams& params, const AttentionMode& mode,
                            const AttentionMask* mask, Tensor* weights_out) {
  const std::size_t d = params.d_model();
  const bool unbatched = x_q.rank() == 2;
  const bool ranks_ok = (x_q.rank() == 2 || x_q.rank() == 3) && x_kv.rank() == x_q.rank();
  if (!ranks_ok || x_q.dim(-1) != d || x_kv.dim(-1) != d ||
      (!unbatched && x_q.dim(0) != x_kv.dim(0))) {
    fail(ErrorCode::kShapeMismatch, "multi_head_attention: inputs " +
                                        shape_str(x_q.shape()) + " and " +
                                        shape_str(x_kv.shape()) + " do not fit d_model " +
                                        std::to_string(d));
  }
  if (mode.kind == AttentionKind::kQKNorm && mode.g.numel() != 1 &&
      mode.g.numel() != params.num_heads) {
    fail(ErrorCode::kShapeMismatch, "multi_head_attention: per-head g has " +
                                        std::to_string(mode.g.numel()) + " entries for " +
                                        std::to_string(params.num_heads) + " heads");
  }
  const Tensor xq = unbatched ? reshape(x_q, {1, x_q.dim(0), d}) : x_q;
  const Tensor xkv = unbatched ? reshape(x_kv, {1, x_kv.dim(0), d}) : x_kv;
  const std::size_t h = params.num_heads;

  Tensor q = split_heads(matmul(xq, params.w_q), h);
  Tensor k = split_heads(matmul(xkv, params.w_k), h);
  Tensor v = split_heads(matmul(xkv, params.w_v), h);
  AttentionResult r = attend(q, k, v, mode, mask);
  if (weights_out) *weights_out = r.weights;
  Tensor out = matmul(merge_heads(r.output), params.w_o);
  return unbatched ? reshape(out, {x_q.dim(0), d}) : out;
}

}  // namespace qknorm
