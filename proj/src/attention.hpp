#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace qknorm {

// ---------------------------------------------------------------------------
// Sequence-length statistics and the initial softmax scale
// ---------------------------------------------------------------------------

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest length (1-based).
int sequence_length_percentile(std::span<const int> lengths, double p);

/// log2(L^2 - L). Throws for L < 2, where the logarithm is undefined.
double g0_init(int length);

struct LengthStats {
  std::vector<int> lengths;
  double percentile = 97.5;
  int L = 0;
  double g0 = 0.0;  // 0 when L < 2, where the logarithm is undefined

  static LengthStats compute(std::vector<int> lengths, double percentile = 97.5);
};

// ---------------------------------------------------------------------------
// Attention variants
// ---------------------------------------------------------------------------

// Eps for the Q/K row normalization. Small enough that rescaling a row leaves
// the attention output unchanged to ~1e-10.
inline constexpr double kQKNormEps = 1e-12;

enum class AttentionKind { kScaledDot, kQKNorm };

/// Which attention the layer runs. For QKNorm, `g` holds the softmax scale:
/// one element (shared by all heads) or one element per head.
struct AttentionMode {
  AttentionKind kind = AttentionKind::kScaledDot;
  Tensor g;
  // Also l2-normalize V rows. Ablation only.
  bool normalize_v = false;

  static AttentionMode scaled_dot();
  static AttentionMode qknorm(double g_init, bool learnable = true,
                              std::size_t per_head = 0);
};

struct AttentionResult {
  Tensor output;   // [..., n_q, d_head]
  Tensor weights;  // [..., n_q, n_k]
};

/// softmax(Q K^T / sqrt(d_head)) V over [..., n, d_head] inputs.
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const AttentionMask* mask = nullptr);

/// softmax(g * Qhat Khat^T) V where hat rows are unit length along d_head.
AttentionResult qknorm_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const Tensor& g, const AttentionMask* mask = nullptr,
                                 bool normalize_v = false);

AttentionResult attend(const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttentionMode& mode, const AttentionMask* mask = nullptr);

struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // [d_model, d_model]
  std::size_t num_heads = 1;
  std::size_t head_dim = 0;

  std::size_t d_model() const { return num_heads * head_dim; }
  static AttentionParams init(std::size_t d_model, std::size_t num_heads, Rng& rng);
};

/// Project, split into heads, attend, merge, project out. Inputs are [n, d]
/// or [B, n, d]; the mask may carry one slice per batch entry. When
/// `weights_out` is set it receives the [B, h, n_q, n_k] attention weights.
Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                            const AttentionParams& params, const AttentionMode& mode,
                            const AttentionMask* mask = nullptr,
                            Tensor* weights_out = nullptr);

}  // namespace qknorm
