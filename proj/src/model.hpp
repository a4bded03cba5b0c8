#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attention.hpp"
#include "norms.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace qknorm {

// Reserved ids shared by every vocabulary.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumSpecials = 4;

enum class NormPlacement { kPre, kPost };
enum class ResidualNorm { kLayerNorm, kScaleNorm };

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t num_heads = 8;
  // Encoder and decoder depth. 0 is allowed for tests.
  std::size_t num_layers = 2;
  // 0 means 4 * d_model.
  std::size_t d_ff = 0;
  double dropout = 0.1;
  NormPlacement norm_placement = NormPlacement::kPre;
  ResidualNorm residual_norm = ResidualNorm::kLayerNorm;
  bool use_fixnorm = true;
  AttentionKind attention = AttentionKind::kQKNorm;
  bool g_learnable = true;
  // Unset: the trainer derives g0 from the corpus length percentile.
  std::optional<double> g_init;
  bool per_head_g = false;
  bool normalize_v = false;
  bool tie_embeddings = false;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t max_seq_len = 256;

  std::size_t ff_dim() const { return d_ff ? d_ff : 4 * d_model; }
  void validate() const;
};

/// Right-padded token ids, [batch, length] row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;

  static TokenBatch from_sequences(const std::vector<std::vector<int>>& seqs);
  int at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
};

/// Post-softmax attention weights per layer, each [B, h, n_q, n_k].
struct AttentionTrace {
  std::vector<Tensor> encoder_self;
  std::vector<Tensor> decoder_self;
  std::vector<Tensor> decoder_cross;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
  AttentionTrace* trace = nullptr;
  // Test hook: every attention / feed-forward sublayer contributes zero.
  bool zero_sublayers = false;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Transformer {
 public:
  Transformer(ModelConfig config, double g_init, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// Every stored tensor, in a fixed order, including frozen ones.
  std::vector<NamedTensor> tensors() const;
  /// Tensors the optimizer updates.
  std::vector<Tensor> trainable() const;
  std::size_t parameter_count() const;
  /// Current value of every g, in layer order.
  std::vector<double> g_values() const;

  enum class Side { kSource, kTarget };
  /// Lookup (unit rows under FixNorm) times sqrt(d_model) plus sinusoidal
  /// positions. [B, n, d_model].
  Tensor embed(const TokenBatch& tokens, Side side, const ForwardOptions& opts = {}) const;
  Tensor encode(const TokenBatch& src, const ForwardOptions& opts = {}) const;
  Tensor decode(const TokenBatch& tgt_in, const Tensor& memory, const TokenBatch& src,
                const ForwardOptions& opts = {}) const;
  /// [B, n, tgt_vocab]
  Tensor generator(const Tensor& hidden) const;

  /// Mean cross-entropy over non-pad positions of tgt_out.
  Tensor loss(const TokenBatch& src, const TokenBatch& tgt_in, const TokenBatch& tgt_out,
              double label_smoothing = 0.0, const ForwardOptions& opts = {}) const;

  /// Argmax decoding, batched across sources. Stops each sequence at EOS
  /// (not included in the output) or after max_len tokens.
  std::vector<std::vector<int>> greedy_decode(const std::vector<std::vector<int>>& sources,
                                              std::size_t max_len) const;

  /// Overwrites stored values by name; names and shapes must match exactly.
  void load_values(const std::vector<NamedTensor>& values);

 private:
  struct Norm {
    ResidualNorm kind = ResidualNorm::kLayerNorm;
    LayerNormParams layer;
    ScaleNormParams scale;
    Tensor operator()(const Tensor& x) const;
  };
  struct FeedForward {
    Tensor w1, b1, w2, b2;
    Tensor operator()(const Tensor& x) const;
  };
  struct EncoderLayer {
    AttentionParams self_attn;
    AttentionMode self_mode;
    Norm norm_attn, norm_ff;
    FeedForward ff;
  };
  struct DecoderLayer {
    AttentionParams self_attn, cross_attn;
    AttentionMode self_mode, cross_mode;
    Norm norm_self, norm_cross, norm_ff;
    FeedForward ff;
  };

  Norm make_norm() const;
  AttentionMode make_mode(double g_init) const;
  template <typename F>
  Tensor sublayer(const Tensor& x, const Norm& norm, const ForwardOptions& opts, F&& body) const;
  Tensor positions(std::size_t n) const;

  ModelConfig config_;
  Tensor src_embed_, tgt_embed_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Norm encoder_final_, decoder_final_;
  Tensor gen_w_, gen_b_;
  Tensor position_table_;
};

}  // namespace qknorm
