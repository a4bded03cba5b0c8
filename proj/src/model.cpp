#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "error.hpp"
#include "ops.hpp"

namespace qknorm {

void ModelConfig::validate() const {
  require(d_model > 0, "d_model must be positive");
  require(num_heads > 0, "num_heads must be positive");
  require(d_model % num_heads == 0, "d_model " + std::to_string(d_model) +
                                        " is not divisible by num_heads " +
                                        std::to_string(num_heads));
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(src_vocab > kNumSpecials && tgt_vocab > kNumSpecials,
          "vocabularies must hold at least one token beyond the specials");
  require(max_seq_len > 0, "max_seq_len must be positive");
}

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<int>>& seqs) {
  require(!seqs.empty(), "empty batch");
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.length = std::max(b.length, s.size());
  require(b.length > 0, "batch of empty sequences");
  b.ids.assign(b.batch * b.length, kPad);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.length));
  }
  return b;
}

namespace {

Tensor uniform_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> w(rows * cols);
  for (double& x : w) x = rng.uniform(-bound, bound);
  return Tensor::from({rows, cols}, std::move(w), true);
}

Tensor embedding_table(std::size_t vocab, std::size_t d, Rng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> w(vocab * d);
  for (double& x : w) x = rng.normal() * sd;
  return Tensor::from({vocab, d}, std::move(w), true);
}

AttentionMask key_padding(const TokenBatch& keys, std::size_t n_q, bool causal) {
  AttentionMask m;
  m.batches = keys.batch;
  m.n_q = n_q;
  m.n_k = keys.length;
  m.keep.assign(m.batches * n_q * m.n_k, 0);
  for (std::size_t b = 0; b < keys.batch; ++b)
    for (std::size_t q = 0; q < n_q; ++q)
      for (std::size_t k = 0; k < keys.length; ++k) {
        const bool visible = keys.at(b, k) != kPad && (!causal || k <= q);
        m.keep[(b * n_q + q) * m.n_k + k] = visible;
      }
  return m;
}

Tensor maybe_dropout(const Tensor& x, double p, const ForwardOptions& opts) {
  if (!opts.training || p == 0.0) return x;
  require(opts.rng != nullptr, "training with dropout needs an rng");
  return dropout(x, p, *opts.rng);
}

}  // namespace

Tensor Transformer::Norm::operator()(const Tensor& x) const {
  return kind == ResidualNorm::kLayerNorm ? layer_norm(x, layer) : scale_norm(x, scale);
}

Tensor Transformer::FeedForward::operator()(const Tensor& x) const {
  return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

Transformer::Norm Transformer::make_norm() const {
  Norm n;
  n.kind = config_.residual_norm;
  if (n.kind == ResidualNorm::kLayerNorm) {
    n.layer = LayerNormParams::init(config_.d_model);
  } else {
    n.scale = ScaleNormParams::init(config_.d_model);
  }
  return n;
}

AttentionMode Transformer::make_mode(double g_init) const {
  if (config_.attention == AttentionKind::kScaledDot) return AttentionMode::scaled_dot();
  AttentionMode mode = AttentionMode::qknorm(g_init, config_.g_learnable,
                                             config_.per_head_g ? config_.num_heads : 0);
  mode.normalize_v = config_.normalize_v;
  return mode;
}

Transformer::Transformer(ModelConfig config, double g_init, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  const std::size_t ff = config_.ff_dim();
  auto make_ff = [&] {
    return FeedForward{uniform_matrix(d, ff, rng), Tensor::zeros({ff}, true),
                       uniform_matrix(ff, d, rng), Tensor::zeros({d}, true)};
  };

  src_embed_ = embedding_table(config_.src_vocab, d, rng);
  tgt_embed_ = embedding_table(config_.tgt_vocab, d, rng);
  for (std::size_t i = 0; i < config_.num_layers; ++i) {
    EncoderLayer layer;
    layer.self_attn = AttentionParams::init(d, config_.num_heads, rng);
    layer.self_mode = make_mode(g_init);
    layer.norm_attn = make_norm();
    layer.norm_ff = make_norm();
    layer.ff = make_ff();
    encoder_.push_back(std::move(layer));
  }
  for (std::size_t i = 0; i < config_.num_layers; ++i) {
    DecoderLayer layer;
    layer.self_attn = AttentionParams::init(d, config_.num_heads, rng);
    layer.cross_attn = AttentionParams::init(d, config_.num_heads, rng);
    layer.self_mode = make_mode(g_init);
    layer.cross_mode = make_mode(g_init);
    layer.norm_self = make_norm();
    layer.norm_cross = make_norm();
    layer.norm_ff = make_norm();
    layer.ff = make_ff();
    decoder_.push_back(std::move(layer));
  }
  encoder_final_ = make_norm();
  decoder_final_ = make_norm();
  if (!config_.tie_embeddings) {
    gen_w_ = uniform_matrix(d, config_.tgt_vocab, rng);
    gen_b_ = Tensor::zeros({config_.tgt_vocab}, true);
  }

  std::vector<double> pe(config_.max_seq_len * d);
  for (std::size_t pos = 0; pos < config_.max_seq_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = std::sin(angle);
      if (i + 1 < d) pe[pos * d + i + 1] = std::cos(angle);
    }
  }
  position_table_ = Tensor::from({config_.max_seq_len, d}, std::move(pe));
}

std::vector<NamedTensor> Transformer::tensors() const {
  std::vector<NamedTensor> out;
  auto norm = [&](const std::string& prefix, const Norm& n) {
    if (n.kind == ResidualNorm::kLayerNorm) {
      out.push_back({prefix + ".gain", n.layer.gain});
      out.push_back({prefix + ".bias", n.layer.bias});
    } else {
      out.push_back({prefix + ".scale", n.scale.g_scale});
    }
  };
  auto attn = [&](const std::string& prefix, const AttentionParams& p, const AttentionMode& m) {
    out.push_back({prefix + ".w_q", p.w_q});
    out.push_back({prefix + ".w_k", p.w_k});
    out.push_back({prefix + ".w_v", p.w_v});
    out.push_back({prefix + ".w_o", p.w_o});
    if (m.kind == AttentionKind::kQKNorm) out.push_back({prefix + ".g", m.g});
  };
  auto ffn = [&](const std::string& prefix, const FeedForward& f) {
    out.push_back({prefix + ".w1", f.w1});
    out.push_back({prefix + ".b1", f.b1});
    out.push_back({prefix + ".w2", f.w2});
    out.push_back({prefix + ".b2", f.b2});
  };

  out.push_back({"src_embed", src_embed_});
  out.push_back({"tgt_embed", tgt_embed_});
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    attn(p + ".self_attn", encoder_[i].self_attn, encoder_[i].self_mode);
    norm(p + ".norm_attn", encoder_[i].norm_attn);
    ffn(p + ".ff", encoder_[i].ff);
    norm(p + ".norm_ff", encoder_[i].norm_ff);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    attn(p + ".self_attn", decoder_[i].self_attn, decoder_[i].self_mode);
    norm(p + ".norm_self", decoder_[i].norm_self);
    attn(p + ".cross_attn", decoder_[i].cross_attn, decoder_[i].cross_mode);
    norm(p + ".norm_cross", decoder_[i].norm_cross);
    ffn(p + ".ff", decoder_[i].ff);
    norm(p + ".norm_ff", decoder_[i].norm_ff);
  }
  if (config_.norm_placement == NormPlacement::kPre) {
    norm("encoder.final_norm", encoder_final_);
    norm("decoder.final_norm", decoder_final_);
  }
  if (!config_.tie_embeddings) {
    out.push_back({"generator.w", gen_w_});
    out.push_back({"generator.b", gen_b_});
  }
  return out;
}

std::vector<Tensor> Transformer::trainable() const {
  std::vector<Tensor> out;
  for (auto& nt : tensors()) {
    if (nt.tensor.requires_grad()) out.push_back(nt.tensor);
  }
  return out;
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.numel();
  return n;
}

std::vector<double> Transformer::g_values() const {
  std::vector<double> out;
  for (const auto& nt : tensors()) {
    if (nt.name.size() >= 2 && nt.name.compare(nt.name.size() - 2, 2, ".g") == 0) {
      out.insert(out.end(), nt.tensor.data().begin(), nt.tensor.data().end());
    }
  }
  return out;
}

Tensor Transformer::positions(std::size_t n) const {
  const std::size_t d = config_.d_model;
  auto pe = position_table_.data();
  return Tensor::from({n, d}, std::vector<double>(pe.begin(), pe.begin() + static_cast<std::ptrdiff_t>(n * d)));
}

Tensor Transformer::embed(const TokenBatch& tokens, Side side, const ForwardOptions& opts) const {
  if (tokens.length > config_.max_seq_len) {
    fail(ErrorCode::kInvalidArgument, "sequence length " + std::to_string(tokens.length) +
                                          " exceeds max_seq_len " +
                                          std::to_string(config_.max_seq_len));
  }
  const Tensor& table = side == Side::kSource ? src_embed_ : tgt_embed_;
  Tensor rows = gather_rows(table, tokens.ids);
  if (config_.use_fixnorm) rows = l2_normalize(rows, -1, kL2Eps);
  rows = scale(rows, std::sqrt(static_cast<double>(config_.d_model)));
  Tensor x = add(reshape(rows, {tokens.batch, tokens.length, config_.d_model}),
                 positions(tokens.length));
  return maybe_dropout(x, config_.dropout, opts);
}

template <typename F>
Tensor Transformer::sublayer(const Tensor& x, const Norm& norm, const ForwardOptions& opts,
                             F&& body) const {
  const bool pre = config_.norm_placement == NormPlacement::kPre;
  if (opts.zero_sublayers) return pre ? x : norm(x);
  Tensor out = maybe_dropout(body(pre ? norm(x) : x), config_.dropout, opts);
  Tensor sum = add(x, out);
  return pre ? sum : norm(sum);
}

Tensor Transformer::encode(const TokenBatch& src, const ForwardOptions& opts) const {
  Tensor x = embed(src, Side::kSource, opts);
  const AttentionMask mask = key_padding(src, src.length, false);
  for (const auto& layer : encoder_) {
    x = sublayer(x, layer.norm_attn, opts, [&](const Tensor& h) {
      Tensor w;
      Tensor o = multi_head_attention(h, h, layer.self_attn, layer.self_mode, &mask,
                                      opts.trace ? &w : nullptr);
      if (opts.trace) opts.trace->encoder_self.push_back(w);
      return o;
    });
    x = sublayer(x, layer.norm_ff, opts, layer.ff);
  }
  if (config_.norm_placement == NormPlacement::kPre) x = encoder_final_(x);
  return x;
}

Tensor Transformer::decode(const TokenBatch& tgt_in, const Tensor& memory, const TokenBatch& src,
                           const ForwardOptions& opts) const {
  require(memory.rank() == 3 && memory.dim(0) == tgt_in.batch && memory.dim(1) == src.length,
          "decode: memory " + shape_str(memory.shape()) + " does not match the batch");
  Tensor x = embed(tgt_in, Side::kTarget, opts);
  const AttentionMask self_mask = key_padding(tgt_in, tgt_in.length, true);
  const AttentionMask cross_mask = key_padding(src, tgt_in.length, false);
  for (const auto& layer : decoder_) {
    x = sublayer(x, layer.norm_self, opts, [&](const Tensor& h) {
      Tensor w;
      Tensor o = multi_head_attention(h, h, layer.self_attn, layer.self_mode, &self_mask,
                                      opts.trace ? &w : nullptr);
      if (opts.trace) opts.trace->decoder_self.push_back(w);
      return o;
    });
    x = sublayer(x, layer.norm_cross, opts, [&](const Tensor& h) {
      Tensor w;
      Tensor o = multi_head_attention(h, memory, layer.cross_attn, layer.cross_mode, &cross_mask,
                                      opts.trace ? &w : nullptr);
      if (opts.trace) opts.trace->decoder_cross.push_back(w);
      return o;
    });
    x = sublayer(x, layer.norm_ff, opts, layer.ff);
  }
  if (config_.norm_placement == NormPlacement::kPre) x = decoder_final_(x);
  return x;
}

Tensor Transformer::generator(const Tensor& hidden) const {
  if (config_.tie_embeddings) {
    Tensor table = config_.use_fixnorm ? l2_normalize(tgt_embed_, -1, kL2Eps) : tgt_embed_;
    return matmul(hidden, table, /*transpose_b=*/true);
  }
  return add(matmul(hidden, gen_w_), gen_b_);
}

Tensor Transformer::loss(const TokenBatch& src, const TokenBatch& tgt_in,
                         const TokenBatch& tgt_out, double label_smoothing,
                         const ForwardOptions& opts) const {
  require(tgt_in.batch == tgt_out.batch && tgt_in.length == tgt_out.length &&
              src.batch == tgt_in.batch,
          "loss: source and target batches disagree");
  Tensor memory = encode(src, opts);
  Tensor logits = generator(decode(tgt_in, memory, src, opts));
  Tensor flat = reshape(logits, {tgt_out.batch * tgt_out.length, config_.tgt_vocab});
  return cross_entropy(flat, tgt_out.ids, kPad, label_smoothing);
}

std::vector<std::vector<int>> Transformer::greedy_decode(
    const std::vector<std::vector<int>>& sources, std::size_t max_len) const {
  std::vector<std::vector<int>> out(sources.size());
  if (sources.empty() || max_len == 0) return out;
  NoGradGuard no_grad;
  const TokenBatch src = TokenBatch::from_sequences(sources);
  const Tensor memory = encode(src);
  const std::size_t v = config_.tgt_vocab;
  const std::size_t steps = std::min(max_len, config_.max_seq_len);

  std::vector<std::vector<int>> prefixes(sources.size(), std::vector<int>{kBos});
  std::vector<bool> done(sources.size(), false);
  for (std::size_t step = 0; step < steps; ++step) {
    const TokenBatch tgt = TokenBatch::from_sequences(prefixes);
    const Tensor logits = generator(decode(tgt, memory, src));
    auto data = logits.data();
    bool all_done = true;
    for (std::size_t b = 0; b < sources.size(); ++b) {
      const double* row = data.data() + (b * tgt.length + tgt.length - 1) * v;
      const int next = static_cast<int>(std::max_element(row, row + v) - row);
      prefixes[b].push_back(next);
      if (done[b]) continue;
      if (next == kEos) {
        done[b] = true;
      } else {
        out[b].push_back(next);
      }
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  return out;
}

void Transformer::load_values(const std::vector<NamedTensor>& values) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : values) by_name[nt.name] = &nt.tensor;
  auto mine = tensors();
  if (by_name.size() != mine.size()) {
    fail(ErrorCode::kFormat, "parameter set size mismatch: expected " + std::to_string(mine.size()) +
                                 ", got " + std::to_string(by_name.size()));
  }
  for (auto& nt : mine) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) fail(ErrorCode::kFormat, "missing parameter " + nt.name);
    if (it->second->shape() != nt.tensor.shape()) {
      fail(ErrorCode::kFormat, "parameter " + nt.name + " has shape " +
                                   shape_str(it->second->shape()) + ", expected " +
                                   shape_str(nt.tensor.shape()));
    }
    auto dst = nt.tensor.mutable_data();
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace qknorm
