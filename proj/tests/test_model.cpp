#include <doctest.h>

#include <cmath>

#include "error.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "test_util.hpp"

using namespace qknorm;
using qknorm::testing::max_abs_diff;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.num_heads = 4;
  c.num_layers = 2;
  c.dropout = 0.0;
  c.src_vocab = 12;
  c.tgt_vocab = 10;
  c.max_seq_len = 32;
  return c;
}

TokenBatch batch_of(const std::vector<std::vector<int>>& seqs) {
  return TokenBatch::from_sequences(seqs);
}

}  // namespace

TEST_CASE("token batch: right padding") {
  const auto b = batch_of({{5, 6, 2}, {7, 2}});
  CHECK(b.batch == 2);
  CHECK(b.length == 3);
  CHECK(b.at(1, 0) == 7);
  CHECK(b.at(1, 2) == kPad);
}

TEST_CASE("model config: validation") {
  ModelConfig c = small_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(Transformer(c, 1.0, 1), Error);
  c = small_config();
  c.tgt_vocab = 4;
  CHECK_THROWS_AS(Transformer(c, 1.0, 1), Error);
}

TEST_CASE("embed: FixNorm rows have length sqrt(d) before positions are added") {
  const Transformer m(small_config(), 2.0, 3);
  const Tensor e = m.embed(batch_of({{4, 5, 6, 7, 8, 9, 10, 11}}), Transformer::Side::kSource);
  // Position 0 encoding is sin(0)=0, cos(0)=1 alternating.
  auto v = e.data();
  for (std::size_t i = 0; i < 1; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      const double pe0 = j % 2 == 0 ? 0.0 : 1.0;
      sq += (v[j] - pe0) * (v[j] - pe0);
    }
    CHECK(std::sqrt(sq) == doctest::Approx(4.0).epsilon(1e-5));
  }
}

TEST_CASE("embed: the same token at different positions differs") {
  const Transformer m(small_config(), 2.0, 3);
  const Tensor e = m.embed(batch_of({{5, 5}}), Transformer::Side::kSource);
  auto v = e.data();
  double diff = 0.0;
  for (std::size_t j = 0; j < 16; ++j) diff = std::max(diff, std::abs(v[j] - v[16 + j]));
  CHECK(diff > 0.1);
}

TEST_CASE("embed: rejects sequences longer than max_seq_len and unknown ids") {
  ModelConfig c = small_config();
  c.max_seq_len = 3;
  const Transformer m(c, 2.0, 3);
  CHECK_THROWS_AS(m.embed(batch_of({{4, 5, 6, 7}}), Transformer::Side::kSource), Error);
  CHECK_THROWS_AS(m.embed(batch_of({{40}}), Transformer::Side::kSource), Error);
}

TEST_CASE("forward: output shapes") {
  const Transformer m(small_config(), 2.0, 3);
  const auto src = batch_of({{4, 5, 6, 2}, {7, 2}});
  const auto tgt = batch_of({{1, 4, 5}, {1, 6, 7}});
  const Tensor mem = m.encode(src);
  CHECK(mem.shape() == Shape{2, 4, 16});
  const Tensor logits = m.generator(m.decode(tgt, mem, src));
  CHECK(logits.shape() == Shape{2, 3, 10});
}

TEST_CASE("forward: zero layers still produce logits") {
  ModelConfig c = small_config();
  c.num_layers = 0;
  const Transformer m(c, 2.0, 3);
  const auto src = batch_of({{4, 2}});
  const auto tgt = batch_of({{1, 4}});
  const Tensor logits = m.generator(m.decode(tgt, m.encode(src), src));
  CHECK(logits.shape() == Shape{1, 2, 10});
  CHECK(m.g_values().empty());
}

TEST_CASE("decoder: causal, later target tokens never affect earlier positions") {
  const Transformer m(small_config(), 2.0, 3);
  const auto src = batch_of({{4, 5, 6, 2}});
  const Tensor mem = m.encode(src);
  const Tensor a = m.decode(batch_of({{1, 4, 5, 6}}), mem, src);
  const Tensor b = m.decode(batch_of({{1, 4, 9, 8}}), mem, src);
  auto x = a.data(), y = b.data();
  // Positions 0 and 1 see only tokens 1 and 4: bitwise equal.
  for (std::size_t i = 0; i < 2 * 16; ++i) CHECK(x[i] == y[i]);
  CHECK(max_abs_diff(x.subspan(32), y.subspan(32)) > 1e-6);
}

TEST_CASE("encoder: padding a sentence does not change its own outputs") {
  const Transformer m(small_config(), 2.0, 3);
  const Tensor alone = m.encode(batch_of({{4, 5, 2}}));
  const Tensor padded = m.encode(batch_of({{4, 5, 2}, {6, 7, 8, 9, 10, 2}}));
  auto a = alone.data(), p = padded.data();
  CHECK(max_abs_diff(a, p.subspan(0, 3 * 16)) < 1e-12);
}

TEST_CASE("residual path: PreNorm with empty sublayers is the embedding plus final norm") {
  ModelConfig c = small_config();
  const Transformer m(c, 2.0, 3);
  const auto src = batch_of({{4, 5, 6, 2}});
  ForwardOptions opts;
  opts.zero_sublayers = true;
  const Tensor out = m.encode(src, opts);
  const Tensor x = m.embed(src, Transformer::Side::kSource);
  // The identity residual stream reaches the final norm untouched.
  auto final_gain = m.tensors();
  LayerNormParams ln = LayerNormParams::init(16);
  for (const auto& nt : final_gain) {
    if (nt.name == "encoder.final_norm.gain") ln.gain = nt.tensor;
    if (nt.name == "encoder.final_norm.bias") ln.bias = nt.tensor;
  }
  CHECK(max_abs_diff(out.data(), layer_norm(x, ln).data()) < 1e-12);
}

TEST_CASE("residual path: PostNorm normalizes after every sublayer") {
  ModelConfig c = small_config();
  c.norm_placement = NormPlacement::kPost;
  c.residual_norm = ResidualNorm::kScaleNorm;
  const Transformer m(c, 2.0, 3);
  bool has_final = false;
  for (const auto& nt : m.tensors()) has_final = has_final || nt.name.find("final_norm") != std::string::npos;
  CHECK_FALSE(has_final);
  ForwardOptions opts;
  opts.zero_sublayers = true;
  const Tensor out = m.encode(batch_of({{4, 5, 2}}), opts);
  // ScaleNorm output rows have norm |g| = 1/sqrt(d) after the last sublayer.
  auto v = out.data();
  for (std::size_t r = 0; r < 3; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 16; ++j) sq += v[r * 16 + j] * v[r * 16 + j];
    CHECK(std::sqrt(sq) == doctest::Approx(0.25).epsilon(1e-6));
  }
}

TEST_CASE("parameters: one g per attention sublayer, frozen g is not trainable") {
  ModelConfig c = small_config();
  c.num_layers = 3;
  const Transformer learn(c, 5.0, 1);
  CHECK(learn.g_values().size() == 9);
  for (double g : learn.g_values()) CHECK(g == 5.0);

  c.per_head_g = true;
  CHECK(Transformer(c, 5.0, 1).g_values().size() == 9 * 4);

  c.per_head_g = false;
  c.g_learnable = false;
  const Transformer frozen(c, 1.0, 1);
  CHECK(frozen.parameter_count() + 9 == learn.parameter_count());

  c.attention = AttentionKind::kScaledDot;
  CHECK(Transformer(c, 1.0, 1).g_values().empty());
}

TEST_CASE("parameters: count matches the architecture") {
  const ModelConfig c = small_config();
  const Transformer m(c, 2.0, 1);
  const std::size_t d = 16, ff = 64, L = 2;
  const std::size_t attn = 4 * d * d + 1;
  const std::size_t ln = 2 * d;
  const std::size_t ffn = d * ff + ff + ff * d + d;
  const std::size_t enc = L * (attn + ffn + 2 * ln) + ln;
  const std::size_t dec = L * (2 * attn + ffn + 3 * ln) + ln;
  const std::size_t emb = 12 * d + 10 * d;
  const std::size_t gen = d * 10 + 10;
  CHECK(m.parameter_count() == enc + dec + emb + gen);
}

TEST_CASE("tied embeddings drop the generator") {
  ModelConfig c = small_config();
  c.tie_embeddings = true;
  const Transformer m(c, 2.0, 1);
  for (const auto& nt : m.tensors()) CHECK(nt.name.rfind("generator", 0) != 0);
  const auto src = batch_of({{4, 2}});
  CHECK(m.generator(m.decode(batch_of({{1}}), m.encode(src), src)).shape() == Shape{1, 1, 10});
}

TEST_CASE("loss: appending pad columns leaves the loss unchanged") {
  const Transformer m(small_config(), 2.0, 3);
  const auto src = batch_of({{4, 5, 6, 2}, {7, 8, 2}});
  const auto tin = batch_of({{1, 4, 5}, {1, 6}});
  const auto tout = batch_of({{4, 5, 2}, {6, 2}});
  const double base = m.loss(src, tin, tout).item();
  auto widen = [](TokenBatch b, std::size_t extra) {
    TokenBatch w;
    w.batch = b.batch;
    w.length = b.length + extra;
    for (std::size_t i = 0; i < b.batch; ++i) {
      for (std::size_t t = 0; t < w.length; ++t) w.ids.push_back(t < b.length ? b.at(i, t) : kPad);
    }
    return w;
  };
  for (std::size_t extra : {1, 3, 7}) {
    const double padded = m.loss(widen(src, extra), widen(tin, extra), widen(tout, extra)).item();
    CHECK(std::abs(padded - base) <= 1e-10);
  }
}

TEST_CASE("forward/backward: paper-scale width stays finite") {
  ModelConfig c;
  c.d_model = 512;
  c.num_heads = 8;
  c.num_layers = 1;
  c.src_vocab = 40;
  c.tgt_vocab = 40;
  const Transformer m(c, g0_init(72), 7);
  Rng rng(1);
  ForwardOptions opts;
  opts.training = true;
  opts.rng = &rng;
  const Tensor loss = m.loss(batch_of({{4, 5, 6, 7, 2}, {8, 2}}), batch_of({{1, 9, 10}, {1, 11}}),
                             batch_of({{9, 10, 2}, {11, 2}}), 0.1, opts);
  CHECK(std::isfinite(loss.item()));
  backward(loss);
  for (const auto& t : m.trainable()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) REQUIRE(std::isfinite(g));
  }
}

TEST_CASE("greedy decode: bounded length, valid ids, deterministic") {
  const Transformer m(small_config(), 2.0, 3);
  const std::vector<std::vector<int>> sources = {{4, 5, 2}, {6, 7, 8, 9, 2}, {2}};
  const auto a = m.greedy_decode(sources, 5);
  const auto b = m.greedy_decode(sources, 5);
  CHECK(a == b);
  REQUIRE(a.size() == 3);
  for (const auto& h : a) {
    CHECK(h.size() <= 5);
    for (int id : h) {
      CHECK(id != kEos);
      CHECK(id >= 0);
      CHECK(id < 10);
    }
  }
  CHECK(m.greedy_decode({}, 5).empty());
  // Batch composition does not change an individual decode.
  CHECK(m.greedy_decode({sources[1]}, 5)[0] == a[1]);
}

TEST_CASE("load_values: round trip and mismatch errors") {
  const Transformer a(small_config(), 2.0, 3);
  Transformer b(small_config(), 2.0, 4);
  b.load_values(a.tensors());
  const auto src = batch_of({{4, 5, 2}});
  CHECK(max_abs_diff(a.encode(src).data(), b.encode(src).data()) == 0.0);

  auto values = a.tensors();
  values.pop_back();
  CHECK_THROWS_AS(b.load_values(values), Error);
  values = a.tensors();
  values[0].tensor = Tensor::zeros({3, 3});
  CHECK_THROWS_AS(b.load_values(values), Error);
}
