#include <doctest.h>

#include <cmath>

#include "attention.hpp"
#include "error.hpp"
#include "norms.hpp"
#include "test_util.hpp"

using namespace qknorm;
using qknorm::testing::max_abs_diff;
using qknorm::testing::random_tensor;
using qknorm::testing::weighted_sum;

TEST_CASE("percentile: nearest-rank") {
  const std::vector<int> a = {9, 3, 7, 5};
  CHECK(sequence_length_percentile(a, 97.5) == 9);
  CHECK(sequence_length_percentile(std::vector<int>{7, 7, 7}, 12.0) == 7);
  std::vector<int> hundred(100);
  for (int i = 0; i < 100; ++i) hundred[i] = i + 1;
  CHECK(sequence_length_percentile(hundred, 50.0) == 50);
  CHECK(sequence_length_percentile(hundred, 7.0) == 7);
  CHECK(sequence_length_percentile(hundred, 100.0) == 100);
  CHECK_THROWS_AS(sequence_length_percentile(std::vector<int>{}, 50.0), Error);
  CHECK_THROWS_AS(sequence_length_percentile(a, 0.0), Error);
}

TEST_CASE("percentile: property - matches a brute-force count") {
  Rng rng(61);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<int> v(1 + rng.below(60));
    for (int& x : v) x = 1 + static_cast<int>(rng.below(40));
    const double p = 0.5 + rng.uniform() * 99.5;
    const int got = sequence_length_percentile(v, p);
    // Smallest value whose share of elements at or below it reaches p%.
    int oracle = 0;
    for (int cand = 1; cand <= 40; ++cand) {
      std::size_t at_or_below = 0;
      for (int x : v) at_or_below += x <= cand;
      if (100.0 * static_cast<double>(at_or_below) >= p * static_cast<double>(v.size())) {
        oracle = cand;
        break;
      }
    }
    CHECK(got == oracle);
  }
}

TEST_CASE("g0_init: closed form values") {
  CHECK(std::abs(g0_init(72) - 12.3196721209469944) <= 1e-9);
  CHECK(std::abs(g0_init(79) - 12.5891829670393513) <= 1e-9);
  CHECK(g0_init(2) == 1.0);
  CHECK_THROWS_AS(g0_init(1), Error);
  CHECK_THROWS_AS(g0_init(0), Error);
  for (int l = 2; l < 500; ++l) CHECK(g0_init(l + 1) > g0_init(l));
}

TEST_CASE("length stats: L and g0 from corpus lengths") {
  auto stats = LengthStats::compute({3, 5, 7, 9});
  CHECK(stats.L == 9);
  CHECK(stats.g0 == doctest::Approx(std::log2(72.0)));
}

TEST_CASE("scaled_dot_attention: hand example and reductions") {
  Tensor q = Tensor::from({1, 1, 4}, {2, 0, 0, 0});
  Tensor k = Tensor::from({1, 2, 4}, {2, 0, 0, 0, 0, 2, 0, 0});
  Tensor v = Tensor::from({1, 2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  auto r = scaled_dot_attention(q, k, v);
  CHECK(r.weights.at(0) == doctest::Approx(0.880797077977882).epsilon(1e-12));
  CHECK(r.weights.at(1) == doctest::Approx(0.119202922022118).epsilon(1e-12));

  Tensor single = Tensor::from({1, 1, 3}, {0.3, -1.0, 2.0});
  auto s = scaled_dot_attention(Tensor::from({1, 1, 3}, {5, 5, 5}), single, single);
  CHECK(max_abs_diff(s.output.data(), single.data()) == 0.0);

  Rng rng(67);
  Tensor x = random_tensor({2, 4, 3}, rng);
  AttentionMask causal = AttentionMask::causal(4);
  auto m = scaled_dot_attention(x, x, x, &causal);
  CHECK(m.weights.at(0) == 1.0);
  CHECK(m.weights.at(1) < 1e-30);
  AttentionMask wrong = AttentionMask::causal(3);
  CHECK_THROWS_AS(scaled_dot_attention(x, x, x, &wrong), Error);
}

TEST_CASE("qknorm_attention: hand example and cosine logits") {
  Tensor q = Tensor::from({1, 1, 2}, {1, 0});
  Tensor k = Tensor::from({1, 2, 2}, {1, 0, 0, 1});
  auto r = qknorm_attention(q, k, k, Tensor::scalar(1.0));
  CHECK(r.weights.at(0) == doctest::Approx(0.731058578630005).epsilon(1e-5));
  CHECK(r.weights.at(1) == doctest::Approx(0.268941421369995).epsilon(1e-5));

  // Parallel q and k: pre-scale logit is the cosine 1.
  Tensor qp = Tensor::from({1, 1, 3}, {0.2, 0.4, -0.1});
  Tensor kp = Tensor::from({1, 1, 3}, {6.0, 12.0, -3.0});
  Tensor cos = matmul(l2_normalize(qp, -1, kQKNormEps), l2_normalize(kp, -1, kQKNormEps), true);
  CHECK(std::abs(cos.item() - 1.0) <= 1e-6);
}

TEST_CASE("qknorm_attention: property - cosine logits stay in [-1, 1]") {
  Rng rng(71);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor q = random_tensor({2, 5, 8}, rng, -10, 10);
    Tensor k = random_tensor({2, 6, 8}, rng, -10, 10);
    Tensor cos = matmul(l2_normalize(q, -1, kQKNormEps), l2_normalize(k, -1, kQKNormEps), true);
    for (double c : cos.data()) {
      CHECK(c >= -1.0 - 1e-6);
      CHECK(c <= 1.0 + 1e-6);
    }
  }
}

TEST_CASE("qknorm_attention: magnitude invariance, contrast with scaled dot") {
  Rng rng(73);
  int sdp_changed = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor q = random_tensor({2, 5, 8}, rng);
    Tensor k = random_tensor({2, 5, 8}, rng);
    Tensor v = random_tensor({2, 5, 8}, rng);
    Tensor g = Tensor::scalar(g0_init(10));
    const std::size_t row = rng.below(10);
    const bool on_query = rng.below(2) == 0;
    for (double c : {0.01, 1.0, 100.0}) {
      std::vector<double> scaled(on_query ? q.data().begin() : k.data().begin(),
                                 on_query ? q.data().end() : k.data().end());
      for (std::size_t j = 0; j < 8; ++j) scaled[row * 8 + j] *= c;
      Tensor q2 = on_query ? Tensor::from(q.shape(), scaled) : q;
      Tensor k2 = on_query ? k : Tensor::from(k.shape(), scaled);
      auto base = qknorm_attention(q, k, v, g);
      auto moved = qknorm_attention(q2, k2, v, g);
      CHECK(max_abs_diff(base.output.data(), moved.output.data()) <= 1e-6);
      if (c == 100.0) {
        auto sb = scaled_dot_attention(q, k, v);
        auto sm = scaled_dot_attention(q2, k2, v);
        sdp_changed += max_abs_diff(sb.output.data(), sm.output.data()) > 1e-3;
      }
    }
  }
  CHECK(sdp_changed == 100);
}

TEST_CASE("qknorm_attention: g = 0 gives uniform weights over visible keys") {
  Rng rng(79);
  Tensor q = random_tensor({3, 6, 4}, rng, -5, 5);
  Tensor k = random_tensor({3, 6, 4}, rng, -5, 5);
  AttentionMask causal = AttentionMask::causal(6);
  auto r = qknorm_attention(q, k, k, Tensor::scalar(0.0), &causal);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        const double w = r.weights.at((h * 6 + i) * 6 + j);
        if (j <= i) {
          CHECK(w == doctest::Approx(1.0 / static_cast<double>(i + 1)).epsilon(1e-15));
        } else {
          CHECK(w < 1e-30);
        }
      }
}

TEST_CASE("attention: gradient checks w.r.t. Q, K, V and g") {
  Rng rng(83);
  AttentionMask causal = AttentionMask::causal(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor q = random_tensor({2, 4, 3}, rng);
    Tensor k = random_tensor({2, 4, 3}, rng);
    Tensor v = random_tensor({2, 4, 3}, rng);
    Tensor g = Tensor::scalar(rng.uniform(0.5, 5.0));
    Tensor gh = random_tensor({2}, rng, 0.5, 5.0);
    Tensor w = random_tensor({2, 4, 3}, rng);
    const AttentionMask* mask = trial % 2 ? &causal : nullptr;
    auto sdp = [&](const Tensor& a, const Tensor& b, const Tensor& c) {
      return weighted_sum(scaled_dot_attention(a, b, c, mask).output, w);
    };
    auto qkn = [&](const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& s) {
      return weighted_sum(qknorm_attention(a, b, c, s, mask).output, w);
    };
    worst = std::max(worst, grad_check([&](const Tensor& t) { return sdp(t, k, v); }, q));
    worst = std::max(worst, grad_check([&](const Tensor& t) { return sdp(q, t, v); }, k));
    worst = std::max(worst, grad_check([&](const Tensor& t) { return sdp(q, k, t); }, v));
    worst = std::max(worst, grad_check([&](const Tensor& t) { return qkn(t, k, v, g); }, q));
    worst = std::max(worst, grad_check([&](const Tensor& t) { return qkn(q, t, v, g); }, k));
    worst = std::max(worst, grad_check([&](const Tensor& t) { return qkn(q, k, t, g); }, v));
    worst = std::max(worst, grad_check([&](const Tensor& t) { return qkn(q, k, v, t); }, g));
    worst = std::max(worst, grad_check([&](const Tensor& t) { return qkn(q, k, v, t); }, gh));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("multi_head_attention: single identity head reduces to scaled dot") {
  Rng rng(89);
  const std::size_t d = 4;
  AttentionParams p = AttentionParams::init(d, 1, rng);
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  p.w_q = p.w_k = p.w_v = p.w_o = Tensor::from({d, d}, eye);
  Tensor x = random_tensor({5, d}, rng);
  Tensor out = multi_head_attention(x, x, p, AttentionMode::scaled_dot());
  auto direct = scaled_dot_attention(reshape(x, {1, 5, d}), reshape(x, {1, 5, d}),
                                     reshape(x, {1, 5, d}));
  CHECK(out.shape() == Shape{5, d});
  CHECK(max_abs_diff(out.data(), direct.output.data()) <= 1e-14);
}

TEST_CASE("multi_head_attention: head counts and shapes") {
  Rng rng(97);
  Tensor x = random_tensor({6, 512}, rng);
  for (std::size_t heads : {8u, 32u}) {
    AttentionParams p = AttentionParams::init(512, heads, rng);
    CHECK(p.head_dim == 512 / heads);
    Tensor w;
    Tensor out = multi_head_attention(x, x, p, AttentionMode::qknorm(g0_init(6)), nullptr, &w);
    CHECK(out.shape() == Shape{6, 512});
    CHECK(w.shape() == Shape{1, heads, 6, 6});
  }
  CHECK_THROWS_AS(AttentionParams::init(64, 3, rng), Error);
  AttentionParams p = AttentionParams::init(8, 2, rng);
  CHECK_THROWS_AS(multi_head_attention(random_tensor({3, 6}, rng), random_tensor({3, 6}, rng), p,
                                       AttentionMode::scaled_dot()),
                  Error);
}

TEST_CASE("multi_head_attention: gradient w.r.t. projections and shared g") {
  Rng rng(101);
  AttentionParams p = AttentionParams::init(6, 2, rng);
  AttentionMode mode = AttentionMode::qknorm(2.0);
  Tensor xq = random_tensor({2, 3, 6}, rng);
  Tensor xkv = random_tensor({2, 4, 6}, rng);
  Tensor w = random_tensor({2, 3, 6}, rng);
  auto loss = [&] { return weighted_sum(multi_head_attention(xq, xkv, p, mode), w); };
  double worst = 0.0;
  for (Tensor* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
    worst = std::max(worst, grad_check([&](const Tensor&) { return loss(); }, *t));
  }
  worst = std::max(worst, grad_check([&](const Tensor&) { return loss(); }, mode.g));
  worst = std::max(worst, grad_check([&](const Tensor&) { return loss(); }, xq));
  CHECK(worst < 1e-4);
}
