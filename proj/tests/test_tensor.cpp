#include <doctest.h>

#include <cmath>

#include "error.hpp"
#include "ops.hpp"
#include "tensor.hpp"
#include "test_util.hpp"

using namespace qknorm;
using qknorm::testing::max_abs_diff;
using qknorm::testing::random_tensor;
using qknorm::testing::weighted_sum;

TEST_CASE("tensor: construction enforces shape/data agreement") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), Error);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), Error);
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("matmul: identity, hand value, annihilator") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(eye, b);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{5, 6, 7, 8});

  Tensor row = Tensor::from({1, 4}, {2, 0, 0, 0});
  Tensor col = Tensor::from({4, 1}, {2, 0, 0, 0});
  CHECK(matmul(row, col).item() == 4.0);

  Rng rng(3);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor z = matmul(a, Tensor::zeros({5, 4}));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShapeMismatch);
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
}

TEST_CASE("matmul: batched and transposed agree with explicit loops") {
  Rng rng(11);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 5, 4}, rng);
  Tensor c = matmul(a, b, true);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 4; ++k) acc += a.at((bi * 3 + i) * 4 + k) * b.at((bi * 5 + j) * 4 + k);
        CHECK(c.at((bi * 3 + i) * 5 + j) == doctest::Approx(acc).epsilon(1e-14));
      }
}

TEST_CASE("softmax: saturation example and shift invariance") {
  Tensor hi = softmax(Tensor::from({3}, {760, 752, 750}), 0);
  Tensor lo = softmax(Tensor::from({3}, {12, 4, 2}), 0);
  CHECK(max_abs_diff(hi.data(), lo.data()) <= 1e-12);
  const double expected[] = {0.99962, 0.00034, 0.00005};
  for (int i = 0; i < 3; ++i) CHECK(std::abs(hi.at(i) - expected[i]) <= 5e-5);

  Tensor flat = softmax(Tensor::full({4}, 3.7), 0);
  for (double v : flat.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("softmax: rejects NaN") {
  CHECK_THROWS_AS(softmax(Tensor::from({2}, {1.0, std::nan("")}), 0), Error);
}

TEST_CASE("softmax: property - shift invariance and simplex rows") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, -1e4, 1e4);
    const double c = rng.uniform(-1e3, 1e3);
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (double& v : shifted) v += c;
    Tensor y = softmax(x, -1);
    Tensor ys = softmax(Tensor::from({4, 7}, shifted), -1);
    CHECK(max_abs_diff(y.data(), ys.data()) <= 1e-12);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        const double w = y.at(r * 7 + j);
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
        total += w;
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax: non-last axis") {
  Tensor x = Tensor::from({2, 2}, {0, 1, 0, 3});
  Tensor y = softmax(x, 0);
  CHECK(y.at(0) == doctest::Approx(0.5));
  CHECK(y.at(1) + y.at(3) == doctest::Approx(1.0));
}

TEST_CASE("backward: sums, squares, softmax rows") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

  x.zero_grad();
  backward(sum(mul(x, x)));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2, 4, 6});

  Tensor s = Tensor::from({4}, {0.3, -1.2, 2.0, 0.1}, true);
  backward(sum(softmax(s, 0)));
  for (double g : s.grad()) CHECK(std::abs(g) <= 1e-15);
}

TEST_CASE("backward: non-scalar loss rejected") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), Error);
}

TEST_CASE("backward: a tensor used twice gets the sum of both paths") {
  Rng rng(17);
  Tensor x = random_tensor({3, 4}, rng, -1, 1, true);
  Tensor w1 = random_tensor({4, 2}, rng);
  Tensor w2 = random_tensor({3, 4}, rng);

  backward(sum(matmul(x, w1)));
  std::vector<double> path1(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(sum(mul(softmax(x, -1), w2)));
  std::vector<double> path2(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(add(sum(matmul(x, w1)), sum(mul(softmax(x, -1), w2))));
  for (std::size_t i = 0; i < path1.size(); ++i) {
    CHECK(x.grad()[i] == doctest::Approx(path1[i] + path2[i]).epsilon(1e-13));
  }
}

TEST_CASE("no-grad guard skips the tape") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = scale(x, 3.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check: quadratic, linear, composite softmax") {
  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({6}, rng, -2, 2);
    CHECK(grad_check([](const Tensor& t) { return sum(mul(t, t)); }, x) < 1e-7);
    Tensor w = random_tensor({6}, rng);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(t, w); }, x) < 1e-10);
    // sum(softmax(.)) is constant, so its gradient is zero and a relative
    // error is meaningless; weight the outputs instead.
    Tensor g = Tensor::scalar(rng.uniform(0.5, 3.0));
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(softmax(mul_scalar(t, g), 0), w); },
                     x) < 1e-4);
  }
}

TEST_CASE("grad_check: every primitive op at 100 random points") {
  Rng rng(29);
  struct Case {
    const char* name;
    Shape shape;
    std::function<Tensor(const Tensor&, const Tensor&)> f;  // (x, weights)
    Shape out_shape;
  };
  Tensor other = random_tensor({4, 3}, rng);
  Tensor other3 = random_tensor({2, 5, 3}, rng);
  Tensor bias = random_tensor({3}, rng);
  Tensor g = Tensor::scalar(1.7);
  Tensor per_head = Tensor::from({2}, {0.7, 1.9});
  std::vector<Case> cases = {
      {"matmul-left", {5, 4}, [&](auto& x, auto& w) { return weighted_sum(matmul(x, other), w); }, {5, 3}},
      {"matmul-right", {4, 3}, [&](auto& x, auto& w) { return weighted_sum(matmul(other3, x, true), w); }, {2, 5, 4}},
      {"batched", {2, 5, 3}, [&](auto& x, auto& w) { return weighted_sum(matmul(x, other3, true), w); }, {2, 5, 5}},
      {"add-broadcast", {3}, [&](auto& x, auto& w) { return weighted_sum(add(other3, x), w); }, {2, 5, 3}},
      {"sub", {2, 5, 3}, [&](auto& x, auto& w) { return weighted_sum(sub(x, bias), w); }, {2, 5, 3}},
      {"mul", {4, 3}, [&](auto& x, auto& w) { return weighted_sum(mul(x, x), w); }, {4, 3}},
      {"mul_scalar", {4, 3}, [&](auto& x, auto& w) { return weighted_sum(mul_scalar(x, g), w); }, {4, 3}},
      {"scale_heads", {2, 3, 4}, [&](auto& x, auto& w) { return weighted_sum(scale_heads(x, per_head), w); }, {2, 3, 4}},
      {"softmax", {3, 5}, [&](auto& x, auto& w) { return weighted_sum(softmax(x, -1), w); }, {3, 5}},
      {"softmax-axis0", {3, 5}, [&](auto& x, auto& w) { return weighted_sum(softmax(x, 0), w); }, {3, 5}},
      {"log_softmax", {3, 5}, [&](auto& x, auto& w) { return weighted_sum(log_softmax(x, -1), w); }, {3, 5}},
      {"permute", {2, 3, 4}, [&](auto& x, auto& w) { return weighted_sum(permute(x, {2, 0, 1}), w); }, {4, 2, 3}},
      {"reshape", {2, 6}, [&](auto& x, auto& w) { return weighted_sum(reshape(x, {3, 4}), w); }, {3, 4}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x = random_tensor(c.shape, rng, -2, 2);
      Tensor w = random_tensor(c.out_shape, rng);
      worst = std::max(worst, grad_check([&](const Tensor& t) { return c.f(t, w); }, x));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("grad_check: gather, mask, cross-entropy, relu") {
  Rng rng(31);
  const std::vector<int> ids = {2, 0, 2, 1};
  AttentionMask mask = AttentionMask::causal(3);
  const std::vector<int> targets = {1, 0, 3, 2};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor table = random_tensor({3, 5}, rng, -2, 2);
    Tensor w = random_tensor({4, 5}, rng);
    worst = std::max(worst, grad_check([&](const Tensor& t) { return weighted_sum(gather_rows(t, ids), w); }, table));

    Tensor scores = random_tensor({2, 3, 3}, rng, -2, 2);
    Tensor ws = random_tensor({2, 3, 3}, rng);
    worst = std::max(worst, grad_check([&](const Tensor& t) { return weighted_sum(softmax(apply_mask(t, mask), -1), ws); }, scores));

    Tensor logits = random_tensor({4, 4}, rng, -2, 2);
    worst = std::max(worst, grad_check([&](const Tensor& t) { return cross_entropy(t, targets, 3, 0.1); }, logits));

    // Keep relu inputs away from the kink.
    Tensor x = random_tensor({6}, rng, 0.1, 1.0);
    for (std::size_t i = 0; i < 6; i += 2) x.mutable_data()[i] = -x.at(i);
    Tensor wr = random_tensor({6}, rng);
    worst = std::max(worst, grad_check([&](const Tensor& t) { return weighted_sum(relu(t), wr); }, x));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("cross_entropy: ignored rows do not count") {
  Tensor logits = Tensor::from({2, 3}, {1, 2, 3, 5, 5, 5});
  const std::vector<int> one = {2, 0};
  const std::vector<int> both = {2, 9};
  const double l1 = cross_entropy(logits, one, 9).item();
  const double l2 = cross_entropy(logits, both, 9).item();
  CHECK(l2 == doctest::Approx(-std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)))));
  CHECK(l1 != l2);
}

TEST_CASE("apply_mask: masked entries vanish after softmax") {
  Tensor s = Tensor::zeros({1, 3, 3});
  Tensor w = softmax(apply_mask(s, AttentionMask::causal(3)), -1);
  CHECK(w.at(1) < 1e-30);
  CHECK(w.at(2) < 1e-30);
  CHECK(w.at(0) == 1.0);
  CHECK_THROWS_AS(apply_mask(s, AttentionMask::causal(4)), Error);
}

TEST_CASE("dropout: deterministic given the seed, identity at p = 0") {
  Rng r1(7), r2(7);
  Tensor x = Tensor::full({100}, 1.0);
  Tensor a = dropout(x, 0.5, r1);
  Tensor b = dropout(x, 0.5, r2);
  CHECK(max_abs_diff(a.data(), b.data()) == 0.0);
  for (double v : a.data()) CHECK((v == 0.0 || v == 2.0));
  Rng r3(1);
  CHECK(dropout(x, 0.0, r3).node() == x.node());
}
