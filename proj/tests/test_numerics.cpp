#include <doctest.h>

#include <cmath>

#include "coevo/numerics.hpp"
#include "coevo/rng.hpp"

using namespace coevo;
using numerics::Tensor;

TEST_CASE("channel_stats basic values") {
  Tensor x({1, 2, 2}, {1, 3, 5, 7});
  auto st = numerics::channel_stats(x);
  CHECK(st.mean[0] == doctest::Approx(4.0));
  CHECK(st.var[0] == doctest::Approx(5.0));
}

TEST_CASE("channel_stats constant tensor") {
  Tensor x({3, 2, 4});
  for (auto& v : x.values) v = 2.0;
  auto st = numerics::channel_stats(x);
  for (int c = 0; c < 3; ++c) {
    CHECK(st.mean[c] == doctest::Approx(2.0));
    CHECK(st.var[c] == doctest::Approx(0.0));
  }
}

TEST_CASE("channel_stats per channel") {
  Tensor x({2, 1, 2}, {0, 0, 1, -1});
  auto st = numerics::channel_stats(x);
  CHECK(st.mean[0] == doctest::Approx(0.0));
  CHECK(st.mean[1] == doctest::Approx(0.0));
  CHECK(st.var[0] == doctest::Approx(0.0));
  CHECK(st.var[1] == doctest::Approx(1.0));
}

TEST_CASE("channel_stats rejects degenerate input") {
  Tensor empty({0, 2, 2});
  CHECK_THROWS_WITH_AS(numerics::channel_stats(empty), "degenerate input",
                       std::invalid_argument);
  Tensor flat({4});
  CHECK_THROWS_AS(numerics::channel_stats(flat), std::invalid_argument);
}

TEST_CASE("cosine similarity known values") {
  std::vector<double> e1{1, 0}, e2{0, 1}, diag{1, 1};
  CHECK(numerics::cosine_similarity(e1, e1) == doctest::Approx(1.0));
  CHECK(numerics::cosine_similarity(e1, e2) == doctest::Approx(0.0));
  CHECK(numerics::cosine_similarity(diag, e1) == doctest::Approx(0.7071).epsilon(1e-3));
}

TEST_CASE("cosine similarity rejects zero norm") {
  std::vector<double> z{0, 0}, a{1, 2};
  CHECK_THROWS_WITH_AS(numerics::cosine_similarity(z, a), "zero-norm vector",
                       std::invalid_argument);
}

TEST_CASE("cosine similarity symmetric and scale invariant") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    const double s = numerics::cosine_similarity(a, b);
    CHECK(numerics::cosine_similarity(b, a) == doctest::Approx(s).epsilon(1e-12));
    const double alpha = 0.01 + rng.uniform() * 10.0;
    const double beta = 0.01 + rng.uniform() * 10.0;
    std::vector<double> sa = a, sb = b;
    for (auto& v : sa) v *= alpha;
    for (auto& v : sb) v *= beta;
    CHECK(numerics::cosine_similarity(sa, sb) == doctest::Approx(s).epsilon(1e-9));
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("softmax cross entropy known values") {
  std::vector<double> one{3.7};
  CHECK(numerics::softmax_cross_entropy(one, 0) == doctest::Approx(0.0));
  std::vector<double> two{1, 0};
  CHECK(numerics::softmax_cross_entropy(two, 0) ==
        doctest::Approx(std::log(1.0 + std::exp(-1.0))));
  std::vector<double> uniform{0, 0, 0};
  CHECK(numerics::softmax_cross_entropy(uniform, 2) == doctest::Approx(std::log(3.0)));
}

TEST_CASE("softmax cross entropy bounds and uniform identity") {
  Rng rng(3);
  for (int n = 1; n <= 8; ++n) {
    std::vector<double> logits(n);
    for (auto& v : logits) v = rng.normal() * 3.0;
    for (int t = 0; t < n; ++t) CHECK(numerics::softmax_cross_entropy(logits, t) >= 0.0);
    std::vector<double> flat(n, 1.234);
    CHECK(numerics::softmax_cross_entropy(flat, 0) == doctest::Approx(std::log(n)));
  }
  std::vector<double> l{0, 1};
  CHECK_THROWS_AS(numerics::softmax_cross_entropy(l, 2), std::out_of_range);
  CHECK_THROWS_AS(numerics::softmax_cross_entropy(l, -1), std::out_of_range);
}

TEST_CASE("softmax is stable for large logits") {
  std::vector<double> logits{1000.0, 999.0}, probs(2);
  numerics::softmax(logits, probs);
  CHECK(std::isfinite(probs[0]));
  CHECK(probs[0] + probs[1] == doctest::Approx(1.0));
}

TEST_CASE("grad_check on quadratic is near exact") {
  std::vector<double> point{0.3, -1.2, 2.0};
  auto f = [](std::span<const double> w) {
    double acc = 0;
    for (double x : w) acc += x * x;
    return acc;
  };
  auto g = [](std::span<const double> w) {
    std::vector<double> out(w.begin(), w.end());
    for (auto& x : out) x *= 2;
    return out;
  };
  auto report = numerics::grad_check(f, g, point, 1e-5);
  CHECK(report.max_rel_error < 1e-6);
  double worst = 0;
  for (double e : report.per_parameter_errors) worst = std::max(worst, e);
  CHECK(report.max_rel_error == doctest::Approx(worst));
}

TEST_CASE("grad_check flags a wrong gradient") {
  std::vector<double> point{1.0, 2.0};
  auto f = [](std::span<const double> w) { return w[0] * w[0] + w[1]; };
  auto wrong = [](std::span<const double> w) {
    return std::vector<double>{w[0], 1.0};  // missing factor 2
  };
  auto report = numerics::grad_check(f, wrong, point, 1e-5);
  CHECK(report.max_rel_error > 0.1);
}

TEST_CASE("grad_check rejects non-finite objectives") {
  std::vector<double> point{0.0};
  auto f = [](std::span<const double> w) { return std::log(w[0]); };
  auto g = [](std::span<const double> w) { return std::vector<double>{1.0 / w[0]}; };
  CHECK_THROWS_AS(numerics::grad_check(f, g, point, 1e-5), std::runtime_error);
}
