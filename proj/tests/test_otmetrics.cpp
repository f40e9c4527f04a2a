#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "weightflow/otmetrics.hpp"
#include "weightflow/rng.hpp"

using namespace wf;

namespace {

PointCloud random_cloud(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  PointCloud c;
  c.points = Tensor({n, d});
  for (auto& v : c.points.data) v = rng.normal();
  return c;
}

// brute-force over all n! assignments
double w2_brute(const PointCloud& a, const PointCloud& b) {
  const std::size_t n = a.size(), d = a.dim();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) {
        double diff = a.points.at(i, k) - b.points.at(perm[i], k);
        total += diff * diff;
      }
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / static_cast<double>(n));
}

}  // namespace

TEST_CASE("w2 of identical clouds is zero") {
  auto a = random_cloud(8, 3, 1);
  CHECK(w2_exact(a, a) == doctest::Approx(0.0));
}

TEST_CASE("w2 of singletons is the point distance") {
  PointCloud a, b;
  a.points = Tensor({1, 1}, {0.0});
  b.points = Tensor({1, 1}, {2.0});
  CHECK(w2_exact(a, b) == doctest::Approx(2.0));
}

TEST_CASE("w2 equals 6-point brute-force permutation minimum") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto a = random_cloud(6, 2, 10 + seed);
    auto b = random_cloud(6, 2, 50 + seed);
    CHECK(std::abs(w2_exact(a, b) - w2_brute(a, b)) < 1e-10);
  }
}

TEST_CASE("w2 triangle inequality on random triples") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto a = random_cloud(7, 3, 100 + seed);
    auto b = random_cloud(7, 3, 200 + seed);
    auto c = random_cloud(7, 3, 300 + seed);
    CHECK(w2_exact(a, c) <= w2_exact(a, b) + w2_exact(b, c) + 1e-9);
  }
}

TEST_CASE("w2 size mismatch is a contract error") {
  auto a = random_cloud(3, 2, 1);
  auto b = random_cloud(4, 2, 2);
  CHECK_THROWS_AS(w2_exact(a, b), contract_error);
}

TEST_CASE("action gap of exact gradient flow on quadratic is tiny") {
  // field v(x,t) = -x matches -grad of L(x) = |x|^2/2 exactly
  auto field = [](const Tensor& x, double) {
    Tensor v = x;
    for (auto& e : v.data) e = -e;
    return v;
  };
  auto grad_l = [](const Tensor& x) { return x; };
  auto x0 = random_cloud(16, 4, 5).points;
  CHECK(action_gap(field, grad_l, x0, 200) < 1e-4);
}

TEST_CASE("action gap of constant curve with zero grad is zero") {
  auto field = [](const Tensor& x, double) { return Tensor({x.rows(), x.cols()}); };
  auto grad_l = [](const Tensor& x) { return Tensor({x.rows(), x.cols()}); };
  auto x0 = random_cloud(4, 3, 6).points;
  CHECK(action_gap(field, grad_l, x0, 50) == doctest::Approx(0.0));
}

TEST_CASE("constant velocity offset c gives gap |c|^2/2") {
  // v = -grad L + c with grad L = 0 -> residual c at every point
  std::vector<double> c = {0.3, -0.4};
  auto field = [&](const Tensor& x, double) {
    Tensor v({x.rows(), x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t k = 0; k < 2; ++k) v.at(i, k) = c[k];
    return v;
  };
  auto grad_l = [](const Tensor& x) { return Tensor({x.rows(), x.cols()}); };
  auto x0 = random_cloud(8, 2, 7).points;
  double want = 0.5 * (0.3 * 0.3 + 0.4 * 0.4);
  CHECK(action_gap(field, grad_l, x0, 100) == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("action gap on sampled curves via central differences") {
  // curves x_t = x0 e^{-t} sampled on a fine grid; grad L(x) = x
  const std::size_t T = 401, D = 3, N = 6;
  Tensor curves({N, T, D});
  Rng rng(8);
  for (std::size_t ci = 0; ci < N; ++ci) {
    std::vector<double> x0(D);
    for (auto& v : x0) v = rng.normal();
    for (std::size_t j = 0; j < T; ++j) {
      double t = static_cast<double>(j) / (T - 1);
      for (std::size_t k = 0; k < D; ++k) curves.data[(ci * T + j) * D + k] = x0[k] * std::exp(-t);
    }
  }
  auto grad_l = [](const Tensor& x) { return x; };
  CHECK(action_gap_curves(curves, grad_l) < 1e-4);
}

TEST_CASE("grad_check on quadratic is near machine precision") {
  std::vector<double> p = {1.0, -2.0, 0.5};
  auto f = [](std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += 0.5 * v * v;
    return s;
  };
  CHECK(grad_check(f, p, p, 1e-5) < 1e-8);
}

TEST_CASE("grad_check uses absolute tolerance for zero gradients") {
  std::vector<double> p = {0.3, 0.7};
  std::vector<double> zero = {0.0, 0.0};
  auto f = [](std::span<const double>) { return 1.0; };  // constant
  CHECK(grad_check(f, p, zero, 1e-5) < 1e-9);
}
