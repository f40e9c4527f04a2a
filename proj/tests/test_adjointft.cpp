#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "weightflow/adjoint.hpp"
#include "weightflow/dataset.hpp"
#include "weightflow/errors.hpp"
#include "weightflow/flowgen.hpp"
#include "weightflow/rng.hpp"

using namespace wf;

namespace {

Tensor random_mat(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Tensor m({r, c});
  Rng rng(seed);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

// Single linear layer v(x, t) = A x (time features ignored).
VelocityModel linear_field(const Tensor& A) {
  std::size_t d = A.rows();
  auto m = VelocityModel::make(d, {}, 4, 0, 0);
  std::fill(m.params.begin(), m.params.end(), 0.0);
  const std::size_t in = m.mlp.in_dim();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) m.params[m.mlp.weight_offset(0) + i * in + j] = A.at(i, j);
  return m;
}

VelocityModel constant_field(std::size_t d, double c) {
  auto m = VelocityModel::make(d, {}, 4, 0, 0);
  std::fill(m.params.begin(), m.params.end(), 0.0);
  for (std::size_t j = 0; j < d; ++j) m.params[m.mlp.bias_offset(0) + j] = c;
  return m;
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("memoryless schedule: value, symmetry, stabilized bound") {
  CHECK(memoryless_eps(0.5, 1e-3, 0.0) == doctest::Approx(1e-3 * std::sqrt(8.0)).epsilon(1e-12));
  for (double t : {0.1, 0.25, 0.4})
    CHECK(memoryless_eps(t, 1.0, 0.0) ==
          doctest::Approx(memoryless_eps(1.0 - t, 1.0, 0.0)).epsilon(1e-12));
  // With the h = 0.025 stabilizer the schedule stays bounded by 10 sigma.
  for (double t = 0.0; t <= 1.0 + 1e-12; t += 0.025)
    CHECK(memoryless_eps(t, 1.0, 0.025) <= 10.0);
}

TEST_CASE("score_from_velocity at t=0.5, sigma=1 matches hand substitution") {
  Tensor v = random_mat(2, 3, 11), x = random_mat(2, 3, 12);
  GaussPathParams p;
  p.sigma = 1.0;
  Tensor s = score_from_velocity(v, x, 0.5, p);
  for (std::size_t i = 0; i < s.data.size(); ++i)
    CHECK(s.data[i] == doctest::Approx(0.25 * (v.data[i] - 2.0 * x.data[i])).epsilon(1e-12));
}

TEST_CASE("velocity proportional to x has zero score") {
  Tensor x = random_mat(3, 4, 21);
  double t = 0.3;
  GaussPathParams p;
  Tensor v({3, 4});
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = (1.0 / t) * x.data[i];
  Tensor s = score_from_velocity(v, x, t, p);
  for (double e : s.data) CHECK(std::abs(e) < 1e-9);
}

TEST_CASE("score/velocity conversions are mutual inverses") {
  GaussPathParams p;
  for (double t : {0.05, 0.3, 0.72, 0.95}) {
    Tensor v = random_mat(4, 5, 31 + static_cast<std::uint64_t>(t * 100));
    Tensor x = random_mat(4, 5, 131 + static_cast<std::uint64_t>(t * 100));
    Tensor back = velocity_from_score(score_from_velocity(v, x, t, p), x, t, p);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      CHECK(back.data[i] == doctest::Approx(v.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("conversion rejects the singular endpoints") {
  Tensor v = random_mat(1, 2, 41), x = random_mat(1, 2, 42);
  GaussPathParams p;
  CHECK_THROWS_AS(score_from_velocity(v, x, 0.0, p), domain_error);
  CHECK_THROWS_AS(velocity_from_score(v, x, 1.0, p), domain_error);
}

TEST_CASE("multi-marginal conversion with times (0,1) reduces to the two-marginal one") {
  std::vector<double> grid{0.0, 1.0};
  GaussPathParams p;
  p.sigma = 0.7;
  for (double t : {0.15, 0.5, 0.85}) {
    Tensor v = random_mat(3, 4, 51), x = random_mat(3, 4, 52);
    Tensor s_mm = mm_score_from_velocity(v, x, t, grid, p.sigma);
    Tensor s_cf = score_from_velocity(v, x, t, p);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      CHECK(s_mm.data[i] == doctest::Approx(s_cf.data[i]).epsilon(1e-12));
    // eta agrees with the two-marginal factor sigma^2 (adot b/a - bdot)/b
    double eta_cf = p.sigma * p.sigma * ((1.0 / t) * (1.0 - t) + 1.0) / (1.0 - t);
    CHECK(mm_eta(t, grid, p.sigma) == doctest::Approx(eta_cf).epsilon(1e-12));
  }
}

TEST_CASE("multi-marginal round-trip on a K=3 grid") {
  std::vector<double> grid{0.0, 0.2, 0.55, 1.0};
  for (double t : {0.05, 0.2001, 0.4, 0.6, 0.99}) {
    Tensor v = random_mat(2, 6, 61), x = random_mat(2, 6, 62);
    Tensor back = mm_velocity_from_score(mm_score_from_velocity(v, x, t, grid, 0.3), x, t, grid, 0.3);
    for (std::size_t i = 0; i < v.data.size(); ++i)
      CHECK(back.data[i] == doctest::Approx(v.data[i]).epsilon(1e-12));
    CHECK(std::isfinite(mm_eta(t, grid, 0.3)));
    CHECK(mm_memoryless_eps(t, grid, 0.3) ==
          doctest::Approx(std::sqrt(2.0 * mm_eta(t, grid, 0.3))).epsilon(1e-12));
  }
}

TEST_CASE("multi-marginal conversion rejects knot times") {
  std::vector<double> grid{0.0, 0.5, 1.0};
  Tensor v = random_mat(1, 2, 71), x = random_mat(1, 2, 72);
  CHECK_THROWS_AS(mm_score_from_velocity(v, x, 0.5, grid, 0.3), domain_error);
  CHECK_THROWS_AS(mm_score_from_velocity(v, x, 0.0, grid, 0.3), domain_error);
  CHECK_THROWS_AS(mm_eta(1.2, grid, 0.3), domain_error);
}

TEST_CASE("zero Jacobian keeps the lean adjoint constant") {
  auto m = constant_field(3, 0.4);
  GenConfig gc;
  gc.steps = 40;
  Tensor traj = integrate(m, Tensor::vec({0.1, -0.2, 0.3}), nullptr, gc);
  Tensor a1({1, 3});
  a1.data = {1.0, -2.0, 0.5};
  AdjointState st = lean_adjoint_backward(m, traj, a1, 1.0 / 40.0);
  for (std::size_t s = 0; s <= 40; ++s)
    for (std::size_t d = 0; d < 3; ++d)
      CHECK(st.a.at(s, d) == doctest::Approx(a1.data[d]).epsilon(1e-14));
}

TEST_CASE("linear field: first backward step is (I + hA^T) a1") {
  Tensor A = random_mat(3, 3, 81, 0.5);
  auto m = linear_field(A);
  GenConfig gc;
  gc.steps = 40;
  double h = 1.0 / 40.0;
  Tensor traj = integrate(m, Tensor::vec({0.3, 0.1, -0.4}), nullptr, gc);
  Tensor a1({1, 3});
  a1.data = {0.7, -0.1, 1.3};
  AdjointState st = lean_adjoint_backward(m, traj, a1, h);
  for (std::size_t d = 0; d < 3; ++d) {
    double want = a1.data[d];
    for (std::size_t i = 0; i < 3; ++i) want += h * A.at(i, d) * a1.data[i];
    CHECK(st.a.at(39, d) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("adjoint gradient matches finite differences through the rollout") {
  const std::size_t d = 3;
  auto m = VelocityModel::make(d, {8}, 4, 0, 7);
  for (double& p : m.params) p *= 0.5;  // keep the rollout tame
  std::vector<double> x0{0.4, -0.3, 0.2};

  // reward r(X1) = 0.5 ||X1||^2; a1 = X1
  auto rollout_reward = [&](const std::vector<double>& start, std::size_t steps) {
    GenConfig gc;
    gc.steps = steps;
    Tensor traj = integrate(m, Tensor::vec(start), nullptr, gc);
    double r = 0.0;
    for (std::size_t j = 0; j < d; ++j) r += 0.5 * traj.at(steps, j) * traj.at(steps, j);
    return r;
  };

  for (auto [h, tol] : {std::pair{0.025, 1e-3}, std::pair{0.005, 1e-4}}) {
    std::size_t steps = static_cast<std::size_t>(std::llround(1.0 / h));
    GenConfig gc;
    gc.steps = steps;
    Tensor traj = integrate(m, Tensor::vec(x0), nullptr, gc);
    Tensor a1({1, d});
    for (std::size_t j = 0; j < d; ++j) a1.data[j] = traj.at(steps, j);
    AdjointState st = lean_adjoint_backward(m, traj, a1, h);

    std::vector<double> adj(d), fd(d);
    for (std::size_t j = 0; j < d; ++j) adj[j] = st.a.at(0, j);
    const double eps = 1e-5;
    for (std::size_t j = 0; j < d; ++j) {
      auto hi = x0, lo = x0;
      hi[j] += eps;
      lo[j] -= eps;
      fd[j] = (rollout_reward(hi, steps) - rollout_reward(lo, steps)) / (2.0 * eps);
    }
    CHECK(rel_err(adj, fd) < tol);
  }
}

TEST_CASE("lean adjoint rejects a mismatched grid") {
  auto m = constant_field(2, 0.0);
  Tensor traj({10, 2});
  Tensor a1({1, 2});
  CHECK_THROWS_AS(lean_adjoint_backward(m, traj, a1, 0.025), contract_error);
}

TEST_CASE("zero reward gradient leaves the fine-tuned model at the base") {
  const std::size_t d = 4;
  auto base = VelocityModel::make(d, {8}, 4, 0, 3);
  SourceDist src;
  src.kind = SourceKind::std_gauss;
  src.dim = d;
  RewardSpec rw;
  rw.loss_grad = [](const Tensor& x1, Tensor& grad, std::uint64_t) {
    grad = Tensor({x1.rows(), x1.cols()});
    return 0.0;
  };
  FtConfig cfg;
  cfg.h = 0.05;
  cfg.iterations = 10;
  cfg.traj_batch = 4;
  cfg.weight_decay = 0.0;  // isolate the regression loss: grads are exactly zero
  auto res = finetune(base, src, rw, cfg);
  double dist = 0.0;
  for (std::size_t i = 0; i < base.params.size(); ++i)
    dist = std::max(dist, std::abs(res.v_ft.params[i] - base.params[i]));
  CHECK(dist == 0.0);
  for (const auto& pt : res.curve) CHECK(pt.am_loss == doctest::Approx(0.0));
}

TEST_CASE("one optimizer update on a quadratic reward decreases the AM loss") {
  const std::size_t d = 3;
  auto base = constant_field(d, 0.2);
  auto ft = base;
  SourceDist src;
  src.kind = SourceKind::std_gauss;
  src.dim = d;
  RewardSpec rw;
  std::vector<double> c{1.0, -0.5, 0.25};
  rw.loss_grad = [&c](const Tensor& x1, Tensor& grad, std::uint64_t) {
    grad = Tensor({x1.rows(), x1.cols()});
    double total = 0.0;
    for (std::size_t i = 0; i < x1.rows(); ++i)
      for (std::size_t j = 0; j < x1.cols(); ++j) {
        double r = x1.at(i, j) - c[j];
        total += 0.5 * r * r;
        grad.at(i, j) = r;
      }
    return total / static_cast<double>(x1.rows());
  };
  FtConfig cfg;
  cfg.h = 0.05;
  cfg.traj_batch = 4;
  cfg.lr = 1e-2;
  cfg.full_sum = true;

  std::vector<double> grads(ft.params.size(), 0.0);
  Tensor buf;
  auto r1 = adjoint_matching_step(ft, base, src, rw, cfg, 99, grads, buf);
  OptimState opt = OptimState::adamw(cfg.lr, 0.0);
  optimizer_step(opt, ft.params, grads);
  std::fill(grads.begin(), grads.end(), 0.0);
  Tensor buf2;  // fresh buffer so both steps see identical a1
  auto r2 = adjoint_matching_step(ft, base, src, rw, cfg, 99, grads, buf2);
  CHECK(r2.am_loss < r1.am_loss);
}

TEST_CASE("zero iterations return the base model verbatim") {
  auto base = VelocityModel::make(3, {6}, 4, 0, 5);
  SourceDist src;
  src.kind = SourceKind::std_gauss;
  src.dim = 3;
  RewardSpec rw;
  rw.loss_grad = [](const Tensor& x1, Tensor& grad, std::uint64_t) {
    grad = Tensor({x1.rows(), x1.cols()});
    return 1.0;
  };
  FtConfig cfg;
  cfg.iterations = 0;
  cfg.h = 0.25;
  auto res = finetune(base, src, rw, cfg);
  CHECK(res.v_ft.params == base.params);
  CHECK(res.curve.empty());
}

TEST_CASE("fine-tuning a zero field toward a quadratic reward raises the reward") {
  const std::size_t d = 4;
  auto base = constant_field(d, 0.0);
  SourceDist src;
  src.kind = SourceKind::std_gauss;
  src.dim = d;
  std::vector<double> c{0.8, -0.6, 0.4, -0.2};
  RewardSpec rw;
  rw.reward_lr = 1.0;
  rw.loss_grad = [&c](const Tensor& x1, Tensor& grad, std::uint64_t) {
    grad = Tensor({x1.rows(), x1.cols()});
    double total = 0.0;
    for (std::size_t i = 0; i < x1.rows(); ++i)
      for (std::size_t j = 0; j < x1.cols(); ++j) {
        double r = x1.at(i, j) - c[j];
        total += 0.5 * r * r;
        grad.at(i, j) = r;
      }
    return total / static_cast<double>(x1.rows());
  };
  FtConfig cfg;
  cfg.h = 0.05;
  cfg.iterations = 250;
  cfg.traj_batch = 8;
  cfg.lr = 5e-3;
  cfg.seed = 2;
  auto res = finetune(base, src, rw, cfg);
  REQUIRE(res.curve.size() == cfg.iterations);
  // mean reward (recorded as -loss of the rollout endpoints) must improve
  double first = res.curve.front().mean_reward;
  double last = res.curve.back().mean_reward;
  CHECK(last > first + 0.5);
  // and the endpoint of a fresh rollout of v_ft sits closer to c than x0 does
  GenConfig gc;
  gc.steps = 20;
  Tensor x0 = src.sample(16, 777);
  Tensor endpoints = integrate_batch(res.v_ft, x0, nullptr, gc);
  double before = 0.0, after = 0.0;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      before += (x0.at(i, j) - c[j]) * (x0.at(i, j) - c[j]);
      after += (endpoints.at(i, j) - c[j]) * (endpoints.at(i, j) - c[j]);
    }
  CHECK(after < 0.5 * before);
}

TEST_CASE("neg_ce reward gradient matches finite differences of the summed loss") {
  DatasetConfig dc;
  dc.n = 120;
  dc.seed = 5;
  SynthDataset ds = make_dataset(dc);
  MlpSpec arch({2, 5, 4}, Activation::tanh);
  auto fn = neg_ce_reward(arch, ds, 16);
  std::size_t D = arch.param_count() + 3;  // some padding
  Tensor x1 = random_mat(2, D, 91, 0.4);
  Tensor grad;
  fn(x1, grad, 12345);
  const double eps = 1e-6;
  Rng pick(1);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t r = pick.index(2), j = pick.index(arch.param_count());
    Tensor hi = x1, lo = x1;
    hi.at(r, j) += eps;
    lo.at(r, j) -= eps;
    Tensor g_unused;
    // same seed -> same batch; losses are means over rows, so scale by rows
    double fd = (fn(hi, g_unused, 12345) - fn(lo, g_unused, 12345)) * 2.0 / (2.0 * eps);
    CHECK(grad.at(r, j) == doctest::Approx(fd).epsilon(1e-4));
  }
  // padding columns carry no data gradient
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = arch.param_count(); j < D; ++j) CHECK(grad.at(r, j) == 0.0);
}
