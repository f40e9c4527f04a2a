#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "weightflow/errors.hpp"
#include "weightflow/flowgen.hpp"
#include "weightflow/metatrain.hpp"
#include "weightflow/rng.hpp"

using namespace wf;

namespace {

// Single linear layer with zero weights: output is the last-layer bias.
VelocityModel constant_field(std::size_t d, const std::vector<double>& c) {
  auto m = VelocityModel::make(d, {}, 4, 0, 0);
  std::fill(m.params.begin(), m.params.end(), 0.0);
  for (std::size_t j = 0; j < d; ++j) m.params[m.mlp.bias_offset(0) + j] = c[j];
  return m;
}

// v(x, t) = -x via a single linear layer reading only the state columns.
VelocityModel negative_identity(std::size_t d) {
  auto m = VelocityModel::make(d, {}, 4, 0, 0);
  std::fill(m.params.begin(), m.params.end(), 0.0);
  const std::size_t in = m.mlp.in_dim();
  for (std::size_t j = 0; j < d; ++j) m.params[m.mlp.weight_offset(0) + j * in + j] = -1.0;
  return m;
}

}  // namespace

TEST_CASE("zero field gives a constant trajectory") {
  auto m = constant_field(3, {0.0, 0.0, 0.0});
  GenConfig cfg;
  cfg.steps = 10;
  Tensor traj = integrate(m, Tensor::vec({1.0, -2.0, 0.5}), nullptr, cfg);
  REQUIRE(traj.rows() == 11);
  for (std::size_t s = 0; s <= 10; ++s) {
    CHECK(traj.at(s, 0) == 1.0);
    CHECK(traj.at(s, 1) == -2.0);
    CHECK(traj.at(s, 2) == 0.5);
  }
}

TEST_CASE("constant field translates by exactly c") {
  auto m = constant_field(2, {0.75, -0.25});
  GenConfig cfg;
  cfg.steps = 4;
  Tensor traj = integrate(m, Tensor::vec({1.0, 1.0}), nullptr, cfg);
  CHECK(traj.at(4, 0) == doctest::Approx(1.75).epsilon(1e-14));
  CHECK(traj.at(4, 1) == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("linear decay field matches the closed form at 1000 steps") {
  auto m = negative_identity(2);
  GenConfig cfg;
  cfg.steps = 1000;
  Tensor traj = integrate(m, Tensor::vec({2.0, -3.0}), nullptr, cfg);
  double target = std::exp(-1.0);
  CHECK(std::abs(traj.at(1000, 0) / 2.0 - target) / target < 0.002);
  CHECK(std::abs(traj.at(1000, 1) / -3.0 - target) / target < 0.002);
}

TEST_CASE("euler error decays at first order in h") {
  auto m = negative_identity(1);
  std::vector<double> log_h, log_e;
  for (std::size_t steps : {10, 20, 40, 80, 160}) {
    GenConfig cfg;
    cfg.steps = steps;
    Tensor traj = integrate(m, Tensor::vec({1.0}), nullptr, cfg);
    double err = std::abs(traj.at(steps, 0) - std::exp(-1.0));
    log_h.push_back(std::log(1.0 / steps));
    log_e.push_back(std::log(err));
  }
  // least-squares slope of log-error vs log-h
  double mh = 0, me = 0;
  for (std::size_t i = 0; i < log_h.size(); ++i) {
    mh += log_h[i];
    me += log_e[i];
  }
  mh /= log_h.size();
  me /= log_e.size();
  double num = 0, den = 0;
  for (std::size_t i = 0; i < log_h.size(); ++i) {
    num += (log_h[i] - mh) * (log_e[i] - me);
    den += (log_h[i] - mh) * (log_h[i] - mh);
  }
  double slope = num / den;
  CHECK(slope > 0.8);
  CHECK(slope < 1.2);
}

TEST_CASE("generation is deterministic") {
  auto m = VelocityModel::make(3, {8}, 4, 0, 9);
  GenConfig cfg;
  cfg.steps = 20;
  Tensor a = integrate(m, Tensor::vec({0.1, 0.2, 0.3}), nullptr, cfg);
  Tensor b = integrate(m, Tensor::vec({0.1, 0.2, 0.3}), nullptr, cfg);
  CHECK(a.data == b.data);
}

TEST_CASE("zero potential keeps jko generation constant") {
  auto p = PotentialModel::make(2, {4}, 4, 0);
  std::fill(p.params.begin(), p.params.end(), 0.0);
  Tensor traj = jko_generate(p, Tensor::vec({1.0, 2.0}), 3);
  for (std::size_t j = 0; j <= 3; ++j) {
    CHECK(traj.at(j, 0) == 1.0);
    CHECK(traj.at(j, 1) == 2.0);
  }
}

TEST_CASE("linear potential descends in exact constant steps") {
  auto p = PotentialModel::make(2, {}, 4, 3);  // V = w.x + b on the state slice
  double w0 = p.params[0], w1 = p.params[1];
  Tensor traj = jko_generate(p, Tensor::vec({1.0, 1.0}), 4);
  for (std::size_t j = 0; j <= 4; ++j) {
    CHECK(traj.at(j, 0) == doctest::Approx(1.0 - 0.25 * j * w0).epsilon(1e-12));
    CHECK(traj.at(j, 1) == doctest::Approx(1.0 - 0.25 * j * w1).epsilon(1e-12));
  }
}

TEST_CASE("each jko step matches a finite-difference gradient of the potential") {
  auto p = PotentialModel::make(2, {6}, 4, 17);
  const std::size_t k = 5;
  Tensor traj = jko_generate(p, Tensor::vec({0.4, -0.7}), k);
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> t{static_cast<double>(j) / k};
    for (std::size_t d = 0; d < 2; ++d) {
      Tensor xp({1, 2}), xm({1, 2});
      for (std::size_t c = 0; c < 2; ++c) xp.at(0, c) = xm.at(0, c) = traj.at(j, c);
      xp.at(0, d) += 1e-6;
      xm.at(0, d) -= 1e-6;
      double g = (p.value(xp, t)[0] - p.value(xm, t)[0]) / 2e-6;
      CHECK(traj.at(j + 1, d) == doctest::Approx(traj.at(j, d) - g / k).epsilon(1e-6));
    }
  }
}

TEST_CASE("a hand-built separating classifier scores accuracy 1.0") {
  DatasetConfig c;
  c.n = 200;
  c.n_classes = 2;
  c.spread = 0.0;
  auto ds = make_dataset(c);
  MlpSpec arch({2, 2}, Activation::relu);
  // logits = (x0, -x0): classifies cluster (1,0) vs (-1,0)
  std::vector<double> params(arch.param_count(), 0.0);
  params[arch.weight_offset(0) + 0] = 1.0;
  params[arch.weight_offset(0) + 2] = -1.0;
  WeightVec w = flatten_pad(arch, params, arch.param_count());
  auto [acc, loss] = eval_weights(w, ds);
  CHECK(acc == 1.0);
  CHECK(loss < 1.0);
}

TEST_CASE("uniform logits score chance accuracy") {
  DatasetConfig c;
  c.n = 4000;
  c.n_classes = 4;
  c.seed = 5;
  auto ds = make_dataset(c);
  MlpSpec arch({2, 4}, Activation::relu);
  std::vector<double> params(arch.param_count(), 0.0);
  WeightVec w = flatten_pad(arch, params, arch.param_count());
  auto [acc, loss] = eval_weights(w, ds);
  CHECK(std::abs(acc - 0.25) < 0.05);
  CHECK(loss == doctest::Approx(std::log(4.0)));
}

TEST_CASE("eval_weights reproduces the trainer's reported validation accuracy") {
  DatasetConfig c;
  c.n = 1000;
  c.n_classes = 4;
  c.seed = 2;
  auto ds = make_dataset(c);
  MlpSpec arch({2, 16, 4}, Activation::relu);
  PretrainConfig cfg;
  cfg.n_epochs = 20;
  cfg.save_epochs = 1;
  auto traj = pretrain_and_checkpoint(ds, arch, cfg);
  std::vector<double> params(traj.data.data.end() - arch.param_count(), traj.data.data.end());
  WeightVec w = flatten_pad(arch, params, arch.param_count() + 7);
  auto [acc, loss] = eval_weights(w, ds);
  CHECK(acc == traj.final_val_acc);

  // padding is invisible to evaluation
  WeightVec w2 = flatten_pad(arch, params, arch.param_count());
  CHECK(eval_weights(w2, ds) == eval_weights(w, ds));
}

TEST_CASE("eval_weights rejects a mismatched architecture") {
  DatasetConfig c;
  c.n = 100;
  c.n_classes = 4;
  auto ds = make_dataset(c);
  MlpSpec arch({3, 4}, Activation::relu);
  WeightVec w = flatten_pad(arch, std::vector<double>(arch.param_count(), 0.0),
                            arch.param_count());
  CHECK_THROWS_AS(eval_weights(w, ds), contract_error);
}

TEST_CASE("non-finite states abort integration with the step index") {
  auto m = constant_field(1, {1e308});
  GenConfig cfg;
  cfg.steps = 8;
  CHECK_THROWS_AS(integrate(m, Tensor::vec({1e308}), nullptr, cfg), numeric_error);
}

TEST_CASE("record_every = steps reports exactly start and end") {
  auto m = constant_field(2, {0.0, 0.0});
  DatasetConfig c;
  c.n = 100;
  c.n_classes = 2;
  auto ds = make_dataset(c);
  MlpSpec arch({2, 2}, Activation::relu);
  // state dim 2 < param_count 6 would mismatch; use a field over the padded dim
  auto mv = constant_field(arch.param_count(), std::vector<double>(arch.param_count(), 0.0));
  Tensor sources({2, arch.param_count()});
  GenConfig cfg;
  cfg.steps = 10;
  cfg.record_every = 10;
  auto series = trajectory_losses(mv, sources, arch, ds, cfg);
  REQUIRE(series.size() == 2);
  CHECK(series[0].step == 0);
  CHECK(series[1].step == 10);
  CHECK(series[1].t == doctest::Approx(1.0));
}

TEST_CASE("a trained flow lowers base-model validation loss along the trajectory") {
  DatasetConfig c;
  c.n = 600;
  c.n_classes = 2;
  c.seed = 3;
  auto ds = make_dataset(c);
  MlpSpec arch({2, 4, 2}, Activation::relu);
  PretrainConfig pc;
  pc.n_epochs = 30;
  pc.save_epochs = 1;
  pc.saves_per_epoch = 7;
  pc.batch_size = 64;
  pc.seed = 1;
  auto zoo = pretrain_and_checkpoint(ds, arch, pc);

  MetaTrainConfig mc;
  mc.epochs = 500;
  mc.lr = 1e-3;
  mc.hidden = {32, 32};
  mc.seed = 4;
  auto trained = train_meta(MetaKind::cfm, {zoo}, mc);

  SourceDist src{SourceKind::kaiming_uniform, arch, arch.param_count()};
  Tensor sources = src.sample(8, 77);
  GenConfig cfg;
  cfg.steps = 50;
  cfg.record_every = 5;
  auto series = trajectory_losses(trained.velocity, sources, arch, ds, cfg);
  CHECK(series.back().val_loss < series.front().val_loss);

  std::string csv = trajectory_csv(series);
  CHECK(csv.rfind("step,t,val_loss,val_acc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + static_cast<long>(series.size()));
}
