#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "weightflow/errors.hpp"
#include "weightflow/flowgen.hpp"
#include "weightflow/metatrain.hpp"
#include "weightflow/pretrain.hpp"
#include "weightflow/rng.hpp"
#include "weightflow/shiftdetect.hpp"

using namespace wf;

namespace {

Tensor random_mat(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Tensor m({r, c});
  Rng rng(seed);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

// Classifier with zero weights: every row maps to the bias logits.
std::vector<double> bias_classifier(const MlpSpec& arch, const std::vector<double>& logits) {
  std::vector<double> w(arch.param_count(), 0.0);
  for (std::size_t c = 0; c < arch.out_dim(); ++c) w[arch.bias_offset(0) + c] = logits[c];
  return w;
}

}  // namespace

TEST_CASE("dce_loss closed forms") {
  // two classes: -log(y_1) when f = 0
  for (double p : {0.1, 0.5, 0.9})
    CHECK(dce_loss({p, 1.0 - p}, 0) == doctest::Approx(-std::log(1.0 - p)).epsilon(1e-12));
  // three classes, hand substitution
  CHECK(dce_loss({0.2, 0.3, 0.5}, 0) ==
        doctest::Approx(-0.5 * (std::log(0.3) + std::log(0.5))).epsilon(1e-12));
  CHECK(dce_loss({0.2, 0.3, 0.5}, 0) == doctest::Approx(0.9485599924).epsilon(1e-8));
  // uniform prediction gives log N for any disagreement label
  for (std::size_t n : {2u, 3u, 7u}) {
    std::vector<double> u(n, 1.0 / static_cast<double>(n));
    for (int f = 0; f < static_cast<int>(n); ++f)
      CHECK(dce_loss(u, f) == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-12));
  }
}

TEST_CASE("dce_loss decreases as mass moves off the f label") {
  // move mass from class 0 (= f) to class 1 along a ray
  double prev = dce_loss({0.8, 0.1, 0.1}, 0);
  for (double m : {0.6, 0.4, 0.2, 0.05}) {
    double cur = dce_loss({m, 0.9 - m, 0.1}, 0);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("cdc_loss with empty Q is the mean cross-entropy on P") {
  MlpSpec arch({2, 5, 3}, Activation::tanh);
  auto g = kaiming_init(arch, InitMode::normal, 1);
  auto f = kaiming_init(arch, InitMode::normal, 2);
  Tensor px = random_mat(6, 2, 3);
  std::vector<int> py{0, 1, 2, 0, 1, 2};
  Tensor qx({0, 2});
  double ce = softmax_cross_entropy(mlp_forward(arch, g, px), py);
  CHECK(cdc_loss(arch, g, f, px, py, qx, 5.0) == doctest::Approx(ce).epsilon(1e-12));
  // lambda = 0 ignores Q entirely but keeps the |P|+|Q| denominator
  Tensor qx2 = random_mat(4, 2, 4);
  double with_q = cdc_loss(arch, g, f, px, py, qx2, 0.0);
  CHECK(with_q == doctest::Approx(ce * 6.0 / 10.0).epsilon(1e-12));
}

TEST_CASE("cdc_loss matches a straight-line recomputation") {
  MlpSpec arch({3, 4}, Activation::tanh);
  auto g = kaiming_init(arch, InitMode::normal, 11);
  auto f = kaiming_init(arch, InitMode::normal, 12);
  Tensor px = random_mat(3, 3, 13);
  std::vector<int> py{2, 0, 3};
  Tensor qx = random_mat(2, 3, 14);
  double lambda = 1.7;

  double want = 0.0;
  {
    Tensor probs = softmax(mlp_forward(arch, g, px));
    for (std::size_t i = 0; i < 3; ++i) want += -std::log(probs.at(i, py[i]));
  }
  {
    Tensor fp = softmax(mlp_forward(arch, f, qx));
    Tensor gp = softmax(mlp_forward(arch, g, qx));
    for (std::size_t i = 0; i < 2; ++i) {
      int fl = 0;
      for (int c = 1; c < 4; ++c)
        if (fp.at(i, c) > fp.at(i, fl)) fl = c;
      double acc = 0.0;
      for (int c = 0; c < 4; ++c)
        if (c != fl) acc += std::log(gp.at(i, c));
      want += lambda * acc / (1.0 - 4.0);
    }
  }
  want /= 5.0;
  CHECK(cdc_loss(arch, g, f, px, py, qx, lambda) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("cdc_loss rejects empty P and Q") {
  MlpSpec arch({2, 3}, Activation::tanh);
  auto w = kaiming_init(arch, InitMode::normal, 1);
  Tensor empty({0, 2});
  CHECK_THROWS_AS(cdc_loss(arch, w, w, empty, {}, empty, 1.0), contract_error);
}

TEST_CASE("neg_cdc_reward gradient matches finite differences") {
  DatasetConfig dc;
  dc.n = 150;
  dc.seed = 9;
  SynthDataset ds = make_dataset(dc);
  MlpSpec arch({2, 5, 4}, Activation::tanh);
  auto f = kaiming_init(arch, InitMode::normal, 21);
  Tensor qx = random_mat(12, 2, 22, 0.8);
  auto fn = neg_cdc_reward(arch, f, ds, qx, 2.5, 16);

  std::size_t D = arch.param_count() + 4;
  Tensor x1 = random_mat(2, D, 23, 0.4);
  Tensor grad;
  double base = fn(x1, grad, 777);
  CHECK(std::isfinite(base));
  const double eps = 1e-6;
  Rng pick(3);
  for (int trial = 0; trial < 12; ++trial) {
    std::size_t r = pick.index(2), j = pick.index(arch.param_count());
    Tensor hi = x1, lo = x1;
    hi.at(r, j) += eps;
    lo.at(r, j) -= eps;
    Tensor unused;
    double fd = (fn(hi, unused, 777) - fn(lo, unused, 777)) * 2.0 / (2.0 * eps);
    CHECK(grad.at(r, j) == doctest::Approx(fd).epsilon(1e-4));
  }
}

TEST_CASE("entropy statistic closed forms") {
  MlpSpec arch({1, 3}, Activation::tanh);
  Tensor x({2, 1});
  // agreeing near-one-hot classifiers: p log p vanishes at the corners
  auto onehot0 = bias_classifier(arch, {60.0, 0.0, 0.0});
  auto ent = entropy_stat(arch, onehot0, onehot0, x);
  for (double e : ent) CHECK(e == doctest::Approx(0.0).epsilon(1e-10));
  // both uniform: sum p log p = -log C
  auto uni = bias_classifier(arch, {0.0, 0.0, 0.0});
  ent = entropy_stat(arch, uni, uni, x);
  for (double e : ent) CHECK(e == doctest::Approx(-std::log(3.0)).epsilon(1e-12));
  // disagreeing one-hots in 2 classes: mixture (1/2, 1/2) -> -log 2
  MlpSpec arch2({1, 2}, Activation::tanh);
  auto a = bias_classifier(arch2, {60.0, 0.0});
  auto b = bias_classifier(arch2, {0.0, 60.0});
  ent = entropy_stat(arch2, a, b, x);
  for (double e : ent) CHECK(e == doctest::Approx(-std::log(2.0)).epsilon(1e-10));
}

TEST_CASE("ks_two_sample closed forms and symmetry") {
  auto same = ks_two_sample({0.1, 0.4, 0.7}, {0.1, 0.4, 0.7});
  CHECK(same.d == 0.0);
  CHECK(same.p_value == 1.0);

  auto half = ks_two_sample({0.0, 1.0}, {0.5, 1.5});
  CHECK(half.d == doctest::Approx(0.5).epsilon(1e-12));

  auto disjoint = ks_two_sample({0.0, 0.1, 0.2}, {1.0, 1.1, 1.2});
  CHECK(disjoint.d == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(disjoint.p_value < 0.3);

  Rng rng(5);
  std::vector<double> a(30), b(40);
  for (double& v : a) v = rng.normal();
  for (double& v : b) v = rng.normal(0.5);
  auto ab = ks_two_sample(a, b);
  auto ba = ks_two_sample(b, a);
  CHECK(ab.d == ba.d);
  CHECK(ab.p_value == ba.p_value);
  CHECK(ab.d >= 0.0);
  CHECK(ab.d <= 1.0);
}

TEST_CASE("disagreement test quantile arithmetic") {
  std::vector<double> null{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  CHECK_FALSE(disagreement_test(null, 0.89));
  CHECK(disagreement_test(null, 0.91));
  CHECK_FALSE(disagreement_test(null, -1.0));
  CHECK(disagreement_test(null, 2.0));
  CHECK_THROWS_AS(disagreement_test({0.5}, 0.6), contract_error);
}

TEST_CASE("aggregate statistics") {
  auto all = aggregate({0.0, 0.1, 0.2}, {0.9, 0.95, 1.0});
  CHECK(all.tpr_at_5 == 1.0);
  CHECK(all.auroc == 1.0);

  auto tie = aggregate({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0});
  CHECK(tie.auroc == doctest::Approx(0.5).epsilon(1e-12));

  auto sep = aggregate({1.0, 2.0, 3.0}, {4.0, 5.0, 6.0});
  CHECK(sep.auroc == 1.0);
}

TEST_CASE("kappa scaling matches the stated reference points") {
  CdcConfig cfg = CdcConfig::make();
  cfg.q_size = 20;
  CHECK(cfg.lambda() == doctest::Approx(32.0 / 21.0).epsilon(1e-12));
  cfg.q_size = 10;  // "kappa = 16 when |Q| = 10"
  CHECK(cfg.lambda() == doctest::Approx(16.0 / 11.0).epsilon(1e-12));
  cfg.q_size = 50;  // "kappa = 80 when |Q| = 50"
  CHECK(cfg.lambda() == doctest::Approx(80.0 / 51.0).epsilon(1e-12));
  cfg.kappa = 4.0;
  cfg.q_size = 20;
  CHECK(cfg.lambda() == doctest::Approx(4.0 / 21.0).epsilon(1e-12));
}

TEST_CASE("meta-detectron separates a corrupted Q from the null at desk scale") {
  DatasetConfig dc;
  dc.n = 800;
  dc.n_classes = 4;
  dc.seed = 3;
  SynthDataset ds = make_dataset(dc);
  MlpSpec arch({2, 8, 4}, Activation::relu);

  std::vector<TrajectoryTensor> zoos;
  for (int z = 0; z < 6; ++z) {
    PretrainConfig pc;
    pc.n_epochs = 40;
    pc.save_epochs = 1;
    pc.saves_per_epoch = 6;
    pc.batch_size = 64;
    pc.seed = 100 + z;
    zoos.push_back(pretrain_and_checkpoint(ds, arch, pc));
  }
  MetaTrainConfig mc;
  mc.epochs = 2000;
  mc.lr = 1e-3;
  mc.hidden = {64, 64};
  mc.seed = 4;
  TrainedMeta meta = train_meta(MetaKind::cfm, zoos, mc);
  SourceDist src{SourceKind::kaiming_uniform, arch, arch.param_count()};

  CdcConfig cfg = CdcConfig::make();
  cfg.q_size = 50;
  cfg.p_size = 64;
  cfg.ft.h = 0.05;
  cfg.ft.iterations = 60;
  cfg.ft.traj_batch = 4;
  cfg.ft.lr = 2e-4;
  cfg.seeds.clear();
  for (std::uint64_t s = 1; s <= 20; ++s) cfg.seeds.push_back(s);

  SynthDataset shifted = corrupt(ds, CorruptionLevel::preset(3), 77);
  ShiftReport rep_shift = meta_detectron(meta.velocity, src, arch, ds, shifted.val_inputs, cfg);
  ShiftReport rep_null = meta_detectron(meta.velocity, src, arch, ds, ds.val_inputs, cfg);

  // strong corruption is detected by both statistics
  CHECK(rep_shift.auroc_dar > 0.8);
  CHECK(rep_shift.auroc_entropy > 0.9);
  // calibration: the null fires rarely and carries no ranking signal
  CHECK(rep_null.tpr_at_5 <= 0.15);
  CHECK(rep_null.auroc_dar > 0.3);
  CHECK(rep_null.auroc_dar < 0.7);
  // in-distribution accuracy is preserved through fine-tuning (mean over seeds)
  double before = 0.0, after = 0.0;
  for (const auto& st : rep_shift.per_seed) {
    before += st.acc_before;
    after += st.acc_after;
    CHECK(st.phi_q >= 0.0);
    CHECK(st.phi_q <= 1.0);
    CHECK(st.phi_p_star >= 0.0);
    CHECK(st.phi_p_star <= 1.0);
  }
  before /= static_cast<double>(rep_shift.per_seed.size());
  after /= static_cast<double>(rep_shift.per_seed.size());
  CHECK(std::abs(before - after) < 0.015);
}
