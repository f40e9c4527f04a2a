#include "weightflow/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "weightflow/errors.hpp"
#include "weightflow/rng.hpp"

namespace wf {

double accuracy(const MlpSpec& spec, std::span<const double> params, const Tensor& inputs,
                const std::vector<int>& labels) {
  Tensor logits = mlp_forward(spec, params, inputs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    hits += static_cast<int>(best) == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

TrajectoryTensor pretrain_and_checkpoint(const SynthDataset& ds, const MlpSpec& arch,
                                         const PretrainConfig& cfg) {
  const std::size_t n_train = ds.train_inputs.rows();
  const std::size_t batch = std::min(cfg.batch_size, n_train);
  const std::size_t iters_per_epoch = (n_train + batch - 1) / batch;
  if (cfg.saves_per_epoch > iters_per_epoch)
    throw config_error("pretrain: saves_per_epoch exceeds iterations per epoch");
  if (cfg.save_epochs == 0 || cfg.save_epochs > cfg.n_epochs)
    throw config_error("pretrain: save_epochs must be in 1..n_epochs");
  if (arch.in_dim() != ds.train_inputs.cols() || arch.out_dim() < ds.n_classes())
    throw dimension_error("pretrain: architecture does not match the dataset");

  // evenly spaced save epochs, always including the last
  std::vector<bool> is_save_epoch(cfg.n_epochs, false);
  for (std::size_t s = 0; s < cfg.save_epochs; ++s) {
    std::size_t e = cfg.save_epochs == 1
                        ? cfg.n_epochs - 1
                        : s * (cfg.n_epochs - 1) / (cfg.save_epochs - 1);
    is_save_epoch[e] = true;
  }

  std::vector<double> params = kaiming_init(arch, InitMode::uniform, cfg.seed);
  std::vector<double> grads(params.size(), 0.0);
  OptimState optim = cfg.optim;

  TrajectoryTensor out;
  out.arch = arch;
  out.optimizer = optim.kind == OptimKind::sgd ? "sgd" : "adamw";
  out.lr = optim.lr;
  out.dataset_tag = ds.name;
  out.data = Tensor({cfg.save_epochs, cfg.saves_per_epoch, arch.param_count()});

  Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  std::size_t save_row = 0, iteration = 0;
  for (std::size_t epoch = 0; epoch < cfg.n_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    for (std::size_t it = 0; it < iters_per_epoch; ++it) {
      std::size_t lo = it * batch;
      std::size_t hi = std::min(lo + batch, n_train);
      Tensor xb({hi - lo, ds.train_inputs.cols()});
      std::vector<int> yb(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        for (std::size_t j = 0; j < xb.cols(); ++j)
          xb.at(i - lo, j) = ds.train_inputs.at(order[i], j);
        yb[i - lo] = ds.train_labels[order[i]];
      }

      ForwardCache cache;
      Tensor logits = mlp_forward(arch, params, xb, &cache);
      Tensor grad_logits;
      double loss = softmax_cross_entropy(logits, yb, &grad_logits);
      if (!std::isfinite(loss)) throw training_error("pretrain: loss diverged (non-finite)");
      std::fill(grads.begin(), grads.end(), 0.0);
      mlp_backward(cache, params, grad_logits, grads);
      optimizer_step(optim, params, grads);
      ++iteration;

      if (is_save_epoch[epoch] && it < cfg.saves_per_epoch) {
        double* dst = &out.data.data[save_row * arch.param_count()];
        std::copy(params.begin(), params.end(), dst);
        out.times.push_back(iteration);
        ++save_row;
      }
    }
  }
  out.final_val_acc = accuracy(arch, params, ds.val_inputs, ds.val_labels);
  return out;
}

Tensor sample_trajectories(const TrajectoryTensor& X, std::size_t K, bool add_noise,
                           std::uint64_t seed, bool with_replacement) {
  const std::size_t rows = X.n_epochs() * X.saves_per_epoch();
  const std::size_t S = X.saves_per_epoch(), D = X.dim();
  const std::size_t need = K * S;
  if (K == 0) throw sampling_error("sample_trajectories: K must be positive");
  if (!with_replacement && need > rows)
    throw sampling_error("sample_trajectories: K*S exceeds available rows without replacement");

  Rng rng(seed);
  std::vector<std::size_t> idx;
  idx.reserve(need);
  if (with_replacement) {
    for (std::size_t i = 0; i < need; ++i) idx.push_back(rng.index(rows));
  } else {
    std::vector<std::size_t> pool(rows);
    std::iota(pool.begin(), pool.end(), 0);
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    idx.assign(pool.begin(), pool.begin() + need);
  }
  std::sort(idx.begin(), idx.end());

  Tensor out({K, S, D});
  const double noise_std = std::sqrt(1e-3);
  for (std::size_t r = 0; r < need; ++r) {
    const double* src = &X.data.data[idx[r] * D];
    double* dst = &out.data[r * D];
    for (std::size_t j = 0; j < D; ++j)
      dst[j] = src[j] + (add_noise ? rng.normal(0.0, noise_std) : 0.0);
  }
  return out;
}

}  // namespace wf
