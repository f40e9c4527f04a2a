#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "weightflow/dataset.hpp"
#include "weightflow/mlp.hpp"
#include "weightflow/tensor.hpp"

namespace wf {

// Checkpoints from one pretraining run: save-epoch-major, with S consecutive
// post-update iterates per save epoch. Flattening the first two axes gives
// rows sorted by training iteration.
struct TrajectoryTensor {
  Tensor data;                      // [n_save_epochs x saves_per_epoch x D]
  std::vector<std::size_t> times;   // per-row training-iteration index (1-based)
  MlpSpec arch;
  std::string optimizer;  // "sgd" or "adamw"
  double lr = 0.0;
  double final_val_acc = 0.0;
  std::string dataset_tag;

  std::size_t n_epochs() const { return data.shape[0]; }
  std::size_t saves_per_epoch() const { return data.shape[1]; }
  std::size_t dim() const { return data.shape[2]; }
};

struct PretrainConfig {
  std::size_t n_epochs = 50;
  std::size_t batch_size = 64;
  OptimState optim = OptimState::sgd(0.1);
  std::size_t save_epochs = 10;      // evenly spaced over training
  std::size_t saves_per_epoch = 1;   // first S iterations of each save epoch
  std::uint64_t seed = 0;
};

TrajectoryTensor pretrain_and_checkpoint(const SynthDataset& ds, const MlpSpec& arch,
                                         const PretrainConfig& cfg);

double accuracy(const MlpSpec& spec, std::span<const double> params, const Tensor& inputs,
                const std::vector<int>& labels);

// Flatten X to [N*S, D], draw K*S row indices uniformly, sort ascending,
// reshape to [K, S, D]; optional per-entry noise with variance 1e-3.
Tensor sample_trajectories(const TrajectoryTensor& X, std::size_t K, bool add_noise,
                           std::uint64_t seed, bool with_replacement = true);

}  // namespace wf
