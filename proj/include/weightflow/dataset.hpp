#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "weightflow/tensor.hpp"

namespace wf {

struct DatasetConfig {
  std::string name = "clusters";
  std::size_t n = 1000;        // total sample count (train + validation)
  std::size_t n_classes = 4;   // C
  std::size_t d_in = 2;
  double spread = 0.15;        // per-cluster Gaussian std
  double swirl = 0.0;          // radians of angular twist per unit radius
  double val_frac = 0.2;
  std::uint64_t seed = 0;
};

// Gaussian clusters on a circle in the first two input dims, optionally
// swirled so classes interleave and a linear classifier cannot separate them.
struct SynthDataset {
  std::string name;
  DatasetConfig config;
  Tensor train_inputs;  // [n_train x d_in]
  std::vector<int> train_labels;
  Tensor val_inputs;  // [n_val x d_in]
  std::vector<int> val_labels;

  std::size_t n_classes() const { return config.n_classes; }
};

// Level 0 is the identity; higher levels compose a rotation of the first two
// input dims, additive jitter, and random feature masking.
struct CorruptionLevel {
  int level = 0;
  double rotation_max_deg = 0.0;
  double jitter_scale = 0.0;
  double blur_sigma = 0.0;  // smoothing toward the per-sample mean feature
  double erase_prob = 0.0;

  static CorruptionLevel preset(int level);
};

SynthDataset make_dataset(const DatasetConfig& config);

SynthDataset corrupt(const SynthDataset& ds, const CorruptionLevel& lvl, std::uint64_t seed);

}  // namespace wf
