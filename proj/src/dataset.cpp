#include "weightflow/dataset.hpp"

#include <cmath>
#include <numbers>

#include "weightflow/errors.hpp"
#include "weightflow/rng.hpp"

namespace wf {

namespace {

void fill_split(Tensor& inputs, std::vector<int>& labels, std::size_t n,
                const DatasetConfig& c, Rng& rng) {
  inputs = Tensor({n, c.d_in});
  labels.resize(n);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    int cls = static_cast<int>(rng.index(c.n_classes));
    labels[i] = cls;
    // cluster center on the unit circle, then local Gaussian scatter
    double base = two_pi * cls / static_cast<double>(c.n_classes);
    double px = std::cos(base) + rng.normal(0.0, c.spread);
    double py = std::sin(base) + rng.normal(0.0, c.spread);
    // swirl: rotate each point by an angle growing with its radius, which
    // wraps the clusters into interleaving arcs
    double r = std::hypot(px, py);
    double a = c.swirl * r;
    double ca = std::cos(a), sa = std::sin(a);
    inputs.at(i, 0) = ca * px - sa * py;
    inputs.at(i, 1) = sa * px + ca * py;
    for (std::size_t j = 2; j < c.d_in; ++j) inputs.at(i, j) = rng.normal(0.0, c.spread);
  }
}

}  // namespace

SynthDataset make_dataset(const DatasetConfig& config) {
  if (config.n_classes < 2) throw config_error("make_dataset: need at least 2 classes");
  if (config.n < config.n_classes)
    throw config_error("make_dataset: n must be at least the class count");
  if (config.d_in < 2) throw config_error("make_dataset: d_in must be at least 2");
  if (config.val_frac < 0.0 || config.val_frac >= 1.0)
    throw config_error("make_dataset: val_frac must lie in [0, 1)");

  SynthDataset ds;
  ds.name = config.name;
  ds.config = config;
  std::size_t n_val = static_cast<std::size_t>(config.val_frac * config.n);
  std::size_t n_train = config.n - n_val;
  Rng rng(config.seed);
  fill_split(ds.train_inputs, ds.train_labels, n_train, config, rng);
  fill_split(ds.val_inputs, ds.val_labels, n_val == 0 ? 1 : n_val, config, rng);
  return ds;
}

CorruptionLevel CorruptionLevel::preset(int level) {
  switch (level) {
    case 0:
      return {0, 0.0, 0.0, 0.0, 0.0};
    case 1:
      return {1, 15.0, 0.0, 0.0, 0.0};
    case 2:
      return {2, 15.0, 0.10, 0.0, 0.0};
    case 3:
      return {3, 45.0, 0.20, 0.0, 0.25};
    default:
      throw config_error("CorruptionLevel: level must be in 0..3");
  }
}

SynthDataset corrupt(const SynthDataset& ds, const CorruptionLevel& lvl, std::uint64_t seed) {
  if (lvl.level < 0 || lvl.level > 3) throw config_error("corrupt: level must be in 0..3");
  if (lvl.level == 0) return ds;

  SynthDataset out = ds;
  Rng rng(seed);
  auto apply = [&](Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    for (std::size_t i = 0; i < n; ++i) {
      if (lvl.rotation_max_deg != 0.0) {
        // rotate the first two dims by the max angle with a random sign
        double a = lvl.rotation_max_deg * std::numbers::pi / 180.0;
        if (rng.bernoulli(0.5)) a = -a;
        double ca = std::cos(a), sa = std::sin(a);
        double px = x.at(i, 0), py = x.at(i, 1);
        x.at(i, 0) = ca * px - sa * py;
        x.at(i, 1) = sa * px + ca * py;
      }
      if (lvl.jitter_scale > 0.0)
        for (std::size_t j = 0; j < d; ++j) x.at(i, j) += rng.normal(0.0, lvl.jitter_scale);
      if (lvl.blur_sigma > 0.0) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double w = std::min(1.0, lvl.blur_sigma);
        for (std::size_t j = 0; j < d; ++j) x.at(i, j) = (1.0 - w) * x.at(i, j) + w * mean;
      }
      if (lvl.erase_prob > 0.0)
        for (std::size_t j = 0; j < d; ++j)
          if (rng.bernoulli(lvl.erase_prob)) x.at(i, j) = 0.0;
    }
  };
  apply(out.train_inputs);
  apply(out.val_inputs);
  return out;
}

}  // namespace wf
