#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "weightflow/dataset.hpp"
#include "weightflow/models.hpp"
#include "weightflow/weightcodec.hpp"

namespace wf {

struct GenConfig {
  std::size_t steps = 100;
  std::uint64_t seed = 0;
  bool decode = false;  // states live in VAE latent space
  std::size_t record_every = 1;
};

// Euler rollout of dx = v(x,t) dt over t in {0, h, ..., 1-h}, h = 1/steps.
// Returns the full trajectory [(steps+1) x D] including both endpoints.
Tensor integrate(const VelocityModel& model, const Tensor& x0, const Tensor* context,
                 const GenConfig& cfg);

// Same rollout for a batch of starts [B x D]; returns the endpoints [B x D].
Tensor integrate_batch(const VelocityModel& model, const Tensor& x0, const Tensor* context,
                       const GenConfig& cfg);

// JKO(k) generation: x_{j+1} = x_j - tau * grad_x V(x_j, t_j), tau = 1/k,
// t_j = j/k. Returns [(k+1) x D].
Tensor jko_generate(const PotentialModel& potential, const Tensor& x0, std::size_t k_steps);

// (validation accuracy, validation cross-entropy) of a weight vector's base
// classifier on the dataset.
std::pair<double, double> eval_weights(const WeightVec& w, const SynthDataset& ds);

struct TrajPoint {
  std::size_t step = 0;
  double t = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

// Base-model validation loss along the generation trajectory, averaged over
// the source samples [n x D]; recorded every cfg.record_every steps plus the
// endpoint. When codec is given the states are decoded from latent space.
std::vector<TrajPoint> trajectory_losses(const VelocityModel& model, const Tensor& sources,
                                         const MlpSpec& arch, const SynthDataset& ds,
                                         const GenConfig& cfg, const Tensor* context = nullptr,
                                         const VaeModel* codec = nullptr);

// Columns: step,t,val_loss,val_acc.
std::string trajectory_csv(const std::vector<TrajPoint>& series);

}  // namespace wf
