#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "weightflow/models.hpp"
#include "weightflow/paths.hpp"
#include "weightflow/pretrain.hpp"

namespace wf {

enum class MetaKind { cfm, mmfm, jko };

// Flow-matching loss on a minibatch of independently coupled (x0, x1) pairs:
// x_t = (1-t) x0 + t x1 + sigma*xi, target u = x1 - x0; returns the mean over
// the batch of the squared residual summed over dims, accumulating exact
// parameter gradients.
double cfm_loss(const VelocityModel& model, const Tensor& x0, const Tensor& x1,
                const Tensor* context, const GaussPathParams& path, std::uint64_t seed,
                std::span<double> grad_params);

// Multi-marginal variant: knots[k] is [B x D], one row per batch element; the
// conditional path interpolates the knots piecewise-linearly and the target is
// the active segment's slope. With two knots at times {0,1} this matches
// cfm_loss draw-for-draw.
double mmfm_loss(const VelocityModel& model, const std::vector<Tensor>& knots,
                 const std::vector<double>& times, const Tensor* context,
                 const GaussPathParams& path, std::uint64_t seed, std::span<double> grad_params);

// Consecutive SGD checkpoint pairs for the potential loss; times/dts are in
// normalized training time.
struct JkoPairs {
  Tensor x;       // [B x D]
  Tensor x_next;  // [B x D]
  std::vector<double> times;
  std::vector<double> dts;
  std::string optimizer_tag = "sgd";
};

// mean over pairs of || grad_x V(x_t, t) + (x_{t+1} - x_t)/dt ||^2.
double jkonet_loss(const PotentialModel& model, const JkoPairs& pairs,
                   std::span<double> grad_params);

struct MetaTrainConfig {
  std::size_t epochs = 1000;
  std::size_t batch = 64;
  double lr = -1.0;  // negative -> kind default: 1e-4 cfm, 3e-4 mmfm, 5e-3 jko
  double weight_decay = 2e-6;
  std::size_t n_marginals = 9;  // K+1 knots for mmfm
  GaussPathParams path;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t time_embed_dim = 8;
  std::size_t context_dim = 0;
  SourceKind source = SourceKind::kaiming_uniform;
  bool resample_p0 = true;   // fresh source draws every batch
  bool ot_coupling = false;  // pair (x0, x1) by minimum-cost assignment
  bool marginal_noise = true;
  std::uint64_t seed = 0;
};

struct TrainedMeta {
  MetaKind kind = MetaKind::cfm;
  VelocityModel velocity;
  PotentialModel potential;
  std::vector<double> loss_curve;  // one entry per epoch
};

double default_meta_lr(MetaKind kind);

// contexts: one vector per zoo (required when cfg.context_dim > 0).
TrainedMeta train_meta(MetaKind kind, const std::vector<TrajectoryTensor>& zoos,
                       const MetaTrainConfig& cfg, const std::vector<Tensor>* contexts = nullptr);

}  // namespace wf
