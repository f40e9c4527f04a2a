#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "weightflow/metatrain.hpp"
#include "weightflow/models.hpp"
#include "weightflow/paths.hpp"

namespace wf {

// Memoryless noise schedule eps(t) = sigma_t * sqrt(2/((t+h)(1-t+h))); the
// stabilizer h keeps the square root bounded at the interval ends.
double memoryless_eps(double t, double sigma_t, double h_stab);

// Two-marginal score/velocity correspondence for the affine Gaussian path:
// s = beta (v - (alpha_dot/alpha) x) / (sigma^2 (alpha_dot beta / alpha - beta_dot)).
Tensor score_from_velocity(const Tensor& v, const Tensor& x, double t,
                           const GaussPathParams& p);
Tensor velocity_from_score(const Tensor& s, const Tensor& x, double t,
                           const GaussPathParams& p);

// Multi-marginal (piecewise-linear) analogues on the segment containing t,
// with segment-local progress s_t = (t - t_k)/(t_{k+1} - t_k), r_t = 1 - s_t.
double mm_eta(double t, const std::vector<double>& times, double sigma_t);
double mm_memoryless_eps(double t, const std::vector<double>& times, double sigma_t);
Tensor mm_score_from_velocity(const Tensor& v, const Tensor& x, double t,
                              const std::vector<double>& times, double sigma_t);
Tensor mm_velocity_from_score(const Tensor& s, const Tensor& x, double t,
                              const std::vector<double>& times, double sigma_t);

// Lean adjoint along a frozen Euler trajectory: a[T] = a1 and
// a[s-1] = a[s] + h * J(X_s, s h)^T a[s] with J the state Jacobian of the
// base field. Everything is detached data.
struct AdjointState {
  Tensor a;  // [(T+1) x D], index-aligned with the trajectory
  double h = 0.0;
};

AdjointState lean_adjoint_backward(const VelocityModel& base, const Tensor& trajectory,
                                   const Tensor& a1, double h);

// Batch reward loss: fills grad [M x D] with d(mean loss)/dX1 and returns the
// mean loss over the M endpoint weight vectors; seed selects the data batch.
using RewardFn = std::function<double(const Tensor& x1, Tensor& grad, std::uint64_t seed)>;

struct RewardSpec {
  RewardFn loss_grad;      // loss to minimize; reward = -loss
  double reward_lr = 1.5;
  double momentum = 0.01;
  double pad_reg_weight = 0.0;
  std::size_t pad_begin = 0;  // pad region [pad_begin, D) regularized when weight > 0
};

// Summed cross-entropy of the decoded classifier over an m-sample batch of ds.
RewardFn neg_ce_reward(const MlpSpec& arch, const SynthDataset& ds, std::size_t m);

struct FtConfig {
  double h = 0.025;            // 1/h must be integral
  std::size_t iterations = 150;
  std::size_t traj_batch = 8;  // M
  std::size_t grad_timesteps_last = 10;
  std::size_t grad_timesteps_uniform = 10;
  bool full_sum = false;  // regress on every grid point instead of subsampling
  std::size_t a1_batches = 3;
  double lr = 2e-5;
  double weight_decay = 5e-4;
  double eta_min = 1e-6;  // cosine schedule floor
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

struct AmStepResult {
  double am_loss = 0.0;
  double mean_reward = 0.0;
};

// One fine-tuning iteration: rollout, averaged starting adjoint with the
// momentum buffer, lean adjoint solve, and the subsampled regression loss with
// gradients accumulated into grad_params. Does not update v_ft.
AmStepResult adjoint_matching_step(const VelocityModel& v_ft, const VelocityModel& v_base,
                                   const SourceDist& src, const RewardSpec& reward,
                                   const FtConfig& cfg, std::uint64_t seed,
                                   std::span<double> grad_params, Tensor& momentum_buf);

struct FinetuneResult {
  VelocityModel v_ft;
  std::vector<AmStepResult> curve;  // one entry per iteration
};

FinetuneResult finetune(const VelocityModel& v_base, const SourceDist& src,
                        const RewardSpec& reward, const FtConfig& cfg);

}  // namespace wf
