#include "weightflow/adjoint.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "weightflow/errors.hpp"
#include "weightflow/rng.hpp"
#include "weightflow/weightcodec.hpp"

namespace wf {

double memoryless_eps(double t, double sigma_t, double h_stab) {
  double denom = (t + h_stab) * (1.0 - t + h_stab);
  if (denom <= 0.0) throw domain_error("memoryless_eps: t outside stabilized [0,1]");
  return sigma_t * std::sqrt(2.0 / denom);
}

namespace {

// eta_t = sigma^2 (alpha_dot beta / alpha - beta_dot) / beta, the factor
// relating v - (alpha_dot/alpha) x to the score.
double gauss_eta(double t, const GaussPathParams& p) {
  double a = p.alpha(t), b = p.beta(t);
  if (a <= 0.0) throw domain_error("score/velocity conversion: alpha(t) <= 0");
  if (b <= 0.0) throw domain_error("score/velocity conversion: beta(t) <= 0");
  return p.sigma * p.sigma * (p.alpha_dot(t) * b / a - p.beta_dot(t)) / b;
}

// Segment index k with t in [t_k, t_{k+1}); t == t_K maps to the last segment.
std::size_t segment_of(double t, const std::vector<double>& times) {
  if (times.size() < 2) throw contract_error("score/velocity conversion: need >= 2 marginals");
  if (t < times.front() || t > times.back())
    throw domain_error("score/velocity conversion: t outside the marginal grid");
  std::size_t k = 0;
  while (k + 2 < times.size() && t >= times[k + 1]) ++k;
  return k;
}

struct SegState {
  double ratio;  // s_dot / s
  double eta;    // sigma_t^2 ((s_dot/s) r - r_dot) / r
};

SegState mm_state(double t, const std::vector<double>& times, double sigma_t) {
  std::size_t k = segment_of(t, times);
  double dt = times[k + 1] - times[k];
  double s = (t - times[k]) / dt;
  double r = 1.0 - s;
  double s_dot = 1.0 / dt, r_dot = -s_dot;
  if (s <= 0.0) throw domain_error("score/velocity conversion: t at a marginal knot (s = 0)");
  if (r <= 0.0) throw domain_error("score/velocity conversion: t at a marginal knot (r = 0)");
  return {s_dot / s, sigma_t * sigma_t * ((s_dot / s) * r - r_dot) / r};
}

}  // namespace

Tensor score_from_velocity(const Tensor& v, const Tensor& x, double t,
                           const GaussPathParams& p) {
  if (v.rows() != x.rows() || v.cols() != x.cols())
    throw dimension_error("score_from_velocity: v/x shape mismatch");
  double ratio = p.alpha_dot(t) / p.alpha(t);
  double eta = gauss_eta(t, p);
  Tensor s({v.rows(), v.cols()});
  for (std::size_t i = 0; i < v.data.size(); ++i)
    s.data[i] = (v.data[i] - ratio * x.data[i]) / eta;
  return s;
}

Tensor velocity_from_score(const Tensor& s, const Tensor& x, double t,
                           const GaussPathParams& p) {
  if (s.rows() != x.rows() || s.cols() != x.cols())
    throw dimension_error("velocity_from_score: s/x shape mismatch");
  double ratio = p.alpha_dot(t) / p.alpha(t);
  double eta = gauss_eta(t, p);
  Tensor v({s.rows(), s.cols()});
  for (std::size_t i = 0; i < s.data.size(); ++i)
    v.data[i] = ratio * x.data[i] + eta * s.data[i];
  return v;
}

double mm_eta(double t, const std::vector<double>& times, double sigma_t) {
  return mm_state(t, times, sigma_t).eta;
}

double mm_memoryless_eps(double t, const std::vector<double>& times, double sigma_t) {
  return std::sqrt(2.0 * mm_eta(t, times, sigma_t));
}

Tensor mm_score_from_velocity(const Tensor& v, const Tensor& x, double t,
                              const std::vector<double>& times, double sigma_t) {
  if (v.rows() != x.rows() || v.cols() != x.cols())
    throw dimension_error("mm_score_from_velocity: v/x shape mismatch");
  SegState st = mm_state(t, times, sigma_t);
  Tensor s({v.rows(), v.cols()});
  for (std::size_t i = 0; i < v.data.size(); ++i)
    s.data[i] = (v.data[i] - st.ratio * x.data[i]) / st.eta;
  return s;
}

Tensor mm_velocity_from_score(const Tensor& s, const Tensor& x, double t,
                              const std::vector<double>& times, double sigma_t) {
  if (s.rows() != x.rows() || s.cols() != x.cols())
    throw dimension_error("mm_velocity_from_score: s/x shape mismatch");
  SegState st = mm_state(t, times, sigma_t);
  Tensor v({s.rows(), s.cols()});
  for (std::size_t i = 0; i < s.data.size(); ++i)
    v.data[i] = st.ratio * x.data[i] + st.eta * s.data[i];
  return v;
}

AdjointState lean_adjoint_backward(const VelocityModel& base, const Tensor& trajectory,
                                   const Tensor& a1, double h) {
  if (h <= 0.0 || h > 1.0) throw domain_error("lean_adjoint_backward: h must be in (0, 1]");
  std::size_t steps = static_cast<std::size_t>(std::llround(1.0 / h));
  if (std::abs(steps * h - 1.0) > 1e-9)
    throw contract_error("lean_adjoint_backward: 1/h must be integral");
  if (trajectory.rows() != steps + 1)
    throw contract_error("lean_adjoint_backward: trajectory rows must equal 1/h + 1");
  if (trajectory.cols() != base.state_dim || a1.cols() != base.state_dim || a1.rows() != 1)
    throw dimension_error("lean_adjoint_backward: state dimension mismatch");

  AdjointState out;
  out.h = h;
  out.a = Tensor({steps + 1, base.state_dim});
  std::copy(a1.data.begin(), a1.data.end(), out.a.data.begin() + steps * base.state_dim);
  std::vector<double> scratch;  // unused grad_params sink
  scratch.assign(base.mlp.param_count(), 0.0);

  Tensor x_s({1, base.state_dim}), a_s({1, base.state_dim}), jta({1, base.state_dim});
  for (std::size_t s = steps; s-- > 0;) {
    // a[s] = (I + h J(X_s, s h))^T a[s+1]: the exact chain rule through the
    // Euler update X_{s+1} = X_s + h v(X_s, s h).
    double t = static_cast<double>(s) * h;
    for (std::size_t d = 0; d < base.state_dim; ++d) {
      x_s.data[d] = trajectory.at(s, d);
      a_s.data[d] = out.a.at(s + 1, d);
    }
    ForwardCache cache;
    base.eval(x_s, {t}, nullptr, &cache);
    std::fill(scratch.begin(), scratch.end(), 0.0);
    base.backward(cache, a_s, scratch, &jta);
    for (std::size_t d = 0; d < base.state_dim; ++d)
      out.a.at(s, d) = a_s.data[d] + h * jta.data[d];
  }
  return out;
}

RewardFn neg_ce_reward(const MlpSpec& arch, const SynthDataset& ds, std::size_t m) {
  if (ds.val_inputs.rows() == 0) throw data_error("neg_ce_reward: empty validation split");
  return [arch, &ds, m](const Tensor& x1, Tensor& grad, std::uint64_t seed) -> double {
    if (x1.cols() < arch.param_count())
      throw dimension_error("neg_ce_reward: weight dim smaller than the architecture");
    grad = Tensor({x1.rows(), x1.cols()});
    Rng rng(seed);
    Tensor xb({m, ds.val_inputs.cols()});
    std::vector<int> yb(m);
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t j = rng.index(ds.val_inputs.rows());
      for (std::size_t c = 0; c < xb.cols(); ++c) xb.at(i, c) = ds.val_inputs.at(j, c);
      yb[i] = ds.val_labels[j];
    }
    double total = 0.0;
    std::vector<double> gparams(arch.param_count());
    for (std::size_t r = 0; r < x1.rows(); ++r) {
      std::span<const double> w(x1.data.data() + r * x1.cols(), arch.param_count());
      ForwardCache cache;
      Tensor logits = mlp_forward(arch, w, xb, &cache);
      Tensor glogits;
      double mean_ce = softmax_cross_entropy(logits, yb, &glogits);
      // summed loss over the batch
      for (double& g : glogits.data) g *= static_cast<double>(m);
      total += mean_ce * static_cast<double>(m);
      std::fill(gparams.begin(), gparams.end(), 0.0);
      mlp_backward(cache, w, glogits, gparams);
      for (std::size_t d = 0; d < gparams.size(); ++d) grad.at(r, d) = gparams[d];
    }
    return total / static_cast<double>(x1.rows());
  };
}

namespace {

// Timestep indices the regression loss is evaluated on: the last n_last grid
// points plus n_uniform drawn without replacement from the earlier ones.
std::vector<std::size_t> pick_timesteps(std::size_t steps, const FtConfig& cfg, Rng& rng) {
  std::vector<std::size_t> picked;
  if (cfg.full_sum || cfg.grad_timesteps_last + cfg.grad_timesteps_uniform >= steps) {
    picked.resize(steps);
    for (std::size_t s = 0; s < steps; ++s) picked[s] = s;
    return picked;
  }
  std::size_t cut = steps - cfg.grad_timesteps_last;
  std::vector<std::size_t> early(cut);
  for (std::size_t s = 0; s < cut; ++s) early[s] = s;
  for (std::size_t i = 0; i < cfg.grad_timesteps_uniform; ++i) {
    std::size_t j = i + rng.index(early.size() - i);
    std::swap(early[i], early[j]);
    picked.push_back(early[i]);
  }
  for (std::size_t s = cut; s < steps; ++s) picked.push_back(s);
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace

AmStepResult adjoint_matching_step(const VelocityModel& v_ft, const VelocityModel& v_base,
                                   const SourceDist& src, const RewardSpec& reward,
                                   const FtConfig& cfg, std::uint64_t seed,
                                   std::span<double> grad_params, Tensor& momentum_buf) {
  if (!(v_ft.mlp == v_base.mlp) || v_ft.state_dim != v_base.state_dim)
    throw contract_error("adjoint_matching_step: v_ft and v_base must share an architecture");
  if (src.dim != v_ft.state_dim)
    throw contract_error("adjoint_matching_step: source dimension mismatch");
  if (grad_params.size() != v_ft.params.size())
    throw dimension_error("adjoint_matching_step: grad span size mismatch");
  if (!reward.loss_grad) throw contract_error("adjoint_matching_step: reward callback unset");

  std::size_t steps = static_cast<std::size_t>(std::llround(1.0 / cfg.h));
  if (std::abs(steps * cfg.h - 1.0) > 1e-9)
    throw contract_error("adjoint_matching_step: 1/h must be integral");
  std::size_t M = cfg.traj_batch, D = v_ft.state_dim;

  // On-policy rollout of the current fine-tuned field from M source samples,
  // all states kept (detached).
  std::vector<Tensor> states(steps + 1);
  states[0] = src.sample(M, seed * 0x9e3779b9u + 17);
  std::vector<double> tvec(M);
  for (std::size_t s = 0; s < steps; ++s) {
    double t = static_cast<double>(s) * cfg.h;
    std::fill(tvec.begin(), tvec.end(), t);
    Tensor v = v_ft.eval(states[s], tvec, nullptr);
    states[s + 1] = states[s];
    for (std::size_t i = 0; i < v.data.size(); ++i)
      states[s + 1].data[i] += cfg.h * v.data[i];
    for (double e : states[s + 1].data)
      if (!std::isfinite(e))
        throw numeric_error("adjoint_matching_step: rollout diverged at step " +
                            std::to_string(s));
  }
  const Tensor& x1 = states[steps];

  // Starting adjoint: reward gradient averaged over a few data batches, run
  // through a heavy-ball buffer and scaled by the reward learning rate.
  Tensor g_avg({M, D});
  double loss_avg = 0.0;
  Tensor g;
  for (std::size_t b = 0; b < cfg.a1_batches; ++b) {
    loss_avg += reward.loss_grad(x1, g, seed * 6364136223846793005ULL + b);
    if (g.rows() != M) throw dimension_error("adjoint_matching_step: reward grad rows mismatch");
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t d = 0; d < g.cols() && d < D; ++d) g_avg.at(i, d) += g.at(i, d);
  }
  loss_avg /= static_cast<double>(cfg.a1_batches);
  for (double& e : g_avg.data) e /= static_cast<double>(cfg.a1_batches);
  if (reward.pad_reg_weight > 0.0) {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t d = reward.pad_begin; d < D; ++d)
        g_avg.at(i, d) += 2.0 * reward.pad_reg_weight * x1.at(i, d);
  }
  if (momentum_buf.rows() != M || momentum_buf.cols() != D) momentum_buf = Tensor({M, D});
  for (std::size_t i = 0; i < momentum_buf.data.size(); ++i)
    momentum_buf.data[i] = reward.momentum * momentum_buf.data[i] + g_avg.data[i];
  Tensor a({M, D});
  for (std::size_t i = 0; i < a.data.size(); ++i)
    a.data[i] = reward.reward_lr * momentum_buf.data[i];

  // Lean adjoint sweep, batched over the M trajectories.
  std::vector<Tensor> adjoints(steps + 1);
  adjoints[steps] = a;
  std::vector<double> sink(v_base.params.size());
  for (std::size_t s = steps; s-- > 0;) {
    double t = static_cast<double>(s) * cfg.h;
    std::fill(tvec.begin(), tvec.end(), t);
    ForwardCache cache;
    v_base.eval(states[s], tvec, nullptr, &cache);
    Tensor jta;
    std::fill(sink.begin(), sink.end(), 0.0);
    v_base.backward(cache, adjoints[s + 1], sink, &jta);
    adjoints[s] = adjoints[s + 1];
    for (std::size_t i = 0; i < jta.data.size(); ++i)
      adjoints[s].data[i] += cfg.h * jta.data[i];
  }

  // Regression of v_ft onto v_base - a over the subsampled timesteps.
  Rng rng(seed * 0x2545f4914f6cdd1dULL + 101);
  std::vector<std::size_t> picked = pick_timesteps(steps, cfg, rng);
  double am_loss = 0.0;
  for (std::size_t s : picked) {
    double t = static_cast<double>(s) * cfg.h;
    std::fill(tvec.begin(), tvec.end(), t);
    ForwardCache cache;
    Tensor vf = v_ft.eval(states[s], tvec, nullptr, &cache);
    Tensor vb = v_base.eval(states[s], tvec, nullptr);
    Tensor resid({M, D});
    for (std::size_t i = 0; i < resid.data.size(); ++i) {
      resid.data[i] = vf.data[i] - (vb.data[i] - adjoints[s].data[i]);
      am_loss += resid.data[i] * resid.data[i];
    }
    for (double& e : resid.data) e *= 2.0 / static_cast<double>(M);
    v_ft.backward(cache, resid, grad_params);
  }
  am_loss /= static_cast<double>(M);
  return {am_loss, -loss_avg};
}

FinetuneResult finetune(const VelocityModel& v_base, const SourceDist& src,
                        const RewardSpec& reward, const FtConfig& cfg) {
  FinetuneResult out;
  out.v_ft = v_base;
  OptimState opt = OptimState::adamw(cfg.lr, cfg.weight_decay);
  std::vector<double> grads(out.v_ft.params.size());
  Tensor momentum_buf;
  for (std::size_t n = 0; n < cfg.iterations; ++n) {
    std::fill(grads.begin(), grads.end(), 0.0);
    AmStepResult r = adjoint_matching_step(out.v_ft, v_base, src, reward, cfg,
                                           cfg.seed * 2654435761ULL + n, grads, momentum_buf);
    double norm = 0.0;
    for (double g : grads) norm += g * g;
    norm = std::sqrt(norm);
    if (!std::isfinite(norm)) throw numeric_error("finetune: non-finite gradient");
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
      double scale = cfg.grad_clip / norm;
      for (double& g : grads) g *= scale;
    }
    // Cosine-annealed learning rate with floor eta_min.
    double frac = cfg.iterations > 1
                      ? static_cast<double>(n) / static_cast<double>(cfg.iterations - 1)
                      : 0.0;
    opt.lr = cfg.eta_min +
             (cfg.lr - cfg.eta_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    optimizer_step(opt, out.v_ft.params, grads);
    out.curve.push_back(r);
  }
  return out;
}

}  // namespace wf
