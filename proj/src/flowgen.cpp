#include "weightflow/flowgen.hpp"

#include <cmath>
#include <sstream>

#include "weightflow/errors.hpp"
#include "weightflow/mlp.hpp"

namespace wf {

namespace {

void check_finite(const Tensor& x, std::size_t step) {
  if (!x.all_finite())
    throw numeric_error("integrate: non-finite state at step " + std::to_string(step));
}

Tensor euler_states(const VelocityModel& model, const Tensor& x0, const Tensor* context,
                    std::size_t steps, bool keep_all) {
  if (steps < 1) throw config_error("integrate: steps must be >= 1");
  const std::size_t B = x0.rows(), D = x0.cols();
  if (D != model.state_dim) throw dimension_error("integrate: x0 dim mismatch");
  const double h = 1.0 / static_cast<double>(steps);

  Tensor out = keep_all ? Tensor({steps + 1, B * D}) : Tensor();
  Tensor x = x0;
  if (keep_all) std::copy(x.data.begin(), x.data.end(), out.data.begin());
  std::vector<double> ts(B);
  for (std::size_t s = 0; s < steps; ++s) {
    std::fill(ts.begin(), ts.end(), static_cast<double>(s) * h);
    Tensor v = model.eval(x, ts, context);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += h * v.data[i];
    check_finite(x, s + 1);
    if (keep_all) std::copy(x.data.begin(), x.data.end(), &out.data[(s + 1) * B * D]);
  }
  return keep_all ? out : x;
}

}  // namespace

Tensor integrate(const VelocityModel& model, const Tensor& x0, const Tensor* context,
                 const GenConfig& cfg) {
  Tensor start({1, x0.numel()}, x0.data);
  Tensor ctx;
  if (context != nullptr) ctx = Tensor({1, context->numel()}, context->data);
  Tensor flat = euler_states(model, start, context ? &ctx : nullptr, cfg.steps, true);
  return Tensor({cfg.steps + 1, x0.numel()}, std::move(flat.data));
}

Tensor integrate_batch(const VelocityModel& model, const Tensor& x0, const Tensor* context,
                       const GenConfig& cfg) {
  return euler_states(model, x0, context, cfg.steps, false);
}

Tensor jko_generate(const PotentialModel& potential, const Tensor& x0, std::size_t k_steps) {
  if (k_steps < 1) throw config_error("jko_generate: k must be >= 1");
  const std::size_t D = x0.numel();
  if (D != potential.state_dim) throw dimension_error("jko_generate: x0 dim mismatch");
  const double tau = 1.0 / static_cast<double>(k_steps);

  Tensor out({k_steps + 1, D});
  Tensor x({1, D}, x0.data);
  std::copy(x.data.begin(), x.data.end(), out.data.begin());
  for (std::size_t j = 0; j < k_steps; ++j) {
    std::vector<double> t{static_cast<double>(j) * tau};
    Tensor g = potential.grad_x(x, t);
    for (std::size_t i = 0; i < D; ++i) x.data[i] -= tau * g.data[i];
    check_finite(x, j + 1);
    std::copy(x.data.begin(), x.data.end(), &out.data[(j + 1) * D]);
  }
  return out;
}

std::pair<double, double> eval_weights(const WeightVec& w, const SynthDataset& ds) {
  if (w.arch.in_dim() != ds.val_inputs.cols() || w.arch.out_dim() < ds.n_classes())
    throw contract_error("eval_weights: architecture does not match the dataset");
  std::vector<double> params = unflatten(w);
  Tensor logits = mlp_forward(w.arch, params, ds.val_inputs);
  double loss = softmax_cross_entropy(logits, ds.val_labels);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    hits += static_cast<int>(best) == ds.val_labels[i];
  }
  return {static_cast<double>(hits) / static_cast<double>(logits.rows()), loss};
}

std::vector<TrajPoint> trajectory_losses(const VelocityModel& model, const Tensor& sources,
                                         const MlpSpec& arch, const SynthDataset& ds,
                                         const GenConfig& cfg, const Tensor* context,
                                         const VaeModel* codec) {
  if (cfg.record_every < 1) throw config_error("trajectory_losses: record_every must be >= 1");
  if (cfg.decode && codec == nullptr)
    throw config_error("trajectory_losses: decode requested without a codec");
  const std::size_t B = sources.rows(), D = sources.cols();
  const double h = 1.0 / static_cast<double>(cfg.steps);

  auto record = [&](std::size_t step, const Tensor& x) {
    Tensor w = cfg.decode ? vae_decode(*codec, x) : x;
    double loss = 0.0, acc = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      WeightVec wv;
      wv.arch = arch;
      wv.values.assign(&w.data[b * w.cols()], &w.data[b * w.cols()] + w.cols());
      wv.pad_mask.assign(w.cols(), 1);
      auto [a, l] = eval_weights(wv, ds);
      loss += l;
      acc += a;
    }
    return TrajPoint{step, static_cast<double>(step) * h, loss / B, acc / B};
  };

  std::vector<TrajPoint> series;
  Tensor x = sources;
  series.push_back(record(0, x));
  std::vector<double> ts(B);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    std::fill(ts.begin(), ts.end(), static_cast<double>(s) * h);
    Tensor v = model.eval(x, ts, context);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += h * v.data[i];
    check_finite(x, s + 1);
    if ((s + 1) % cfg.record_every == 0 || s + 1 == cfg.steps) series.push_back(record(s + 1, x));
  }
  return series;
}

std::string trajectory_csv(const std::vector<TrajPoint>& series) {
  std::ostringstream os;
  os << "step,t,val_loss,val_acc\n";
  for (const TrajPoint& p : series)
    os << p.step << ',' << p.t << ',' << p.val_loss << ',' << p.val_acc << '\n';
  return os.str();
}

}  // namespace wf
