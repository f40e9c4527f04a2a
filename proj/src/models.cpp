#include "weightflow/models.hpp"

#include <cmath>
#include <numbers>

#include "weightflow/errors.hpp"
#include "weightflow/rng.hpp"

namespace wf {

void TimeEmbed::write(double t, double* out) const {
  for (std::size_t k = 0; 2 * k < dim; ++k) {
    double f = std::pow(2.0, static_cast<double>(k)) * std::numbers::pi * t;
    out[2 * k] = std::sin(f);
    if (2 * k + 1 < dim) out[2 * k + 1] = std::cos(f);
  }
}

namespace {

double act_prime(Activation a, double z, double post) {
  return a == Activation::tanh ? 1.0 - post * post : (z > 0.0 ? 1.0 : 0.0);
}

double act_second(Activation a, double post) {
  // tanh'' = -2 tanh (1 - tanh^2); relu'' = 0 a.e.
  return a == Activation::tanh ? -2.0 * post * (1.0 - post * post) : 0.0;
}

Tensor assemble_input(const Tensor& x, const std::vector<double>& times, const Tensor* context,
                      std::size_t state_dim, const TimeEmbed& te, std::size_t context_dim) {
  const std::size_t B = x.rows();
  if (x.cols() != state_dim) throw dimension_error("model eval: bad state dim");
  if (times.size() != B) throw dimension_error("model eval: times/batch mismatch");
  if (context_dim > 0 && (context == nullptr || context->rows() != B || context->cols() != context_dim))
    throw dimension_error("model eval: bad context");
  Tensor in({B, state_dim + te.dim + context_dim});
  for (std::size_t i = 0; i < B; ++i) {
    double* row = &in.data[i * in.cols()];
    for (std::size_t j = 0; j < state_dim; ++j) row[j] = x.at(i, j);
    te.write(times[i], row + state_dim);
    for (std::size_t j = 0; j < context_dim; ++j) row[state_dim + te.dim + j] = context->at(i, j);
  }
  return in;
}

}  // namespace

VelocityModel VelocityModel::make(std::size_t state_dim, const std::vector<std::size_t>& hidden,
                                  std::size_t time_embed_dim, std::size_t context_dim,
                                  std::uint64_t seed) {
  VelocityModel m;
  m.state_dim = state_dim;
  m.context_dim = context_dim;
  m.time_embed.dim = time_embed_dim;
  std::vector<std::size_t> widths{state_dim + time_embed_dim + context_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(state_dim);
  m.mlp = MlpSpec(widths, Activation::tanh);
  m.params = kaiming_init(m.mlp, InitMode::normal, seed);
  return m;
}

Tensor VelocityModel::eval(const Tensor& x, const std::vector<double>& times,
                           const Tensor* context, ForwardCache* cache) const {
  Tensor in = assemble_input(x, times, context, state_dim, time_embed, context_dim);
  return mlp_forward(mlp, params, in, cache);
}

void VelocityModel::backward(const ForwardCache& cache, const Tensor& grad_out,
                             std::span<double> grad_params, Tensor* grad_x) const {
  if (grad_x == nullptr) {
    mlp_backward(cache, params, grad_out, grad_params);
    return;
  }
  Tensor grad_in;
  mlp_backward(cache, params, grad_out, grad_params, &grad_in);
  *grad_x = Tensor({grad_in.rows(), state_dim});
  for (std::size_t i = 0; i < grad_in.rows(); ++i)
    for (std::size_t j = 0; j < state_dim; ++j) grad_x->at(i, j) = grad_in.at(i, j);
}

PotentialModel PotentialModel::make(std::size_t state_dim, const std::vector<std::size_t>& hidden,
                                    std::size_t time_embed_dim, std::uint64_t seed) {
  PotentialModel m;
  m.state_dim = state_dim;
  m.time_embed.dim = time_embed_dim;
  std::vector<std::size_t> widths{state_dim + time_embed_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(1);
  m.mlp = MlpSpec(widths, Activation::tanh);
  m.params = kaiming_init(m.mlp, InitMode::normal, seed);
  return m;
}

Tensor PotentialModel::value(const Tensor& x, const std::vector<double>& times) const {
  Tensor in = assemble_input(x, times, nullptr, state_dim, time_embed, 0);
  Tensor out = mlp_forward(mlp, params, in);
  Tensor v({out.rows()});
  for (std::size_t i = 0; i < out.rows(); ++i) v[i] = out.at(i, 0);
  return v;
}

Tensor PotentialModel::grad_x(const Tensor& x, const std::vector<double>& times,
                              PotentialGradCache* cache) const {
  Tensor in = assemble_input(x, times, nullptr, state_dim, time_embed, 0);
  ForwardCache fwd;
  mlp_forward(mlp, params, in, &fwd);

  const std::size_t B = x.rows(), L = mlp.n_layers();
  const Activation act = mlp.activation;
  // backward sweep for dV/d input: delta_L = 1; u_{l-1} = delta_l W_l;
  // delta_{l-1} = act'(z_{l-1}) . u_{l-1}
  std::vector<Tensor> deltas(L), us(L);
  deltas[L - 1] = Tensor({B, std::size_t(1)});
  for (auto& v : deltas[L - 1].data) v = 1.0;
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t in_w = mlp.widths[l], out_w = mlp.widths[l + 1];
    us[l] = Tensor({B, in_w});
    gemm_acc(deltas[l].data.data(), &params[mlp.weight_offset(l)], us[l].data.data(), B, out_w,
             in_w);
    if (l > 0) {
      deltas[l - 1] = Tensor({B, in_w});
      const Tensor& z = fwd.pre_acts[l - 1];
      const Tensor& a = fwd.acts[l];
      for (std::size_t i = 0; i < B * in_w; ++i)
        deltas[l - 1].data[i] = act_prime(act, z.data[i], a.data[i]) * us[l].data[i];
    }
  }

  Tensor g({B, state_dim});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < state_dim; ++j) g.at(i, j) = us[0].at(i, j);

  if (cache != nullptr) {
    cache->acts = fwd.acts;
    cache->pre_acts = fwd.pre_acts;
    cache->deltas = std::move(deltas);
    cache->us = std::move(us);
  }
  return g;
}

void PotentialModel::grad_x_backward(const PotentialGradCache& cache, const Tensor& c,
                                     std::span<double> grad_params) const {
  const std::size_t B = c.rows(), L = mlp.n_layers();
  const Activation act = mlp.activation;
  if (grad_params.size() != params.size())
    throw dimension_error("grad_x_backward: grad buffer size mismatch");

  // Adjoints (wrt s = sum_b c_b . dV/dx_b) of the nodes of the combined
  // forward + input-gradient computation.
  std::vector<Tensor> u_bar(L), z_bar(L);
  u_bar[0] = Tensor({B, mlp.widths[0]});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < state_dim; ++j) u_bar[0].at(i, j) = c.at(i, j);

  // ascending sweep: reverse the input-gradient computation
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t in_w = mlp.widths[l], out_w = mlp.widths[l + 1];
    // u_l = delta_{l+1} W_{l+1} (with delta/us indices shifted: here layer l
    // maps deltas[l] over out_w), so: delta_bar = u_bar W^T, W_bar += delta^T u_bar
    Tensor delta_bar({B, out_w});
    gemm_bt_acc(u_bar[l].data.data(), &params[mlp.weight_offset(l)], delta_bar.data.data(), B,
                in_w, out_w);
    gemm_at_acc(cache.deltas[l].data.data(), u_bar[l].data.data(),
                &grad_params[mlp.weight_offset(l)], out_w, B, in_w);
    if (l + 1 < L) {
      // delta_l = act'(z_l) . u_l  =>  u_bar += act'.delta_bar,
      // z_bar += act''(z_l) . u_l . delta_bar
      const Tensor& z = cache.pre_acts[l];
      const Tensor& a = cache.acts[l + 1];
      const Tensor& u = cache.us[l + 1];
      u_bar[l + 1] = Tensor({B, out_w});
      z_bar[l] = Tensor({B, out_w});
      for (std::size_t i = 0; i < B * out_w; ++i) {
        u_bar[l + 1].data[i] = act_prime(act, z.data[i], a.data[i]) * delta_bar.data[i];
        z_bar[l].data[i] = act_second(act, a.data[i]) * u.data[i] * delta_bar.data[i];
      }
    }
  }

  // descending sweep: reverse the forward pass
  Tensor a_bar;  // adjoint of acts[l]
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t in_w = mlp.widths[l], out_w = mlp.widths[l + 1];
    Tensor zb = l + 1 < L ? z_bar[l] : Tensor({B, out_w});
    if (a_bar.numel() == B * out_w && l + 1 < L) {
      const Tensor& z = cache.pre_acts[l];
      const Tensor& a = cache.acts[l + 1];
      for (std::size_t i = 0; i < B * out_w; ++i)
        zb.data[i] += act_prime(act, z.data[i], a.data[i]) * a_bar.data[i];
    }
    gemm_at_acc(zb.data.data(), cache.acts[l].data.data(), &grad_params[mlp.weight_offset(l)],
                out_w, B, in_w);
    double* bias_grad = &grad_params[mlp.bias_offset(l)];
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < out_w; ++j) bias_grad[j] += zb.at(i, j);
    a_bar = Tensor({B, in_w});
    gemm_acc(zb.data.data(), &params[mlp.weight_offset(l)], a_bar.data.data(), B, out_w, in_w);
  }
}

ContextEncoder ContextEncoder::make(std::size_t d_in, std::size_t n_classes,
                                    std::size_t context_dim, std::uint64_t seed) {
  ContextEncoder e;
  e.d_in = d_in;
  e.n_classes = n_classes;
  e.context_dim = context_dim;
  e.mlp = MlpSpec({d_in * n_classes, 32, context_dim}, Activation::tanh);
  e.params = kaiming_init(e.mlp, InitMode::normal, seed);
  return e;
}

Tensor ContextEncoder::encode(const Tensor& inputs, const std::vector<int>& labels) const {
  Tensor feat({1, d_in * n_classes});
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    auto cls = static_cast<std::size_t>(labels[i]);
    if (cls >= n_classes) throw contract_error("context encoder: label out of range");
    ++counts[cls];
    for (std::size_t j = 0; j < d_in; ++j) feat[cls * d_in + j] += inputs.at(i, j);
  }
  for (std::size_t cls = 0; cls < n_classes; ++cls)
    if (counts[cls] > 0)
      for (std::size_t j = 0; j < d_in; ++j)
        feat[cls * d_in + j] /= static_cast<double>(counts[cls]);
  Tensor out = mlp_forward(mlp, params, feat);
  return Tensor::vec(std::vector<double>(out.data.begin(), out.data.end()));
}

Tensor ContextEncoder::encode(const SynthDataset& ds) const {
  return encode(ds.train_inputs, ds.train_labels);
}

Tensor SourceDist::sample(std::size_t n, std::uint64_t seed) const {
  if (dim == 0) throw config_error("source dist: dim not set");
  Tensor out({n, dim});
  if (kind == SourceKind::std_gauss) {
    Rng rng(seed);
    for (auto& v : out.data) v = rng.normal();
    return out;
  }
  if (arch.param_count() > dim) throw dimension_error("source dist: arch exceeds sample dim");
  InitMode mode = kind == SourceKind::kaiming_uniform ? InitMode::uniform : InitMode::normal;
  for (std::size_t i = 0; i < n; ++i) {
    auto p = kaiming_init(arch, mode, seed * 0x9e3779b97f4a7c15ULL + i);
    std::copy(p.begin(), p.end(), &out.data[i * dim]);
  }
  return out;
}

}  // namespace wf
