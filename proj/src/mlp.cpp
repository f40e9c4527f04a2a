#include "weightflow/mlp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "weightflow/errors.hpp"
#include "weightflow/rng.hpp"

namespace wf {

namespace {
std::atomic<std::uint64_t> g_forward_token{1};

inline double act(double z, Activation a) {
  return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}
inline double act_prime(double z, Activation a) {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  double t = std::tanh(z);
  return 1.0 - t * t;
}
}  // namespace

MlpSpec::MlpSpec(std::vector<std::size_t> w, Activation a) : widths(std::move(w)), activation(a) {
  if (widths.size() < 2) throw dimension_error("MlpSpec: need at least 2 widths");
  for (std::size_t d : widths)
    if (d == 0) throw dimension_error("MlpSpec: zero layer width");
  offsets_.resize(n_layers());
  std::size_t off = 0;
  for (std::size_t l = 0; l < n_layers(); ++l) {
    offsets_[l] = off;
    off += widths[l] * widths[l + 1] + widths[l + 1];
  }
  param_count_ = off;
}

Tensor mlp_forward(const MlpSpec& spec, std::span<const double> params, const Tensor& x,
                   ForwardCache* cache) {
  if (params.size() != spec.param_count())
    throw dimension_error("mlp_forward: param vector size " + std::to_string(params.size()) +
                          " != " + std::to_string(spec.param_count()));
  if (x.cols() != spec.in_dim())
    throw dimension_error("mlp_forward: input dim " + std::to_string(x.cols()) + " != " +
                          std::to_string(spec.in_dim()));
  const std::size_t B = x.rows();
  const std::size_t L = spec.n_layers();

  if (cache) {
    cache->spec = spec;
    cache->acts.assign(1, x);
    cache->pre_acts.clear();
    cache->token = g_forward_token.fetch_add(1);
  }

  Tensor cur = x;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t nin = spec.widths[l], nout = spec.widths[l + 1];
    const double* W = params.data() + spec.weight_offset(l);
    const double* b = params.data() + spec.bias_offset(l);
    Tensor z({B, nout});
    for (std::size_t i = 0; i < B; ++i)
      std::copy(b, b + nout, z.data.data() + i * nout);
    // z += cur * W^T  (W is [nout x nin])
    gemm_bt_acc(cur.data.data(), W, z.data.data(), B, nin, nout);
    if (cache) cache->pre_acts.push_back(z);
    if (l + 1 < L) {
      Tensor a({B, nout});
      for (std::size_t i = 0; i < z.data.size(); ++i) a.data[i] = act(z.data[i], spec.activation);
      if (cache) cache->acts.push_back(a);
      cur = std::move(a);
    } else {
      cur = std::move(z);
    }
  }
  return cur;
}

void mlp_backward(const ForwardCache& cache, std::span<const double> params,
                  const Tensor& grad_logits, std::span<double> grad_params, Tensor* grad_x) {
  const MlpSpec& spec = cache.spec;
  if (cache.token == 0 || cache.pre_acts.size() != spec.n_layers())
    throw contract_error("mlp_backward: stale or empty forward cache");
  if (params.size() != spec.param_count() || grad_params.size() != spec.param_count())
    throw dimension_error("mlp_backward: param/grad size mismatch");
  if (grad_logits.cols() != spec.out_dim() || grad_logits.rows() != cache.acts[0].rows())
    throw dimension_error("mlp_backward: grad_logits shape mismatch");

  const std::size_t B = grad_logits.rows();
  const std::size_t L = spec.n_layers();

  Tensor delta = grad_logits;  // d loss / d z_l, starting at the (linear) output layer
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t nin = spec.widths[l], nout = spec.widths[l + 1];
    const Tensor& a_in = cache.acts[l];
    double* dW = grad_params.data() + spec.weight_offset(l);
    double* db = grad_params.data() + spec.bias_offset(l);
    // dW += delta^T * a_in ; db += column sums of delta
    gemm_at_acc(delta.data.data(), a_in.data.data(), dW, nout, B, nin);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < nout; ++j) db[j] += delta.at(i, j);
    if (l == 0 && !grad_x) break;
    // d loss / d a_{l-1} = delta * W
    const double* W = params.data() + spec.weight_offset(l);
    Tensor da({B, nin});
    gemm_acc(delta.data.data(), W, da.data.data(), B, nout, nin);
    if (l == 0) {
      *grad_x = std::move(da);
      break;
    }
    const Tensor& z_prev = cache.pre_acts[l - 1];
    for (std::size_t i = 0; i < da.data.size(); ++i)
      da.data[i] *= act_prime(z_prev.data[i], spec.activation);
    delta = std::move(da);
  }
}

Tensor jacobian_vector_transpose(const MlpSpec& spec, std::span<const double> params,
                                 const Tensor& x, const Tensor& a) {
  if (a.cols() != spec.out_dim() || a.rows() != x.rows())
    throw dimension_error("jacobian_vector_transpose: cotangent shape mismatch");
  ForwardCache cache;
  mlp_forward(spec, params, x, &cache);
  std::vector<double> scratch(spec.param_count(), 0.0);
  Tensor grad_x;
  mlp_backward(cache, params, a, scratch, &grad_x);
  return grad_x;
}

double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* grad_logits) {
  const std::size_t B = logits.rows(), C = logits.cols();
  if (labels.size() != B) throw dimension_error("softmax_cross_entropy: label count mismatch");
  if (grad_logits) *grad_logits = Tensor({B, C});
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    const double* row = logits.data.data() + i * C;
    double mx = *std::max_element(row, row + C);
    double lse = 0.0;
    for (std::size_t c = 0; c < C; ++c) lse += std::exp(row[c] - mx);
    lse = mx + std::log(lse);
    int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw contract_error("softmax_cross_entropy: label out of range");
    total += lse - row[y];
    if (grad_logits) {
      for (std::size_t c = 0; c < C; ++c)
        grad_logits->at(i, c) = std::exp(row[c] - lse) / static_cast<double>(B);
      grad_logits->at(i, y) -= 1.0 / static_cast<double>(B);
    }
  }
  return total / static_cast<double>(B);
}

Tensor softmax(const Tensor& logits) {
  const std::size_t B = logits.rows(), C = logits.cols();
  Tensor p({B, C});
  for (std::size_t i = 0; i < B; ++i) {
    const double* row = logits.data.data() + i * C;
    double mx = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      p.at(i, c) = std::exp(row[c] - mx);
      s += p.at(i, c);
    }
    for (std::size_t c = 0; c < C; ++c) p.at(i, c) /= s;
  }
  return p;
}

std::vector<double> kaiming_init(const MlpSpec& spec, InitMode mode, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> params(spec.param_count());
  for (std::size_t l = 0; l < spec.n_layers(); ++l) {
    const std::size_t fan_in = spec.widths[l], nout = spec.widths[l + 1];
    double* W = params.data() + spec.weight_offset(l);
    double* b = params.data() + spec.bias_offset(l);
    if (mode == InitMode::uniform) {
      double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < fan_in * nout; ++i) W[i] = rng.uniform(-bound, bound);
      double bbound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t i = 0; i < nout; ++i) b[i] = rng.uniform(-bbound, bbound);
    } else {
      double std_ = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < fan_in * nout; ++i) W[i] = rng.normal(0.0, std_);
      for (std::size_t i = 0; i < nout; ++i) b[i] = 0.0;
    }
  }
  return params;
}

OptimState OptimState::sgd(double lr, double weight_decay, double momentum) {
  OptimState s;
  s.kind = OptimKind::sgd;
  s.lr = lr;
  s.weight_decay = weight_decay;
  s.momentum = momentum;
  return s;
}

OptimState OptimState::adamw(double lr, double weight_decay) {
  OptimState s;
  s.kind = OptimKind::adamw;
  s.lr = lr;
  s.weight_decay = weight_decay;
  return s;
}

void optimizer_step(OptimState& state, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size()) throw dimension_error("optimizer_step: size mismatch");
  if (state.lr < 0.0) throw contract_error("optimizer_step: negative lr");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw numeric_error("optimizer_step: non-finite gradient at index " + std::to_string(i));

  const std::size_t n = params.size();
  state.step += 1;
  if (state.kind == OptimKind::sgd) {
    if (state.momentum != 0.0 && state.m.size() != n) state.m.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double g = grads[i] + state.weight_decay * params[i];
      if (state.momentum != 0.0) {
        state.m[i] = state.momentum * state.m[i] + g;
        g = state.m[i];
      }
      params[i] -= state.lr * g;
    }
  } else {
    if (state.m.size() != n) state.m.assign(n, 0.0);
    if (state.v.size() != n) state.v.assign(n, 0.0);
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < n; ++i) {
      double g = grads[i];
      state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
      state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
      double mhat = state.m[i] / bc1;
      double vhat = state.v[i] / bc2;
      params[i] -= state.lr * (mhat / (std::sqrt(vhat) + state.eps) + state.weight_decay * params[i]);
    }
  }
}

}  // namespace wf
