#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "weightflow/tensor.hpp"

namespace wf {

enum class Activation { relu, tanh };

// Layer widths + activation; parameters live in one flat vector whose layout
// is: for each layer l, weights W_l (out x in, row-major) followed by bias b_l.
struct MlpSpec {
  std::vector<std::size_t> widths;
  Activation activation = Activation::relu;

  MlpSpec() = default;
  MlpSpec(std::vector<std::size_t> w, Activation a);

  std::size_t n_layers() const { return widths.size() - 1; }
  std::size_t in_dim() const { return widths.front(); }
  std::size_t out_dim() const { return widths.back(); }
  std::size_t param_count() const { return param_count_; }
  // Offset of layer l's weight block; bias block follows at
  // weight_offset(l) + widths[l]*widths[l+1].
  std::size_t weight_offset(std::size_t l) const { return offsets_[l]; }
  std::size_t bias_offset(std::size_t l) const { return offsets_[l] + widths[l] * widths[l + 1]; }

  bool operator==(const MlpSpec& o) const {
    return widths == o.widths && activation == o.activation;
  }

 private:
  std::size_t param_count_ = 0;
  std::vector<std::size_t> offsets_;
};

// Activations cached during a forward pass; enough for an exact backward.
struct ForwardCache {
  MlpSpec spec;
  std::vector<Tensor> acts;      // acts[0] = x, acts[l] = post-activation of layer l
  std::vector<Tensor> pre_acts;  // pre_acts[l] = z_{l+1} (pre-activation)
  std::uint64_t token = 0;       // matches the forward call that filled it
};

Tensor mlp_forward(const MlpSpec& spec, std::span<const double> params, const Tensor& x,
                   ForwardCache* cache = nullptr);

// Backward pass for grad_logits [B x out]; fills grad_params (accumulated,
// caller zeroes) and optionally grad_x [B x in].
void mlp_backward(const ForwardCache& cache, std::span<const double> params,
                  const Tensor& grad_logits, std::span<double> grad_params,
                  Tensor* grad_x = nullptr);

// (dy/dx)^T a for the network as a map x -> y at fixed params; a is [B x out].
Tensor jacobian_vector_transpose(const MlpSpec& spec, std::span<const double> params,
                                 const Tensor& x, const Tensor& a);

// Fused softmax + cross-entropy via log-sum-exp. Returns mean loss over the
// batch; grad_logits (optional) is d(mean loss)/d logits.
double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* grad_logits = nullptr);

// Row-wise softmax probabilities.
Tensor softmax(const Tensor& logits);

enum class InitMode { uniform, normal };

// Kaiming init with per-layer fan-in scaling (relu gain). Uniform mode draws
// weights in +-sqrt(6/fan_in) and biases in +-1/sqrt(fan_in); normal mode
// draws weights with std sqrt(2/fan_in) and zero biases.
std::vector<double> kaiming_init(const MlpSpec& spec, InitMode mode, std::uint64_t seed);

// --- optimizers ------------------------------------------------------------

enum class OptimKind { sgd, adamw };

struct OptimState {
  OptimKind kind = OptimKind::sgd;
  double lr = 0.1;
  double weight_decay = 0.0;
  double momentum = 0.0;  // sgd only
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  std::vector<double> m, v;  // moment buffers, lazily sized

  static OptimState sgd(double lr, double weight_decay = 0.0, double momentum = 0.0);
  static OptimState adamw(double lr, double weight_decay = 0.0);
};

// In-place update. SGD: p -= lr*(g + wd*p) with optional heavy-ball momentum;
// AdamW: decoupled weight decay.
void optimizer_step(OptimState& state, std::span<double> params, std::span<const double> grads);

}  // namespace wf
