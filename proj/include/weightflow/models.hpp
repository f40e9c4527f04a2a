#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "weightflow/dataset.hpp"
#include "weightflow/mlp.hpp"
#include "weightflow/tensor.hpp"

namespace wf {

// Sinusoidal features of a scalar time in [0,1]: (sin, cos) pairs at
// geometrically spaced frequencies.
struct TimeEmbed {
  std::size_t dim = 8;
  void write(double t, double* out) const;
};

// v_theta(x, t, y): an MLP over [x | time features | context].
struct VelocityModel {
  MlpSpec mlp;
  std::size_t state_dim = 0;
  std::size_t context_dim = 0;
  TimeEmbed time_embed;
  std::vector<double> params;

  static VelocityModel make(std::size_t state_dim, const std::vector<std::size_t>& hidden,
                            std::size_t time_embed_dim, std::size_t context_dim,
                            std::uint64_t seed);

  // x [B x state_dim], times [B]; context [B x context_dim] when context_dim>0.
  Tensor eval(const Tensor& x, const std::vector<double>& times, const Tensor* context,
              ForwardCache* cache = nullptr) const;

  // grad_out [B x state_dim] -> accumulates grad_params; grad_x (optional)
  // receives d(sum grad_out . v)/dx restricted to the state columns.
  void backward(const ForwardCache& cache, const Tensor& grad_out, std::span<double> grad_params,
                Tensor* grad_x = nullptr) const;
};

// Caches from one potential input-gradient pass, enough for the second
// backward that training needs.
struct PotentialGradCache {
  std::vector<Tensor> acts;      // acts[0] = full input
  std::vector<Tensor> pre_acts;  // z_l
  std::vector<Tensor> deltas;    // delta_l = dV/dz_l
  std::vector<Tensor> us;        // u_l = dV/da_l (us[0] = dV/d input)
};

// V_theta(x, t): an MLP over [x | time features] with scalar output.
struct PotentialModel {
  MlpSpec mlp;
  std::size_t state_dim = 0;
  TimeEmbed time_embed;
  std::vector<double> params;

  static PotentialModel make(std::size_t state_dim, const std::vector<std::size_t>& hidden,
                             std::size_t time_embed_dim, std::uint64_t seed);

  Tensor value(const Tensor& x, const std::vector<double>& times) const;  // [B]

  // dV/dx on the state columns, caching everything the double backward needs.
  Tensor grad_x(const Tensor& x, const std::vector<double>& times,
                PotentialGradCache* cache = nullptr) const;

  // Given a cotangent c [B x state_dim] on grad_x's output, accumulate
  // d(sum c . dV/dx)/d params. This is the hand-rolled double backward: a
  // reverse sweep over the input-gradient computation followed by a reverse
  // sweep over the forward pass.
  void grad_x_backward(const PotentialGradCache& cache, const Tensor& c,
                       std::span<double> grad_params) const;
};

// Frozen random MLP over per-class feature means; permutation-invariant over
// the support sample by construction.
struct ContextEncoder {
  MlpSpec mlp;
  std::vector<double> params;
  std::size_t d_in = 0, n_classes = 0, context_dim = 0;

  static ContextEncoder make(std::size_t d_in, std::size_t n_classes, std::size_t context_dim,
                             std::uint64_t seed);

  Tensor encode(const Tensor& inputs, const std::vector<int>& labels) const;  // [context_dim]
  Tensor encode(const SynthDataset& ds) const;
};

enum class SourceKind { kaiming_uniform, kaiming_normal, std_gauss };

// p0 over (padded) weight space.
struct SourceDist {
  SourceKind kind = SourceKind::kaiming_uniform;
  MlpSpec arch;            // used by the kaiming kinds
  std::size_t dim = 0;     // padded dimension of samples

  Tensor sample(std::size_t n, std::uint64_t seed) const;  // [n x dim]
};

}  // namespace wf
