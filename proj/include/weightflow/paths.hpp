#pragma once

#include <vector>

#include "weightflow/tensor.hpp"

namespace wf {

// Samples (x_0, ..., x_K) at strictly increasing knot times in [0, 1].
struct MarginalBatch {
  std::vector<Tensor> knots;   // each [D]
  std::vector<double> times;   // same length as knots
  Tensor context;              // optional conditioning vector, may be empty

  std::size_t n_segments() const { return times.empty() ? 0 : times.size() - 1; }
  void validate() const;
  // Segment index k with t in [t_k, t_{k+1}); t == t_K maps to the last segment.
  std::size_t segment(double t) const;
};

// Affine Gaussian path schedule; defaults alpha_t = t, beta_t = 1 - t.
struct GaussPathParams {
  double sigma = 1e-3;
  double alpha(double t) const { return t; }
  double alpha_dot(double) const { return 1.0; }
  double beta(double t) const { return 1.0 - t; }
  double beta_dot(double) const { return -1.0; }
};

// u = (sigma_dot/sigma)(x - mu) + mu_dot, the unique field inducing the
// Gaussian path N(mu_t, sigma_t^2 I).
Tensor gaussian_target_field(const Tensor& mu, const Tensor& mu_dot, double sigma,
                             double sigma_dot, const Tensor& x);

// Piecewise-linear interpolation of the knots at time t.
Tensor pwl_mean(const MarginalBatch& z, double t);
// Its derivative: piecewise constant (x_{k+1}-x_k)/(t_{k+1}-t_k).
Tensor pwl_velocity(const MarginalBatch& z, double t);

// Natural cubic spline through the knots (zero second derivative at the ends).
struct SplineCoeffs {
  std::vector<double> times;
  Tensor knots;        // [K+1 x D]
  Tensor second_derivs;  // [K+1 x D]
};

SplineCoeffs cubic_spline_fit(const MarginalBatch& z);
Tensor cubic_spline_eval(const SplineCoeffs& c, double t);
Tensor cubic_spline_deriv(const SplineCoeffs& c, double t);

}  // namespace wf
