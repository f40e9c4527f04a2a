#pragma once

#include <functional>
#include <span>
#include <vector>

#include "weightflow/tensor.hpp"

namespace wf {

// Equal-weight empirical point cloud [n x D].
struct PointCloud {
  Tensor points;
  std::size_t size() const { return points.rows(); }
  std::size_t dim() const { return points.cols(); }
};

// Exact 2-Wasserstein distance between equal-size uniform clouds:
// sqrt(min over assignments of mean squared pair cost). Solved by a shortest
// augmenting path assignment algorithm, exact at f64.
double w2_exact(const PointCloud& a, const PointCloud& b);

// Minimum-cost perfect matching for a square cost matrix [n x n]; returns the
// column assigned to each row.
std::vector<std::size_t> solve_assignment(const Tensor& cost);

using FieldFn = std::function<Tensor(const Tensor& x, double t)>;  // batched velocity
using GradFn = std::function<Tensor(const Tensor& x)>;             // batched grad of L

// (1/2) * time-averaged E ||grad_L(x_t) + v(x_t, t)||^2 along Euler rollouts
// of `field` started from the rows of x0; the curve derivative is the exact
// field evaluation.
double action_gap(const FieldFn& field, const GradFn& grad_l, const Tensor& x0,
                  std::size_t n_times);

// Same estimator on pre-sampled curves [n_curves x (n_times+1) x D] over a
// uniform grid; curve derivatives via central differences on the grid.
double action_gap_curves(const Tensor& curves, const GradFn& grad_l);

// Max (relative where meaningful, absolute near zero) error between the given
// analytic gradient and central finite differences of fn at point.
double grad_check(const std::function<double(std::span<const double>)>& fn,
                  std::span<const double> point, std::span<const double> analytic_grad,
                  double eps = 1e-5);

}  // namespace wf
