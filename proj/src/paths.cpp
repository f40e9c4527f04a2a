#include "weightflow/paths.hpp"

#include <cmath>
#include <string>

#include "weightflow/errors.hpp"

namespace wf {

void MarginalBatch::validate() const {
  if (knots.size() < 2 || knots.size() != times.size())
    throw contract_error("MarginalBatch: need >= 2 knots with matching times");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw domain_error("MarginalBatch: times must be strictly increasing");
  for (std::size_t i = 1; i < knots.size(); ++i)
    if (knots[i].numel() != knots[0].numel())
      throw dimension_error("MarginalBatch: knot dims differ");
}

std::size_t MarginalBatch::segment(double t) const {
  if (t < times.front() || t > times.back())
    throw domain_error("MarginalBatch: t=" + std::to_string(t) + " outside knot range");
  if (t >= times[times.size() - 2]) return times.size() - 2;  // last segment absorbs t = t_K
  std::size_t k = 0;
  while (t >= times[k + 1]) ++k;
  return k;
}

Tensor gaussian_target_field(const Tensor& mu, const Tensor& mu_dot, double sigma,
                             double sigma_dot, const Tensor& x) {
  if (sigma <= 0.0) throw domain_error("gaussian_target_field: sigma must be positive");
  if (mu.numel() != x.numel() || mu_dot.numel() != x.numel())
    throw dimension_error("gaussian_target_field: shape mismatch");
  Tensor u = x;
  const double ratio = sigma_dot / sigma;
  for (std::size_t i = 0; i < u.data.size(); ++i)
    u.data[i] = ratio * (x.data[i] - mu.data[i]) + mu_dot.data[i];
  return u;
}

Tensor pwl_mean(const MarginalBatch& z, double t) {
  z.validate();
  const std::size_t k = z.segment(t);
  const double s = (t - z.times[k]) / (z.times[k + 1] - z.times[k]);
  Tensor out = z.knots[k];
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] += s * (z.knots[k + 1].data[i] - z.knots[k].data[i]);
  return out;
}

Tensor pwl_velocity(const MarginalBatch& z, double t) {
  z.validate();
  const std::size_t k = z.segment(t);
  const double dt = z.times[k + 1] - z.times[k];
  Tensor out = z.knots[k + 1];
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = (out.data[i] - z.knots[k].data[i]) / dt;
  return out;
}

SplineCoeffs cubic_spline_fit(const MarginalBatch& z) {
  z.validate();
  const std::size_t n = z.knots.size();  // K+1 points
  const std::size_t d = z.knots[0].numel();
  SplineCoeffs c;
  c.times = z.times;
  c.knots = Tensor({n, d});
  for (std::size_t i = 0; i < n; ++i)
    std::copy(z.knots[i].data.begin(), z.knots[i].data.end(), c.knots.data.begin() + i * d);
  c.second_derivs = Tensor({n, d});
  if (n == 2) return c;  // natural spline on two points is the straight line

  // Thomas solve of the natural-spline tridiagonal system, one RHS per dim.
  const std::size_t m = n - 2;  // interior points
  std::vector<double> h(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) h[i] = z.times[i + 1] - z.times[i];
  std::vector<double> diag(m), upper(m), rhs(m);
  for (std::size_t dim = 0; dim < d; ++dim) {
    for (std::size_t i = 0; i < m; ++i) {
      diag[i] = 2.0 * (h[i] + h[i + 1]);
      upper[i] = h[i + 1];
      double y0 = c.knots.at(i, dim), y1 = c.knots.at(i + 1, dim), y2 = c.knots.at(i + 2, dim);
      rhs[i] = 6.0 * ((y2 - y1) / h[i + 1] - (y1 - y0) / h[i]);
    }
    // forward sweep (lower diagonal equals h[i])
    for (std::size_t i = 1; i < m; ++i) {
      double w = h[i] / diag[i - 1];
      diag[i] -= w * upper[i - 1];
      rhs[i] -= w * rhs[i - 1];
    }
    c.second_derivs.at(m, dim) = 0.0;
    for (std::size_t i = m; i-- > 0;) {
      double next = i + 1 < m ? c.second_derivs.at(i + 2, dim) : 0.0;
      c.second_derivs.at(i + 1, dim) = (rhs[i] - upper[i] * next) / diag[i];
    }
  }
  return c;
}

namespace {
std::size_t spline_segment(const SplineCoeffs& c, double t) {
  if (t < c.times.front() || t > c.times.back())
    throw domain_error("cubic spline: t outside knot range");
  if (t >= c.times[c.times.size() - 2]) return c.times.size() - 2;
  std::size_t k = 0;
  while (t >= c.times[k + 1]) ++k;
  return k;
}
}  // namespace

Tensor cubic_spline_eval(const SplineCoeffs& c, double t) {
  const std::size_t k = spline_segment(c, t);
  const std::size_t d = c.knots.cols();
  const double h = c.times[k + 1] - c.times[k];
  const double a = (c.times[k + 1] - t) / h;
  const double b = (t - c.times[k]) / h;
  Tensor out({d});
  for (std::size_t j = 0; j < d; ++j) {
    double y0 = c.knots.at(k, j), y1 = c.knots.at(k + 1, j);
    double m0 = c.second_derivs.at(k, j), m1 = c.second_derivs.at(k + 1, j);
    out[j] = a * y0 + b * y1 +
             ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
  }
  return out;
}

Tensor cubic_spline_deriv(const SplineCoeffs& c, double t) {
  const std::size_t k = spline_segment(c, t);
  const std::size_t d = c.knots.cols();
  const double h = c.times[k + 1] - c.times[k];
  const double a = (c.times[k + 1] - t) / h;
  const double b = (t - c.times[k]) / h;
  Tensor out({d});
  for (std::size_t j = 0; j < d; ++j) {
    double y0 = c.knots.at(k, j), y1 = c.knots.at(k + 1, j);
    double m0 = c.second_derivs.at(k, j), m1 = c.second_derivs.at(k + 1, j);
    out[j] = (y1 - y0) / h - (3.0 * a * a - 1.0) * h * m0 / 6.0 + (3.0 * b * b - 1.0) * h * m1 / 6.0;
  }
  return out;
}

}  // namespace wf
