#include "weightflow/otmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "weightflow/errors.hpp"

namespace wf {

std::vector<std::size_t> solve_assignment(const Tensor& cost) {
  // Shortest augmenting path (Jonker-Volgenant flavour), O(n^3).
  const std::size_t n = cost.rows();
  if (cost.cols() != n) throw contract_error("solve_assignment: cost matrix not square");
  const double INF = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, n), way(n + 1, n);
  for (std::size_t i = 0; i < n; ++i) {
    p[n] = i;
    std::size_t j0 = n;
    std::vector<double> minv(n + 1, INF);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = n;
      double delta = INF;
      for (std::size_t j = 0; j < n; ++j) {
        if (used[j]) continue;
        double cur = cost.at(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != n);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != n);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 0; j < n; ++j)
    if (p[j] != n) row_to_col[p[j]] = j;
  return row_to_col;
}

double w2_exact(const PointCloud& a, const PointCloud& b) {
  const std::size_t n = a.size();
  if (n != b.size()) throw contract_error("w2_exact: cloud sizes differ");
  if (a.dim() != b.dim()) throw contract_error("w2_exact: cloud dims differ");
  const std::size_t d = a.dim();
  Tensor cost({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = a.points.at(i, k) - b.points.at(j, k);
        s += diff * diff;
      }
      cost.at(i, j) = s;
    }
  auto match = solve_assignment(cost);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost.at(i, match[i]);
  return std::sqrt(total / static_cast<double>(n));
}

double action_gap(const FieldFn& field, const GradFn& grad_l, const Tensor& x0,
                  std::size_t n_times) {
  const std::size_t B = x0.rows(), D = x0.cols();
  const double h = 1.0 / static_cast<double>(n_times);
  Tensor x = x0;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < n_times; ++s) {
    const double t = static_cast<double>(s) * h;
    Tensor vel = field(x, t);
    Tensor g = grad_l(x);
    for (std::size_t i = 0; i < B; ++i) {
      double sq = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        double r = g.at(i, k) + vel.at(i, k);
        sq += r * r;
      }
      acc += sq;
      ++count;
    }
    for (std::size_t i = 0; i < B * D; ++i) x.data[i] += h * vel.data[i];
  }
  return 0.5 * acc / static_cast<double>(count);
}

double action_gap_curves(const Tensor& curves, const GradFn& grad_l) {
  if (curves.rank() != 3) throw contract_error("action_gap_curves: expected rank-3 tensor");
  const std::size_t n_curves = curves.shape[0], T = curves.shape[1], D = curves.shape[2];
  if (T < 3) throw contract_error("action_gap_curves: need at least 3 grid points");
  const double h = 1.0 / static_cast<double>(T - 1);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < n_curves; ++c) {
    const double* base = curves.data.data() + c * T * D;
    // interior points only: central differences
    for (std::size_t j = 1; j + 1 < T; ++j) {
      Tensor pt({1, D});
      std::copy(base + j * D, base + (j + 1) * D, pt.data.begin());
      Tensor g = grad_l(pt);
      double sq = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        double vel = (base[(j + 1) * D + k] - base[(j - 1) * D + k]) / (2.0 * h);
        double r = g[k] + vel;
        sq += r * r;
      }
      acc += sq;
      ++count;
    }
  }
  return 0.5 * acc / static_cast<double>(count);
}

double grad_check(const std::function<double(std::span<const double>)>& fn,
                  std::span<const double> point, std::span<const double> analytic_grad,
                  double eps) {
  if (point.size() != analytic_grad.size()) throw contract_error("grad_check: size mismatch");
  std::vector<double> p(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double orig = p[i];
    p[i] = orig + eps;
    double fp = fn(p);
    p[i] = orig - eps;
    double fm = fn(p);
    p[i] = orig;
    double fd = (fp - fm) / (2.0 * eps);
    double g = analytic_grad[i];
    double denom = std::max(std::abs(fd), std::abs(g));
    double err = denom < 1e-6 ? std::abs(fd - g) : std::abs(fd - g) / denom;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace wf
