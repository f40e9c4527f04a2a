#include "weightflow/metatrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "weightflow/errors.hpp"
#include "weightflow/otmetrics.hpp"
#include "weightflow/rng.hpp"

namespace wf {

namespace {

// Shared core: given per-sample knot rows and knot times, draw t and the path
// noise, evaluate the model, and accumulate parameter gradients. Knots with
// two entries at {0,1} is exactly the CFM case.
double pwl_flow_loss(const VelocityModel& model, const std::vector<const Tensor*>& knots,
                     const std::vector<double>& times, const Tensor* context,
                     const GaussPathParams& path, std::uint64_t seed,
                     std::span<double> grad_params) {
  const std::size_t K = knots.size() - 1;
  const std::size_t B = knots[0]->rows(), D = knots[0]->cols();
  for (const Tensor* k : knots)
    if (k->rows() != B || k->cols() != D) throw dimension_error("flow loss: ragged knot batch");
  for (std::size_t k = 0; k + 1 <= K; ++k)
    if (times[k + 1] <= times[k]) throw domain_error("flow loss: knot times not increasing");
  if (path.sigma < 0.0) throw domain_error("flow loss: negative sigma");

  Rng rng(seed);
  Tensor xt({B, D}), target({B, D});
  std::vector<double> ts(B);
  for (std::size_t b = 0; b < B; ++b) {
    double t = rng.uniform(times.front(), times.back());
    ts[b] = t;
    // active segment, right-open; t == t_K falls in the last segment
    std::size_t k = K - 1;
    for (std::size_t s = 0; s + 1 <= K; ++s)
      if (t < times[s + 1]) {
        k = s;
        break;
      }
    double dt = times[k + 1] - times[k];
    double frac = (t - times[k]) / dt;
    for (std::size_t j = 0; j < D; ++j) {
      double lo = knots[k]->at(b, j), hi = knots[k + 1]->at(b, j);
      double slope = (hi - lo) / dt;
      target.at(b, j) = slope;
      xt.at(b, j) = lo + frac * dt * slope + path.sigma * rng.normal();
    }
  }

  ForwardCache cache;
  Tensor v = model.eval(xt, ts, context, &cache);
  Tensor grad_v({B, D});
  double loss = 0.0;
  for (std::size_t i = 0; i < B * D; ++i) {
    double r = v.data[i] - target.data[i];
    loss += r * r;
    grad_v.data[i] = 2.0 * r / static_cast<double>(B);
  }
  loss /= static_cast<double>(B);
  model.backward(cache, grad_v, grad_params);
  return loss;
}

}  // namespace

double cfm_loss(const VelocityModel& model, const Tensor& x0, const Tensor& x1,
                const Tensor* context, const GaussPathParams& path, std::uint64_t seed,
                std::span<double> grad_params) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
    throw dimension_error("cfm_loss: x0/x1 shape mismatch");
  std::vector<const Tensor*> knots{&x0, &x1};
  return pwl_flow_loss(model, knots, {0.0, 1.0}, context, path, seed, grad_params);
}

double mmfm_loss(const VelocityModel& model, const std::vector<Tensor>& knots,
                 const std::vector<double>& times, const Tensor* context,
                 const GaussPathParams& path, std::uint64_t seed, std::span<double> grad_params) {
  if (knots.size() < 2) throw contract_error("mmfm_loss: need at least two marginals (K >= 1)");
  if (times.size() != knots.size()) throw dimension_error("mmfm_loss: times/knots length mismatch");
  std::vector<const Tensor*> ptrs;
  for (const Tensor& k : knots) ptrs.push_back(&k);
  return pwl_flow_loss(model, ptrs, times, context, path, seed, grad_params);
}

double jkonet_loss(const PotentialModel& model, const JkoPairs& pairs,
                   std::span<double> grad_params) {
  if (pairs.optimizer_tag != "sgd")
    throw contract_error("jkonet_loss: requires SGD-pretrained checkpoints, got optimizer '" +
                         pairs.optimizer_tag + "'");
  const std::size_t B = pairs.x.rows(), D = pairs.x.cols();
  if (pairs.x_next.rows() != B || pairs.x_next.cols() != D || pairs.times.size() != B ||
      pairs.dts.size() != B)
    throw dimension_error("jkonet_loss: pair batch shape mismatch");

  PotentialGradCache cache;
  Tensor g = model.grad_x(pairs.x, pairs.times, &cache);
  Tensor resid({B, D});
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (pairs.dts[b] <= 0.0) throw domain_error("jkonet_loss: nonpositive dt");
    for (std::size_t j = 0; j < D; ++j) {
      double r = g.at(b, j) + (pairs.x_next.at(b, j) - pairs.x.at(b, j)) / pairs.dts[b];
      resid.at(b, j) = r;
      loss += r * r;
    }
  }
  loss /= static_cast<double>(B);
  Tensor c({B, D});
  for (std::size_t i = 0; i < B * D; ++i) c.data[i] = 2.0 * resid.data[i] / static_cast<double>(B);
  model.grad_x_backward(cache, c, grad_params);
  return loss;
}

double default_meta_lr(MetaKind kind) {
  switch (kind) {
    case MetaKind::cfm:
      return 1e-4;
    case MetaKind::mmfm:
      return 3e-4;
    case MetaKind::jko:
      return 5e-3;
  }
  return 1e-4;
}

namespace {

struct PoolEntry {
  std::size_t zoo = 0;
  std::size_t row = 0;  // flattened row within the zoo
};

Tensor gather_rows(const Tensor& flat3, const std::vector<std::size_t>& rows, std::size_t D) {
  Tensor out({rows.size(), D});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(&flat3.data[rows[i] * D], &flat3.data[(rows[i] + 1) * D], &out.data[i * D]);
  return out;
}

}  // namespace

TrainedMeta train_meta(MetaKind kind, const std::vector<TrajectoryTensor>& zoos,
                       const MetaTrainConfig& cfg, const std::vector<Tensor>* contexts) {
  if (zoos.empty()) throw contract_error("train_meta: empty zoo");
  const std::size_t D = zoos[0].dim();
  for (const auto& z : zoos)
    if (z.dim() != D) throw dimension_error("train_meta: zoos disagree on padded dim");
  if (cfg.context_dim > 0 && (contexts == nullptr || contexts->size() != zoos.size()))
    throw contract_error("train_meta: context conditioning requires one context per zoo");

  const double lr = cfg.lr >= 0.0 ? cfg.lr : default_meta_lr(kind);
  OptimState optim = OptimState::adamw(lr, cfg.weight_decay);
  Rng rng(cfg.seed);

  TrainedMeta out;
  out.kind = kind;
  out.loss_curve.reserve(cfg.epochs);

  if (kind == MetaKind::jko) {
    JkoPairs all;
    std::vector<Tensor> xs, nexts;
    std::vector<double> ts, dts;
    double max_iter = 0.0;
    for (const auto& z : zoos) {
      if (z.optimizer != "sgd")
        throw contract_error("train_meta: jko requires an SGD zoo, got '" + z.optimizer + "'");
      for (std::size_t t : z.times) max_iter = std::max(max_iter, static_cast<double>(t));
    }
    std::vector<double> px, pn, pt, pdt;
    for (const auto& z : zoos) {
      for (std::size_t e = 0; e < z.n_epochs(); ++e)
        for (std::size_t s = 0; s + 1 < z.saves_per_epoch(); ++s) {
          std::size_t r = e * z.saves_per_epoch() + s;
          px.insert(px.end(), &z.data.data[r * D], &z.data.data[(r + 1) * D]);
          pn.insert(pn.end(), &z.data.data[(r + 1) * D], &z.data.data[(r + 2) * D]);
          pt.push_back(static_cast<double>(z.times[r]) / max_iter);
          pdt.push_back(static_cast<double>(z.times[r + 1] - z.times[r]) / max_iter);
        }
    }
    const std::size_t n_pairs = pt.size();
    if (n_pairs == 0)
      throw contract_error("train_meta: jko needs saves_per_epoch >= 2 for consecutive pairs");
    Tensor X({n_pairs, D}, std::move(px)), XN({n_pairs, D}, std::move(pn));

    out.potential = PotentialModel::make(D, cfg.hidden, cfg.time_embed_dim, cfg.seed + 1);
    std::vector<double> grads(out.potential.params.size());
    std::vector<std::size_t> order(n_pairs);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng.engine());
      double epoch_loss = 0.0;
      std::size_t n_batches = 0;
      for (std::size_t lo = 0; lo < n_pairs; lo += cfg.batch, ++n_batches) {
        std::size_t hi = std::min(lo + cfg.batch, n_pairs);
        std::vector<std::size_t> rows(order.begin() + lo, order.begin() + hi);
        JkoPairs batch;
        batch.x = gather_rows(X, rows, D);
        batch.x_next = gather_rows(XN, rows, D);
        for (std::size_t r : rows) {
          batch.times.push_back(pt[r]);
          batch.dts.push_back(pdt[r]);
        }
        std::fill(grads.begin(), grads.end(), 0.0);
        double loss = jkonet_loss(out.potential, batch, grads);
        if (!std::isfinite(loss)) throw training_error("train_meta: jko loss diverged");
        optimizer_step(optim, out.potential.params, grads);
        epoch_loss += loss;
      }
      out.loss_curve.push_back(epoch_loss / static_cast<double>(n_batches));
    }
    return out;
  }

  out.velocity =
      VelocityModel::make(D, cfg.hidden, cfg.time_embed_dim, cfg.context_dim, cfg.seed + 1);
  std::vector<double> grads(out.velocity.params.size());

  if (kind == MetaKind::cfm) {
    // target pool: rows of the final save epoch of each zoo
    std::vector<PoolEntry> pool;
    for (std::size_t zi = 0; zi < zoos.size(); ++zi) {
      const auto& z = zoos[zi];
      std::size_t base = (z.n_epochs() - 1) * z.saves_per_epoch();
      for (std::size_t s = 0; s < z.saves_per_epoch(); ++s) pool.push_back({zi, base + s});
    }
    SourceDist src{cfg.source, zoos[0].arch, D};
    Tensor fixed_x0;
    if (!cfg.resample_p0) fixed_x0 = src.sample(pool.size(), cfg.seed + 2);

    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng.engine());
      double epoch_loss = 0.0;
      std::size_t n_batches = 0;
      for (std::size_t lo = 0; lo < pool.size(); lo += cfg.batch, ++n_batches) {
        std::size_t hi = std::min(lo + cfg.batch, pool.size());
        std::size_t B = hi - lo;
        Tensor x0({B, D}), x1({B, D});
        Tensor ctx({B, cfg.context_dim});
        for (std::size_t i = 0; i < B; ++i) {
          const PoolEntry& e = pool[order[lo + i]];
          const auto& z = zoos[e.zoo];
          std::copy(&z.data.data[e.row * D], &z.data.data[(e.row + 1) * D], &x1.data[i * D]);
          if (!cfg.resample_p0)
            std::copy(&fixed_x0.data[order[lo + i] * D], &fixed_x0.data[(order[lo + i] + 1) * D],
                      &x0.data[i * D]);
          if (cfg.context_dim > 0) {
            const Tensor& cv = (*contexts)[e.zoo];
            if (cv.numel() != cfg.context_dim)
              throw dimension_error("train_meta: context vector dim mismatch");
            std::copy(cv.data.begin(), cv.data.end(), &ctx.data[i * cfg.context_dim]);
          }
        }
        if (cfg.resample_p0) {
          std::uint64_t s = cfg.seed * 7919 + epoch * 613 + n_batches + 1;
          Tensor draw = src.sample(B, s);
          x0 = std::move(draw);
        }
        if (cfg.ot_coupling) {
          Tensor cost({B, B});
          for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < B; ++j) {
              double s = 0.0;
              for (std::size_t d = 0; d < D; ++d) {
                double diff = x0.at(i, d) - x1.at(j, d);
                s += diff * diff;
              }
              cost.at(i, j) = s;
            }
          auto assign = solve_assignment(cost);
          Tensor x1p({B, D});
          for (std::size_t i = 0; i < B; ++i)
            std::copy(&x1.data[assign[i] * D], &x1.data[(assign[i] + 1) * D], &x1p.data[i * D]);
          x1 = std::move(x1p);
        }
        std::fill(grads.begin(), grads.end(), 0.0);
        std::uint64_t ls = cfg.seed * 104729 + epoch * 1543 + n_batches;
        double loss = cfm_loss(out.velocity, x0, x1, cfg.context_dim > 0 ? &ctx : nullptr,
                               cfg.path, ls, grads);
        if (!std::isfinite(loss)) throw training_error("train_meta: cfm loss diverged");
        optimizer_step(optim, out.velocity.params, grads);
        epoch_loss += loss;
      }
      out.loss_curve.push_back(epoch_loss / static_cast<double>(n_batches));
    }
    return out;
  }

  // mmfm: one sampled trajectory batch per epoch, zoos visited round-robin
  if (cfg.n_marginals < 2) throw contract_error("train_meta: mmfm needs n_marginals >= 2");
  SourceDist mm_src{cfg.source, zoos[0].arch, D};
  const std::size_t K = cfg.n_marginals - 1;
  std::vector<double> times(cfg.n_marginals);
  for (std::size_t k = 0; k <= K; ++k) times[k] = static_cast<double>(k) / static_cast<double>(K);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto& z = zoos[epoch % zoos.size()];
    Tensor s = sample_trajectories(z, cfg.n_marginals, cfg.marginal_noise,
                                   cfg.seed * 31337 + epoch);
    const std::size_t S = s.shape[1];
    std::vector<Tensor> knots(cfg.n_marginals, Tensor({S, D}));
    for (std::size_t k = 0; k <= K; ++k)
      std::copy(&s.data[k * S * D], &s.data[(k + 1) * S * D], knots[k].data.begin());
    if (cfg.resample_p0) knots[0] = mm_src.sample(S, cfg.seed * 7919 + epoch + 1);
    Tensor ctx({S, cfg.context_dim});
    if (cfg.context_dim > 0) {
      const Tensor& cv = (*contexts)[epoch % zoos.size()];
      for (std::size_t i = 0; i < S; ++i)
        std::copy(cv.data.begin(), cv.data.end(), &ctx.data[i * cfg.context_dim]);
    }
    std::fill(grads.begin(), grads.end(), 0.0);
    double loss = mmfm_loss(out.velocity, knots, times, cfg.context_dim > 0 ? &ctx : nullptr,
                            cfg.path, cfg.seed * 104729 + epoch, grads);
    if (!std::isfinite(loss)) throw training_error("train_meta: mmfm loss diverged");
    optimizer_step(optim, out.velocity.params, grads);
    out.loss_curve.push_back(loss);
  }
  return out;
}

}  // namespace wf
