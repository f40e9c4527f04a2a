#include "weightflow/shiftdetect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "weightflow/errors.hpp"
#include "weightflow/flowgen.hpp"
#include "weightflow/rng.hpp"

namespace wf {

namespace {
constexpr double kProbFloor = 1e-12;
}

double dce_loss(const std::vector<double>& y_hat, int f_label) {
  std::size_t n = y_hat.size();
  if (n < 2) throw contract_error("dce_loss: need at least two classes");
  if (f_label < 0 || static_cast<std::size_t>(f_label) >= n)
    throw contract_error("dce_loss: f_label out of range");
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    if (static_cast<int>(c) == f_label) continue;
    acc += std::log(std::max(y_hat[c], kProbFloor));
  }
  return acc / (1.0 - static_cast<double>(n));
}

double cdc_loss(const MlpSpec& arch, std::span<const double> g_params,
                std::span<const double> f_params, const Tensor& px,
                const std::vector<int>& py, const Tensor& qx, double lambda) {
  std::size_t np = px.rows(), nq = qx.rows();
  if (np + nq == 0) throw contract_error("cdc_loss: both P and Q are empty");
  if (py.size() != np) throw dimension_error("cdc_loss: P labels/inputs mismatch");
  double total = 0.0;
  if (np > 0) {
    Tensor logits = mlp_forward(arch, g_params, px);
    total += softmax_cross_entropy(logits, py) * static_cast<double>(np);
  }
  if (nq > 0) {
    Tensor f_probs = softmax(mlp_forward(arch, f_params, qx));
    Tensor g_probs = softmax(mlp_forward(arch, g_params, qx));
    std::size_t C = arch.out_dim();
    std::vector<double> row(C);
    for (std::size_t i = 0; i < nq; ++i) {
      int f_label = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (f_probs.at(i, c) > f_probs.at(i, f_label)) f_label = static_cast<int>(c);
      for (std::size_t c = 0; c < C; ++c) row[c] = g_probs.at(i, c);
      total += lambda * dce_loss(row, f_label);
    }
  }
  return total / static_cast<double>(np + nq);
}

RewardFn neg_cdc_reward(const MlpSpec& arch, std::vector<double> f_params,
                        const SynthDataset& ds_p, Tensor qx, double lambda,
                        std::size_t p_size) {
  if (ds_p.val_inputs.rows() == 0) throw data_error("neg_cdc_reward: empty validation split");
  // f's labels on Q never change; precompute them once.
  Tensor f_logits = mlp_forward(arch, f_params, qx);
  std::size_t C = arch.out_dim(), nq = qx.rows();
  std::vector<int> f_labels(nq);
  for (std::size_t i = 0; i < nq; ++i) {
    int best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (f_logits.at(i, c) > f_logits.at(i, best)) best = static_cast<int>(c);
    f_labels[i] = best;
  }
  return [arch, &ds_p, qx = std::move(qx), f_labels, lambda,
          p_size](const Tensor& x1, Tensor& grad, std::uint64_t seed) -> double {
    if (x1.cols() < arch.param_count())
      throw dimension_error("neg_cdc_reward: weight dim smaller than the architecture");
    grad = Tensor({x1.rows(), x1.cols()});
    std::size_t C = arch.out_dim(), nq = qx.rows();
    Rng rng(seed);
    Tensor px({p_size, ds_p.val_inputs.cols()});
    std::vector<int> py(p_size);
    for (std::size_t i = 0; i < p_size; ++i) {
      std::size_t j = rng.index(ds_p.val_inputs.rows());
      for (std::size_t c = 0; c < px.cols(); ++c) px.at(i, c) = ds_p.val_inputs.at(j, c);
      py[i] = ds_p.val_labels[j];
    }
    double denom = static_cast<double>(p_size + nq);
    double total = 0.0;
    std::vector<double> gparams(arch.param_count());
    for (std::size_t r = 0; r < x1.rows(); ++r) {
      std::span<const double> w(x1.data.data() + r * x1.cols(), arch.param_count());
      std::fill(gparams.begin(), gparams.end(), 0.0);

      ForwardCache p_cache;
      Tensor p_logits = mlp_forward(arch, w, px, &p_cache);
      Tensor p_grad;
      double mean_ce = softmax_cross_entropy(p_logits, py, &p_grad);
      total += mean_ce * static_cast<double>(p_size) / denom;
      // mean-CE grad -> summed-CE grad, then /(|P|+|Q|)
      for (double& e : p_grad.data) e *= static_cast<double>(p_size) / denom;
      mlp_backward(p_cache, w, p_grad, gparams);

      ForwardCache q_cache;
      Tensor q_logits = mlp_forward(arch, w, qx, &q_cache);
      Tensor q_probs = softmax(q_logits);
      Tensor q_grad({nq, C});
      std::vector<double> row(C);
      for (std::size_t i = 0; i < nq; ++i) {
        for (std::size_t c = 0; c < C; ++c) row[c] = q_probs.at(i, c);
        total += lambda * dce_loss(row, f_labels[i]) / denom;
        // d dce/d logit_j = (1/(1-N)) 1_{j != f} + p_j
        for (std::size_t c = 0; c < C; ++c) {
          double g = q_probs.at(i, c);
          if (static_cast<int>(c) != f_labels[i]) g += 1.0 / (1.0 - static_cast<double>(C));
          q_grad.at(i, c) = lambda * g / denom;
        }
      }
      mlp_backward(q_cache, w, q_grad, gparams);
      for (std::size_t d = 0; d < gparams.size(); ++d) grad.at(r, d) = gparams[d];
    }
    return total / static_cast<double>(x1.rows());
  };
}

std::vector<double> entropy_stat(const MlpSpec& arch, std::span<const double> f_params,
                                 std::span<const double> g_params, const Tensor& x) {
  Tensor fp = softmax(mlp_forward(arch, f_params, x));
  Tensor gp = softmax(mlp_forward(arch, g_params, x));
  std::size_t C = arch.out_dim();
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double p = 0.5 * (fp.at(i, c) + gp.at(i, c));
      if (p > 0.0) s += p * std::log(p);
    }
    out[i] = s;
  }
  return out;
}

double disagreement_rate(const MlpSpec& arch, std::span<const double> f_params,
                         std::span<const double> g_params, const Tensor& x) {
  if (x.rows() == 0) throw contract_error("disagreement_rate: empty evaluation set");
  Tensor fl = mlp_forward(arch, f_params, x);
  Tensor gl = mlp_forward(arch, g_params, x);
  std::size_t C = arch.out_dim(), miss = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::size_t fa = 0, ga = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (fl.at(i, c) > fl.at(i, fa)) fa = c;
      if (gl.at(i, c) > gl.at(i, ga)) ga = c;
    }
    if (fa != ga) ++miss;
  }
  return static_cast<double>(miss) / static_cast<double>(x.rows());
}

KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw contract_error("ks_two_sample: empty sample");
  std::vector<double> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  while (i < sa.size() && j < sb.size()) {
    double x = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] <= x) ++i;
    while (j < sb.size() && sb[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  // asymptotic Kolmogorov tail at the effective sample size
  double ne = na * nb / (na + nb);
  double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  double p = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    double term = sign * std::exp(-2.0 * k * k * lambda * lambda);
    p += term;
    sign = -sign;
    if (std::abs(term) < 1e-16) break;
  }
  p = std::clamp(2.0 * p, 0.0, 1.0);
  if (d == 0.0) p = 1.0;
  return {d, p};
}

double empirical_quantile(std::vector<double> xs, double p) {
  if (xs.empty()) throw contract_error("empirical_quantile: empty sample");
  std::sort(xs.begin(), xs.end());
  double n = static_cast<double>(xs.size());
  double h = (n + 1.0) * p;  // order statistic position, 1-based
  if (h <= 1.0) return xs.front();
  if (h >= n) return xs.back();
  std::size_t lo = static_cast<std::size_t>(std::floor(h));
  double frac = h - static_cast<double>(lo);
  return xs[lo - 1] + frac * (xs[lo] - xs[lo - 1]);
}

bool disagreement_test(const std::vector<double>& phi_null, double phi_q, double alpha) {
  if (phi_null.size() < 2) throw contract_error("disagreement_test: need >= 2 null samples");
  return phi_q > empirical_quantile(phi_null, 1.0 - alpha);
}

CdcConfig CdcConfig::make() {
  CdcConfig cfg;
  cfg.ft.lr = 1.5e-5;
  cfg.ft.iterations = 100;
  return cfg;
}

double CdcConfig::lambda() const {
  double k = kappa > 0.0 ? kappa
                         : 32.0 * static_cast<double>(q_size) / 20.0;  // reference 32 at |Q|=20
  return k / (static_cast<double>(q_size) + 1.0);
}

namespace {

// One generated classifier: Euler endpoint of the (fine-tuned) meta-model.
std::vector<double> draw_weights(const VelocityModel& meta, const SourceDist& src,
                                 const MlpSpec& arch, std::size_t steps, std::uint64_t seed) {
  GenConfig gc;
  gc.steps = steps;
  Tensor x1 = integrate_batch(meta, src.sample(1, seed), nullptr, gc);
  return {x1.data.begin(), x1.data.begin() + static_cast<std::ptrdiff_t>(arch.param_count())};
}

Tensor sample_rows(const Tensor& x, std::size_t n, Rng& rng) {
  Tensor out({n, x.cols()});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = rng.index(x.rows());
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(i, c) = x.at(j, c);
  }
  return out;
}

}  // namespace

ShiftReport meta_detectron(const VelocityModel& base_meta, const SourceDist& src,
                           const MlpSpec& arch, const SynthDataset& ds_p, const Tensor& qx,
                           const CdcConfig& cfg) {
  if (qx.rows() == 0) throw data_error("meta_detectron: empty Q sample");
  std::size_t steps = static_cast<std::size_t>(std::llround(1.0 / cfg.ft.h));
  ShiftReport report;

  for (std::uint64_t seed : cfg.seeds) {
    SeedStats st;
    st.seed = seed;
    Rng rng(seed * 0x9e3779b97f4a7c15ULL + 5);

    // base classifier f from the frozen meta-model; P is labeled, so screen a
    // few candidates and keep the most accurate one
    std::vector<double> f_w;
    double f_acc = -1.0;
    for (std::size_t cand = 0; cand < 5; ++cand) {
      std::vector<double> w = draw_weights(base_meta, src, arch, steps, seed * 7331 + cand + 1);
      Tensor logits = mlp_forward(arch, w, ds_p.val_inputs);
      std::size_t C = arch.out_dim(), hits = 0;
      for (std::size_t i = 0; i < ds_p.val_inputs.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
          if (logits.at(i, c) > logits.at(i, best)) best = c;
        hits += ds_p.val_labels[i] == static_cast<int>(best);
      }
      double acc = static_cast<double>(hits) / static_cast<double>(ds_p.val_inputs.rows());
      if (acc > f_acc) {
        f_acc = acc;
        f_w = std::move(w);
      }
    }

    // disagreement sets: the given Q and a fresh P* from held-out validation
    Tensor q_batch = sample_rows(qx, std::min(cfg.q_size, qx.rows()), rng);
    Tensor p_star = sample_rows(ds_p.val_inputs, cfg.q_size, rng);

    auto run = [&](const Tensor& dis_set) {
      RewardSpec rw;
      rw.loss_grad = neg_cdc_reward(arch, f_w, ds_p, dis_set, cfg.lambda(), cfg.p_size);
      rw.pad_reg_weight = 0.0;
      FtConfig ft = cfg.ft;
      ft.seed = seed * 101 + 7;
      return finetune(base_meta, src, rw, ft);
    };
    FinetuneResult ft_q = run(q_batch);
    FinetuneResult ft_p = run(p_star);

    double phi_q = 0.0, phi_p = 0.0, phi_q_val = 0.0, phi_p_val = 0.0;
    double acc_before = 0.0, acc_after = 0.0;
    for (std::size_t k = 0; k < cfg.n_draws; ++k) {
      std::uint64_t ds_seed = seed * 52361 + 11 * k + 2;
      std::vector<double> g_q = draw_weights(ft_q.v_ft, src, arch, steps, ds_seed);
      std::vector<double> g_p = draw_weights(ft_p.v_ft, src, arch, steps, ds_seed);
      std::vector<double> g_0 = draw_weights(base_meta, src, arch, steps, ds_seed);
      phi_q += disagreement_rate(arch, f_w, g_q, q_batch);
      phi_p += disagreement_rate(arch, f_w, g_p, p_star);
      phi_q_val += disagreement_rate(arch, f_w, g_q, ds_p.val_inputs);
      phi_p_val += disagreement_rate(arch, f_w, g_p, ds_p.val_inputs);
      auto ent_q = entropy_stat(arch, f_w, g_q, q_batch);
      auto ent_p = entropy_stat(arch, f_w, g_p, p_star);
      st.entropy_q.insert(st.entropy_q.end(), ent_q.begin(), ent_q.end());
      st.entropy_p.insert(st.entropy_p.end(), ent_p.begin(), ent_p.end());

      Tensor logits0 = mlp_forward(arch, g_0, ds_p.val_inputs);
      Tensor logits1 = mlp_forward(arch, g_q, ds_p.val_inputs);
      std::size_t C = arch.out_dim(), hit0 = 0, hit1 = 0;
      for (std::size_t i = 0; i < ds_p.val_inputs.rows(); ++i) {
        std::size_t a0 = 0, a1 = 0;
        for (std::size_t c = 1; c < C; ++c) {
          if (logits0.at(i, c) > logits0.at(i, a0)) a0 = c;
          if (logits1.at(i, c) > logits1.at(i, a1)) a1 = c;
        }
        hit0 += ds_p.val_labels[i] == static_cast<int>(a0);
        hit1 += ds_p.val_labels[i] == static_cast<int>(a1);
      }
      acc_before += static_cast<double>(hit0) / static_cast<double>(ds_p.val_inputs.rows());
      acc_after += static_cast<double>(hit1) / static_cast<double>(ds_p.val_inputs.rows());
    }
    double nd = static_cast<double>(cfg.n_draws);
    st.phi_q = phi_q / nd;
    st.phi_p_star = phi_p / nd;
    st.phi_q_val = phi_q_val / nd;
    st.phi_p_star_val = phi_p_val / nd;
    st.acc_before = acc_before / nd;
    st.acc_after = acc_after / nd;
    KsResult ks = ks_two_sample(st.entropy_p, st.entropy_q);
    st.ks_d = ks.d;
    st.ks_p = ks.p_value;
    report.per_seed.push_back(std::move(st));
  }

  std::vector<double> phi_null, phi_shift;
  for (const auto& st : report.per_seed) {
    phi_null.push_back(st.phi_p_star);
    phi_shift.push_back(st.phi_q);
  }
  AggregateResult dar = aggregate(phi_null, phi_shift);
  report.tpr_at_5 = dar.tpr_at_5;
  report.auroc_dar = dar.auroc;
  // The entropy test's decision statistic is the per-run KS p-value: shifted
  // runs should have small p. Rank 1 - p against a uniform null.
  double wins = 0.0;
  for (const auto& st : report.per_seed) {
    // AUROC of (1 - ks_p) against the ideal uniform null distribution of
    // p-values: P(U > ks_p) = 1 - ks_p.
    wins += 1.0 - st.ks_p;
  }
  report.auroc_entropy = wins / static_cast<double>(report.per_seed.size());
  return report;
}

AggregateResult aggregate(const std::vector<double>& null_stats,
                          const std::vector<double>& shifted_stats, double alpha) {
  if (null_stats.size() < 2 || shifted_stats.empty())
    throw contract_error("aggregate: need >= 2 null and >= 1 shifted statistics");
  AggregateResult out;
  std::size_t fired = 0;
  for (double s : shifted_stats) fired += disagreement_test(null_stats, s, alpha);
  out.tpr_at_5 = static_cast<double>(fired) / static_cast<double>(shifted_stats.size());
  // Mann-Whitney AUROC with tie correction
  double wins = 0.0;
  for (double s : shifted_stats)
    for (double n : null_stats) {
      if (s > n)
        wins += 1.0;
      else if (s == n)
        wins += 0.5;
    }
  out.auroc = wins / (static_cast<double>(null_stats.size()) *
                      static_cast<double>(shifted_stats.size()));
  return out;
}

}  // namespace wf
