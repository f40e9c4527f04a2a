#pragma once

#include <cstdint>
#include <vector>

#include "weightflow/adjoint.hpp"
#include "weightflow/dataset.hpp"
#include "weightflow/mlp.hpp"
#include "weightflow/models.hpp"
#include "weightflow/tensor.hpp"

namespace wf {

// Disagreement-cross-entropy: (1/(1-N)) sum_{c != f_label} log(y_hat_c).
// Probabilities are clamped at 1e-12 before the log.
double dce_loss(const std::vector<double>& y_hat, int f_label);

// (sum_P ce + lambda sum_Q dce) / (|P| + |Q|) for the classifier weights g;
// f provides the disagreement labels on Q and is never updated.
double cdc_loss(const MlpSpec& arch, std::span<const double> g_params,
                std::span<const double> f_params, const Tensor& px,
                const std::vector<int>& py, const Tensor& qx, double lambda);

// Reward callback for adjointft: loss = cdc with a fresh p_size P-batch per
// call (drawn from the validation split) and the fixed Q sample.
RewardFn neg_cdc_reward(const MlpSpec& arch, std::vector<double> f_params,
                        const SynthDataset& ds_p, Tensor qx, double lambda,
                        std::size_t p_size);

// sum_c p_c log p_c of the averaged prediction (f(x)+g(x))/2, as a batch.
std::vector<double> entropy_stat(const MlpSpec& arch, std::span<const double> f_params,
                                 std::span<const double> g_params, const Tensor& x);

// Fraction of rows where argmax f(x) != argmax g(x).
double disagreement_rate(const MlpSpec& arch, std::span<const double> f_params,
                         std::span<const double> g_params, const Tensor& x);

struct KsResult {
  double d = 0.0;
  double p_value = 1.0;
};

// Two-sample Kolmogorov-Smirnov statistic with the asymptotic p-value at
// effective sample size n_a n_b / (n_a + n_b).
KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b);

// Empirical (1 - alpha) quantile of the null samples by linear interpolation
// of order statistics (h = (n+1) p, clamped to the sample range).
double empirical_quantile(std::vector<double> xs, double p);

// True iff phi_q exceeds the (1 - alpha) null quantile.
bool disagreement_test(const std::vector<double>& phi_null, double phi_q, double alpha = 0.05);

struct CdcConfig {
  double kappa = -1.0;   // negative: scale from the reference 32 at |Q| = 20
  std::size_t q_size = 20;
  std::size_t p_size = 64;
  std::size_t n_draws = 5;  // generated classifiers per fine-tuned model
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  FtConfig ft;  // defaults overridden below in make()

  static CdcConfig make();
  double lambda() const;
};

struct SeedStats {
  std::uint64_t seed = 0;
  double phi_p_star = 0.0;  // disagreement of g_P* on its P* sample
  double phi_q = 0.0;       // disagreement of g_Q on the Q sample
  double phi_p_star_val = 0.0, phi_q_val = 0.0;  // same models on P validation
  std::vector<double> entropy_p, entropy_q;
  double ks_d = 0.0, ks_p = 1.0;
  double acc_before = 0.0, acc_after = 0.0;  // generated-classifier accuracy on P val
};

struct ShiftReport {
  std::vector<SeedStats> per_seed;
  double tpr_at_5 = 0.0;
  double auroc_dar = 0.5;
  double auroc_entropy = 0.5;
};

// Fine-tunes two copies of the meta-model per seed (disagreement set Q vs a
// fresh P* sample) and runs both shift statistics.
ShiftReport meta_detectron(const VelocityModel& base_meta, const SourceDist& src,
                           const MlpSpec& arch, const SynthDataset& ds_p, const Tensor& qx,
                           const CdcConfig& cfg);

struct AggregateResult {
  double tpr_at_5 = 0.0;
  double auroc = 0.5;
};

// TPR@5 against the null quantile plus a rank-based (Mann-Whitney) AUROC.
AggregateResult aggregate(const std::vector<double>& null_stats,
                          const std::vector<double>& shifted_stats, double alpha = 0.05);

}  // namespace wf
