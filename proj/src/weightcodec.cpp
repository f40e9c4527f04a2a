#include "weightflow/weightcodec.hpp"

#include <algorithm>
#include <cmath>

#include "weightflow/errors.hpp"
#include "weightflow/rng.hpp"

namespace wf {

WeightVec flatten_pad(const MlpSpec& arch, std::span<const double> params, std::size_t target_dim,
                      std::string dataset_tag) {
  if (params.size() != arch.param_count())
    throw dimension_error("flatten_pad: params do not match arch");
  if (target_dim < params.size())
    throw dimension_error("flatten_pad: target_dim smaller than raw dim");
  WeightVec w;
  w.arch = arch;
  w.dataset_tag = std::move(dataset_tag);
  w.values.assign(target_dim, 0.0);
  std::copy(params.begin(), params.end(), w.values.begin());
  w.pad_mask.assign(target_dim, 0);
  std::fill(w.pad_mask.begin(), w.pad_mask.begin() + params.size(), 1);
  return w;
}

std::vector<double> unflatten(const WeightVec& w) {
  if (w.values.size() < w.arch.param_count())
    throw dimension_error("unflatten: vector shorter than arch param count");
  return {w.values.begin(), w.values.begin() + w.arch.param_count()};
}

std::vector<Tensor> chunk(const WeightVec& w, std::size_t chunk_len) {
  if (chunk_len == 0) throw contract_error("chunk: chunk_len must be positive");
  const std::size_t d = w.values.size();
  const std::size_t n_chunks = (d + chunk_len - 1) / chunk_len;
  std::vector<Tensor> out;
  out.reserve(n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    Tensor t({chunk_len});
    for (std::size_t i = 0; i < chunk_len; ++i) {
      std::size_t idx = c * chunk_len + i;
      t[i] = idx < d ? w.values[idx] : 0.0;
    }
    out.push_back(std::move(t));
  }
  return out;
}

WeightVec augment(const WeightVec& w, AugmentKind kind, const WeightVec* partner,
                  std::uint64_t seed, const AugmentConfig& cfg) {
  Rng rng(seed);
  WeightVec out = w;
  switch (kind) {
    case AugmentKind::noise:
      for (std::size_t i = 0; i < out.values.size(); ++i)
        if (out.pad_mask[i]) out.values[i] += rng.normal(0.0, cfg.noise_std);
      break;
    case AugmentKind::dropout:
      for (std::size_t i = 0; i < out.values.size(); ++i)
        if (out.pad_mask[i] && cfg.dropout_p > 0.0 && rng.bernoulli(cfg.dropout_p))
          out.values[i] = 0.0;
      break;
    case AugmentKind::mixup: {
      if (!partner) throw contract_error("augment: mixup requires a partner");
      if (!(partner->arch == w.arch) || partner->values.size() != w.values.size())
        throw contract_error("augment: mixup partner arch mismatch");
      double alpha = rng.uniform();
      for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = (1.0 - alpha) * w.values[i] + alpha * partner->values[i];
      break;
    }
  }
  return out;
}

VaeModel make_vae(std::size_t dim, std::size_t latent_dim, std::vector<std::size_t> hidden,
                  std::uint64_t seed) {
  if (latent_dim >= dim) throw contract_error("make_vae: latent_dim must be < dim");
  VaeModel m;
  m.latent_dim = latent_dim;
  std::vector<std::size_t> enc_w{dim};
  enc_w.insert(enc_w.end(), hidden.begin(), hidden.end());
  enc_w.push_back(2 * latent_dim);
  std::vector<std::size_t> dec_w{latent_dim};
  for (auto it = hidden.rbegin(); it != hidden.rend(); ++it) dec_w.push_back(*it);
  dec_w.push_back(dim);
  m.encoder = MlpSpec(enc_w, Activation::tanh);
  m.decoder = MlpSpec(dec_w, Activation::tanh);
  m.enc_params = kaiming_init(m.encoder, InitMode::uniform, seed);
  m.dec_params = kaiming_init(m.decoder, InitMode::uniform, seed + 1);
  return m;
}

VaeLoss vae_loss(const VaeModel& model, const Tensor& w, std::uint64_t seed,
                 std::vector<double>* grad_enc, std::vector<double>* grad_dec) {
  const std::size_t B = w.rows(), D = w.cols(), L = model.latent_dim;
  if (D != model.encoder.in_dim() || D != model.decoder.out_dim())
    throw dimension_error("vae_loss: input dim does not match model");
  Rng rng(seed);

  Tensor w_noisy = w;
  if (model.sigma_in > 0.0)
    for (auto& v : w_noisy.data) v += rng.normal(0.0, model.sigma_in);

  ForwardCache enc_cache;
  Tensor enc_out = mlp_forward(model.encoder, model.enc_params, w_noisy, &enc_cache);

  Tensor mu({B, L}), logvar({B, L}), sigma({B, L}), xi({B, L});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      mu.at(i, j) = enc_out.at(i, j);
      logvar.at(i, j) = enc_out.at(i, L + j);
      sigma.at(i, j) = std::exp(0.5 * logvar.at(i, j));
      xi.at(i, j) = rng.normal();
    }

  Tensor z({B, L});
  for (std::size_t i = 0; i < B * L; ++i) z.data[i] = mu.data[i] + sigma.data[i] * xi.data[i];
  if (model.sigma_lat > 0.0)
    for (auto& v : z.data) v += rng.normal(0.0, model.sigma_lat);

  ForwardCache dec_cache;
  Tensor w_hat = mlp_forward(model.decoder, model.dec_params, z, &dec_cache);

  VaeLoss out;
  for (std::size_t i = 0; i < B * D; ++i) {
    double r = w_hat.data[i] - w.data[i];
    out.recon += r * r;
  }
  out.recon /= static_cast<double>(B * D);
  for (std::size_t i = 0; i < B * L; ++i) {
    double m = mu.data[i], s2 = sigma.data[i] * sigma.data[i];
    out.kl += 0.5 * (m * m + s2 - 1.0 - logvar.data[i]);
  }
  out.kl /= static_cast<double>(B);
  out.loss = out.recon + model.beta * out.kl;
  if (!std::isfinite(out.loss)) throw numeric_error("vae_loss: non-finite loss");

  if (grad_enc || grad_dec) {
    std::vector<double> ge(model.encoder.param_count(), 0.0);
    std::vector<double> gd(model.decoder.param_count(), 0.0);

    Tensor d_what({B, D});
    for (std::size_t i = 0; i < B * D; ++i)
      d_what.data[i] = 2.0 * (w_hat.data[i] - w.data[i]) / static_cast<double>(B * D);
    Tensor dz;
    mlp_backward(dec_cache, model.dec_params, d_what, gd, &dz);

    // chain through reparameterization plus KL closed form
    Tensor d_enc_out({B, 2 * L});
    const double invB = 1.0 / static_cast<double>(B);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        double dmu = dz.at(i, j) + model.beta * mu.at(i, j) * invB;
        double s2 = sigma.at(i, j) * sigma.at(i, j);
        double dlogvar = dz.at(i, j) * xi.at(i, j) * sigma.at(i, j) * 0.5 +
                         model.beta * 0.5 * (s2 - 1.0) * invB;
        d_enc_out.at(i, j) = dmu;
        d_enc_out.at(i, L + j) = dlogvar;
      }
    mlp_backward(enc_cache, model.enc_params, d_enc_out, ge);
    if (grad_enc) *grad_enc = std::move(ge);
    if (grad_dec) *grad_dec = std::move(gd);
  }
  return out;
}

Tensor vae_encode_mean(const VaeModel& model, const Tensor& w) {
  Tensor enc_out = mlp_forward(model.encoder, model.enc_params, w);
  const std::size_t B = w.rows(), L = model.latent_dim;
  Tensor mu({B, L});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < L; ++j) mu.at(i, j) = enc_out.at(i, j);
  return mu;
}

Tensor vae_decode(const VaeModel& model, const Tensor& z) {
  return mlp_forward(model.decoder, model.dec_params, z);
}

std::vector<double> train_vae(VaeModel& model, const Tensor& zoo, const VaeTrainConfig& cfg) {
  const std::size_t N = zoo.rows(), D = zoo.cols();
  if (N == 0) throw contract_error("train_vae: empty zoo");
  Rng rng(cfg.seed);
  OptimState opt_e = OptimState::adamw(cfg.lr, cfg.weight_decay);
  OptimState opt_d = OptimState::adamw(cfg.lr, cfg.weight_decay);
  std::vector<double> curve;
  curve.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t b = std::min(cfg.batch, N);
    Tensor batch({b, D});
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t idx = rng.index(N);
      std::copy(zoo.data.begin() + idx * D, zoo.data.begin() + (idx + 1) * D,
                batch.data.begin() + i * D);
    }
    std::vector<double> ge, gd;
    VaeLoss l = vae_loss(model, batch, cfg.seed * 7919 + step, &ge, &gd);
    optimizer_step(opt_e, model.enc_params, ge);
    optimizer_step(opt_d, model.dec_params, gd);
    curve.push_back(l.loss);
  }
  return curve;
}

}  // namespace wf
