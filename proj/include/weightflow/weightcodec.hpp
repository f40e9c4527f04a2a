#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "weightflow/mlp.hpp"
#include "weightflow/tensor.hpp"

namespace wf {

// Flattened, zero-padded parameter vector with its padding mask and the
// architecture it came from.
struct WeightVec {
  std::vector<double> values;
  std::vector<std::uint8_t> pad_mask;  // 1 = real parameter
  MlpSpec arch;
  std::string dataset_tag;

  std::size_t dim() const { return values.size(); }
  std::size_t real_dim() const { return arch.param_count(); }
};

// Zero-pad the flat parameter vector to target_dim. Flattening itself is the
// identity on the ndcore layout.
WeightVec flatten_pad(const MlpSpec& arch, std::span<const double> params, std::size_t target_dim,
                      std::string dataset_tag = {});

// Drop the pad region; returns exactly arch.param_count() values.
std::vector<double> unflatten(const WeightVec& w);

// Pad to a multiple of chunk_len, then split into equal pieces.
std::vector<Tensor> chunk(const WeightVec& w, std::size_t chunk_len);

enum class AugmentKind { noise, dropout, mixup };

struct AugmentConfig {
  double noise_std = 5e-3;
  double dropout_p = 0.02;
};

// Weight-space data augmentation; the pad region is never touched. mixup
// returns (1-alpha) w + alpha partner with alpha ~ U[0,1].
WeightVec augment(const WeightVec& w, AugmentKind kind, const WeightVec* partner,
                  std::uint64_t seed, const AugmentConfig& cfg = {});

// --- VAE weight encoder ------------------------------------------------------

// MLP encoder (D -> 2*latent, mean and log-variance) and decoder (latent -> D)
// with input/latent Gaussian noise injection.
struct VaeModel {
  MlpSpec encoder;
  MlpSpec decoder;
  std::vector<double> enc_params;
  std::vector<double> dec_params;
  std::size_t latent_dim = 16;
  double beta = 1e-5;
  double sigma_in = 1e-3;
  double sigma_lat = 1e-2;
};

VaeModel make_vae(std::size_t dim, std::size_t latent_dim, std::vector<std::size_t> hidden,
                  std::uint64_t seed);

struct VaeLoss {
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

// Forward (and optionally backward) pass of the VAE objective on a batch
// [B x D]: recon is the MSE of decode(encode(w+xi_in)+xi_lat) under the
// reparameterized posterior sample, kl the closed-form KL to N(0, I) summed
// over latent dims and averaged over the batch; loss = recon + beta*kl.
VaeLoss vae_loss(const VaeModel& model, const Tensor& w, std::uint64_t seed,
                 std::vector<double>* grad_enc = nullptr, std::vector<double>* grad_dec = nullptr);

// Posterior mean embedding (no sampling noise).
Tensor vae_encode_mean(const VaeModel& model, const Tensor& w);
Tensor vae_decode(const VaeModel& model, const Tensor& z);

struct VaeTrainConfig {
  std::size_t steps = 500;
  std::size_t batch = 64;
  double lr = 1e-4;
  double weight_decay = 2e-6;
  std::uint64_t seed = 0;
};

// AdamW training on a fixed zoo [N x D]; returns per-step loss curve.
std::vector<double> train_vae(VaeModel& model, const Tensor& zoo, const VaeTrainConfig& cfg);

}  // namespace wf
