#pragma once

#include <cstddef>
#include <vector>

#include "qvae/nn.hpp"

namespace qvae {

inline constexpr float kLogvarMin = -10.0f;
inline constexpr float kLogvarMax = 10.0f;

struct VaeArchitecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden{32};  // encoder trunk widths; the decoder mirrors them
  std::size_t latent_dim = 8;
};

/// Encoder trunk -> (mu head, logvar head) -> latent -> decoder (sigmoid output).
template <typename T>
struct BasicVaeModel {
  std::vector<BasicDenseLayer<T>> encoder_trunk;
  BasicDenseLayer<T> mu_head;
  BasicDenseLayer<T> logvar_head;
  std::vector<BasicDenseLayer<T>> decoder;
  std::size_t input_dim = 0;
  std::size_t latent_dim = 8;

  void validate() const;
  std::size_t parameter_count() const noexcept;

  template <typename U>
  BasicVaeModel<U> cast() const {
    BasicVaeModel<U> out;
    for (const auto& l : encoder_trunk) out.encoder_trunk.push_back(l.template cast<U>());
    out.mu_head = mu_head.template cast<U>();
    out.logvar_head = logvar_head.template cast<U>();
    for (const auto& l : decoder) out.decoder.push_back(l.template cast<U>());
    out.input_dim = input_dim;
    out.latent_dim = latent_dim;
    return out;
  }

  friend bool operator==(const BasicVaeModel&, const BasicVaeModel&) = default;
};

using VaeModel = BasicVaeModel<float>;
using VaeModelD = BasicVaeModel<double>;

VaeModel make_vae(const VaeArchitecture& arch, Rng& rng);

template <typename T>
struct BasicEncoding {
  BasicMatrix<T> mu;
  BasicMatrix<T> logvar;  // clamped to [kLogvarMin, kLogvarMax]
};

/// Hook sites: `enc.in`, `enc.<i>`, `enc.mu`, `enc.logvar`, `dec.<i>`.
template <typename T>
BasicEncoding<T> encode(const BasicVaeModel<T>& vae, const BasicMatrix<T>& x,
                        BasicTensorHook<T>* hook = nullptr);

/// mu + eps * exp(logvar / 2), elementwise.
template <typename T>
BasicMatrix<T> reparameterize(const BasicMatrix<T>& mu, const BasicMatrix<T>& logvar,
                              const BasicMatrix<T>& eps);

/// Deterministic inference-time embedding: the posterior mean.
template <typename T>
BasicMatrix<T> project(const BasicVaeModel<T>& vae, const BasicMatrix<T>& x,
                       BasicTensorHook<T>* hook = nullptr);

template <typename T>
struct BasicElboTerms {
  T total{};
  T recon{};
  T kl{};
};

/// Batch-mean KL(N(mu, exp(logvar)) || N(0, I)), summed over latent coordinates.
template <typename T>
T kl_divergence(const BasicMatrix<T>& mu, const BasicMatrix<T>& logvar);

/// Batch-mean per-sample binary cross-entropy (x_hat clamped to [1e-7, 1 - 1e-7])
/// plus beta * KL. Throws std::domain_error if the result is not finite.
template <typename T>
BasicElboTerms<T> elbo_loss(const BasicMatrix<T>& x, const BasicMatrix<T>& x_hat,
                            const BasicMatrix<T>& mu, const BasicMatrix<T>& logvar, T beta = T{1});

template <typename T>
struct BasicVaeForward {
  BasicMatrix<T> input;  // after the `enc.in` hook
  std::vector<BasicLayerCache<T>> trunk;
  BasicLayerCache<T> mu_cache;
  BasicLayerCache<T> logvar_cache;
  std::vector<BasicLayerCache<T>> decoder;
  BasicMatrix<T> mu;
  BasicMatrix<T> logvar;       // clamped
  BasicMatrix<T> logvar_pass;  // 1 where the clamp was inactive
  BasicMatrix<T> eps;
  BasicMatrix<T> z;
  BasicMatrix<T> x_hat;
};

template <typename T>
struct BasicVaeGradients {
  std::vector<BasicLayerGrad<T>> trunk;
  BasicLayerGrad<T> mu_head;
  BasicLayerGrad<T> logvar_head;
  std::vector<BasicLayerGrad<T>> decoder;
};

template <typename T>
BasicVaeForward<T> vae_forward(const BasicVaeModel<T>& vae, const BasicMatrix<T>& x,
                               const BasicMatrix<T>& eps, BasicTensorHook<T>* hook = nullptr);

/// Pathwise gradient of `elbo_loss(x, fwd.x_hat, fwd.mu, fwd.logvar, beta)` w.r.t.
/// every parameter, with eps held fixed.
template <typename T>
BasicVaeGradients<T> vae_backward(const BasicVaeModel<T>& vae, const BasicVaeForward<T>& fwd,
                                  const BasicMatrix<T>& x, T beta = T{1});

struct VaeTrainConfig {
  TrainConfig train;
  VaeArchitecture arch;
  float beta = 1.0f;
};

struct VaeTrainResult {
  VaeModel model;
  std::vector<double> loss_history;  // mean ELBO loss per epoch
};

/// Trains from a seeded initialization, or from `init` when given (warm start).
VaeTrainResult train_vae(const Matrix& features, const VaeTrainConfig& config,
                         TensorHook* hook = nullptr, const VaeModel* init = nullptr);

}  // namespace qvae
