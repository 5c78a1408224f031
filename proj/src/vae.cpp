#include "qvae/vae.hpp"

#include <algorithm>
#include <cmath>

namespace qvae {

template <typename T>
void BasicVaeModel<T>::validate() const {
  if (encoder_trunk.empty() || decoder.empty())
    throw std::invalid_argument("VAE needs at least one trunk and one decoder layer");
  std::size_t width = input_dim;
  for (const auto& l : encoder_trunk) {
    l.validate();
    if (l.in_dim() != width) throw std::invalid_argument("VAE encoder trunk width mismatch");
    width = l.out_dim();
  }
  for (const auto* head : {&mu_head, &logvar_head}) {
    head->validate();
    if (head->in_dim() != width || head->out_dim() != latent_dim)
      throw std::invalid_argument("VAE head must map " + std::to_string(width) + " -> " +
                                  std::to_string(latent_dim));
    if (head->activation != Activation::linear)
      throw std::invalid_argument("VAE heads must be linear");
  }
  width = latent_dim;
  for (const auto& l : decoder) {
    l.validate();
    if (l.in_dim() != width) throw std::invalid_argument("VAE decoder width mismatch");
    width = l.out_dim();
  }
  if (width != input_dim) throw std::invalid_argument("VAE decoder must reconstruct input_dim");
  if (decoder.back().activation != Activation::sigmoid)
    throw std::invalid_argument("VAE decoder must end in a sigmoid layer");
}

template <typename T>
std::size_t BasicVaeModel<T>::parameter_count() const noexcept {
  std::size_t n = mu_head.parameter_count() + logvar_head.parameter_count();
  for (const auto& l : encoder_trunk) n += l.parameter_count();
  for (const auto& l : decoder) n += l.parameter_count();
  return n;
}

VaeModel make_vae(const VaeArchitecture& arch, Rng& rng) {
  if (arch.input_dim == 0 || arch.latent_dim == 0 || arch.hidden.empty())
    throw std::invalid_argument("make_vae: input_dim, latent_dim and hidden must be non-empty");
  VaeModel vae;
  vae.input_dim = arch.input_dim;
  vae.latent_dim = arch.latent_dim;
  std::size_t width = arch.input_dim;
  for (std::size_t h : arch.hidden) {
    vae.encoder_trunk.push_back(make_dense(width, h, Activation::relu, rng));
    width = h;
  }
  vae.mu_head = make_dense(width, arch.latent_dim, Activation::linear, rng);
  vae.logvar_head = make_dense(width, arch.latent_dim, Activation::linear, rng);
  width = arch.latent_dim;
  for (auto it = arch.hidden.rbegin(); it != arch.hidden.rend(); ++it) {
    vae.decoder.push_back(make_dense(width, *it, Activation::relu, rng));
    width = *it;
  }
  vae.decoder.push_back(make_dense(width, arch.input_dim, Activation::sigmoid, rng));
  return vae;
}

namespace {

template <typename T>
BasicMatrix<T> hook_input(const BasicMatrix<T>& x, BasicTensorHook<T>* hook) {
  BasicMatrix<T> in = x;
  if (hook) {
    BasicMatrix<T> pass;
    hook->apply(TensorRole::activation, "enc.in", in, pass);
  }
  return in;
}

template <typename T>
BasicMatrix<T> clamp_logvar(const BasicMatrix<T>& raw, BasicMatrix<T>* pass) {
  BasicMatrix<T> out = raw;
  if (pass) *pass = BasicMatrix<T>(raw.rows(), raw.cols(), T{1});
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T lo = static_cast<T>(kLogvarMin), hi = static_cast<T>(kLogvarMax);
    if (out[i] < lo || out[i] > hi) {
      out[i] = std::clamp(out[i], lo, hi);
      if (pass) (*pass)[i] = T{0};
    }
  }
  return out;
}

template <typename T>
void require_latent_shape(const BasicMatrix<T>& a, const BasicMatrix<T>& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace

template <typename T>
BasicEncoding<T> encode(const BasicVaeModel<T>& vae, const BasicMatrix<T>& x,
                        BasicTensorHook<T>* hook) {
  if (x.cols() != vae.input_dim)
    throw std::invalid_argument("VAE expects " + std::to_string(vae.input_dim) +
                                " features, got " + std::to_string(x.cols()));
  BasicMatrix<T> h = hook_input(x, hook);
  for (std::size_t i = 0; i < vae.encoder_trunk.size(); ++i)
    h = layer_forward(vae.encoder_trunk[i], h, hook, "enc." + std::to_string(i),
                      static_cast<BasicLayerCache<T>*>(nullptr));
  BasicEncoding<T> enc;
  enc.mu = layer_forward(vae.mu_head, h, hook, "enc.mu", static_cast<BasicLayerCache<T>*>(nullptr));
  enc.logvar = clamp_logvar(
      layer_forward(vae.logvar_head, h, hook, "enc.logvar", static_cast<BasicLayerCache<T>*>(nullptr)),
      static_cast<BasicMatrix<T>*>(nullptr));
  return enc;
}

template <typename T>
BasicMatrix<T> project(const BasicVaeModel<T>& vae, const BasicMatrix<T>& x,
                       BasicTensorHook<T>* hook) {
  if (x.cols() != vae.input_dim)
    throw std::invalid_argument("VAE expects " + std::to_string(vae.input_dim) +
                                " features, got " + std::to_string(x.cols()));
  BasicMatrix<T> h = hook_input(x, hook);
  for (std::size_t i = 0; i < vae.encoder_trunk.size(); ++i)
    h = layer_forward(vae.encoder_trunk[i], h, hook, "enc." + std::to_string(i),
                      static_cast<BasicLayerCache<T>*>(nullptr));
  return layer_forward(vae.mu_head, h, hook, "enc.mu", static_cast<BasicLayerCache<T>*>(nullptr));
}

template <typename T>
BasicMatrix<T> reparameterize(const BasicMatrix<T>& mu, const BasicMatrix<T>& logvar,
                              const BasicMatrix<T>& eps) {
  require_latent_shape(mu, logvar, "reparameterize");
  require_latent_shape(mu, eps, "reparameterize");
  BasicMatrix<T> z(mu.rows(), mu.cols());
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] = mu[i] + eps[i] * std::exp(T{0.5} * logvar[i]);
  return z;
}

template <typename T>
T kl_divergence(const BasicMatrix<T>& mu, const BasicMatrix<T>& logvar) {
  require_latent_shape(mu, logvar, "kl_divergence");
  if (mu.rows() == 0) return T{0};
  T total{0};
  for (std::size_t i = 0; i < mu.size(); ++i)
    total += T{-0.5} * (T{1} + logvar[i] - mu[i] * mu[i] - std::exp(logvar[i]));
  return total / static_cast<T>(mu.rows());
}

template <typename T>
BasicElboTerms<T> elbo_loss(const BasicMatrix<T>& x, const BasicMatrix<T>& x_hat,
                            const BasicMatrix<T>& mu, const BasicMatrix<T>& logvar, T beta) {
  require_latent_shape(x, x_hat, "elbo_loss");
  if (x.rows() != mu.rows()) throw std::invalid_argument("elbo_loss: batch size mismatch");
  BasicElboTerms<T> terms;
  if (x.rows() == 0) return terms;
  const T lo = static_cast<T>(1e-7), hi = T{1} - static_cast<T>(1e-7);
  T recon{0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T p = std::clamp(x_hat[i], lo, hi);
    recon -= x[i] * std::log(p) + (T{1} - x[i]) * std::log(T{1} - p);
  }
  terms.recon = recon / static_cast<T>(x.rows());
  terms.kl = kl_divergence(mu, logvar);
  terms.total = terms.recon + beta * terms.kl;
  if (!std::isfinite(terms.total)) throw std::domain_error("non-finite ELBO loss");
  return terms;
}

template <typename T>
BasicVaeForward<T> vae_forward(const BasicVaeModel<T>& vae, const BasicMatrix<T>& x,
                               const BasicMatrix<T>& eps, BasicTensorHook<T>* hook) {
  if (x.cols() != vae.input_dim)
    throw std::invalid_argument("VAE expects " + std::to_string(vae.input_dim) +
                                " features, got " + std::to_string(x.cols()));
  BasicVaeForward<T> fwd;
  fwd.input = hook_input(x, hook);
  fwd.trunk.resize(vae.encoder_trunk.size());
  BasicMatrix<T> h = fwd.input;
  for (std::size_t i = 0; i < vae.encoder_trunk.size(); ++i)
    h = layer_forward(vae.encoder_trunk[i], h, hook, "enc." + std::to_string(i), &fwd.trunk[i]);
  fwd.mu = layer_forward(vae.mu_head, h, hook, "enc.mu", &fwd.mu_cache);
  fwd.logvar = clamp_logvar(layer_forward(vae.logvar_head, h, hook, "enc.logvar", &fwd.logvar_cache),
                            &fwd.logvar_pass);
  fwd.eps = eps;
  fwd.z = reparameterize(fwd.mu, fwd.logvar, eps);
  fwd.decoder.resize(vae.decoder.size());
  BasicMatrix<T> d = fwd.z;
  for (std::size_t i = 0; i < vae.decoder.size(); ++i)
    d = layer_forward(vae.decoder[i], d, hook, "dec." + std::to_string(i), &fwd.decoder[i]);
  fwd.x_hat = std::move(d);
  return fwd;
}

template <typename T>
BasicVaeGradients<T> vae_backward(const BasicVaeModel<T>& vae, const BasicVaeForward<T>& fwd,
                                  const BasicMatrix<T>& x, T beta) {
  require_latent_shape(x, fwd.x_hat, "vae_backward");
  const T inv_batch = T{1} / static_cast<T>(x.rows());
  BasicVaeGradients<T> g;
  g.decoder.resize(vae.decoder.size());
  g.trunk.resize(vae.encoder_trunk.size());

  // Sigmoid + BCE fused at the decoder output: d/d(pre-activation) = (x_hat - x) / batch.
  BasicMatrix<T> d = subtract(fwd.x_hat, x);
  for (auto& v : d.data()) v *= inv_batch;
  const auto& last = fwd.decoder.back();
  if (!last.output_pass.empty()) d = hadamard(d, last.output_pass);
  d = layer_backward(vae.decoder.back(), last, d, g.decoder.back(), true);
  for (std::size_t i = vae.decoder.size() - 1; i-- > 0;)
    d = layer_backward(vae.decoder[i], fwd.decoder[i], d, g.decoder[i]);

  // d is now d(loss)/dz.
  BasicMatrix<T> d_mu(fwd.mu.rows(), fwd.mu.cols());
  BasicMatrix<T> d_logvar(fwd.mu.rows(), fwd.mu.cols());
  for (std::size_t i = 0; i < d_mu.size(); ++i) {
    const T sigma = std::exp(T{0.5} * fwd.logvar[i]);
    d_mu[i] = d[i] + beta * fwd.mu[i] * inv_batch;
    d_logvar[i] = d[i] * fwd.eps[i] * T{0.5} * sigma +
                  beta * T{0.5} * (std::exp(fwd.logvar[i]) - T{1}) * inv_batch;
    d_logvar[i] *= fwd.logvar_pass[i];
  }
  BasicMatrix<T> d_h = layer_backward(vae.mu_head, fwd.mu_cache, d_mu, g.mu_head);
  d_h = add(d_h, layer_backward(vae.logvar_head, fwd.logvar_cache, d_logvar, g.logvar_head));
  for (std::size_t i = vae.encoder_trunk.size(); i-- > 0;)
    d_h = layer_backward(vae.encoder_trunk[i], fwd.trunk[i], d_h, g.trunk[i]);
  return g;
}

VaeTrainResult train_vae(const Matrix& features, const VaeTrainConfig& config, TensorHook* hook,
                         const VaeModel* init) {
  config.train.validate();
  if (features.rows() == 0) throw std::invalid_argument("train_vae: empty dataset");
  if (!(config.beta >= 0.0f)) throw std::invalid_argument("train_vae: beta must be >= 0");

  VaeModel vae;
  if (init) {
    vae = *init;
  } else {
    VaeArchitecture arch = config.arch;
    arch.input_dim = features.cols();
    Rng init_rng(derive_seed(config.train.seed, "vae.init"));
    vae = make_vae(arch, init_rng);
  }
  vae.validate();
  if (vae.input_dim != features.cols())
    throw std::invalid_argument("train_vae: feature width does not match the model");

  Optimizer opt(config.train);
  VaeTrainResult result;
  const std::size_t trunk_n = vae.encoder_trunk.size();
  for (std::size_t epoch = 0; epoch < config.train.epochs; ++epoch) {
    const auto order = epoch_order(config.train.seed, epoch, features.rows());
    Rng noise(derive_seed(config.train.seed, "vae.noise", epoch));
    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += config.train.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + config.train.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Matrix xb = gather_rows(features, idx);
      const Matrix eps = rng_normal(noise, xb.rows(), vae.latent_dim);

      const auto fwd = vae_forward(vae, xb, eps, hook);
      BasicElboTerms<float> terms;
      try {
        terms = elbo_loss(xb, fwd.x_hat, fwd.mu, fwd.logvar, config.beta);
      } catch (const std::domain_error&) {
        throw TrainingError("non-finite VAE loss", epoch, batch_index);
      }
      epoch_loss += static_cast<double>(terms.total) * static_cast<double>(idx.size());

      const auto g = vae_backward(vae, fwd, xb, config.beta);
      opt.begin_step();
      apply_gradients(opt, vae.encoder_trunk, g.trunk, 0);
      const std::size_t head_slot = 2 * trunk_n;
      opt.update(head_slot, vae.mu_head.weights.data(), g.mu_head.weights.data());
      opt.update(head_slot + 1, vae.mu_head.bias, g.mu_head.bias);
      opt.update(head_slot + 2, vae.logvar_head.weights.data(), g.logvar_head.weights.data());
      opt.update(head_slot + 3, vae.logvar_head.bias, g.logvar_head.bias);
      apply_gradients(opt, vae.decoder, g.decoder, head_slot + 4);
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(features.rows()));
  }
  result.model = std::move(vae);
  return result;
}

#define QVAE_INSTANTIATE_VAE(T)                                                                  \
  template struct BasicVaeModel<T>;                                                              \
  template BasicEncoding<T> encode(const BasicVaeModel<T>&, const BasicMatrix<T>&,               \
                                   BasicTensorHook<T>*);                                         \
  template BasicMatrix<T> project(const BasicVaeModel<T>&, const BasicMatrix<T>&,                \
                                  BasicTensorHook<T>*);                                          \
  template BasicMatrix<T> reparameterize(const BasicMatrix<T>&, const BasicMatrix<T>&,           \
                                         const BasicMatrix<T>&);                                 \
  template T kl_divergence(const BasicMatrix<T>&, const BasicMatrix<T>&);                        \
  template BasicElboTerms<T> elbo_loss(const BasicMatrix<T>&, const BasicMatrix<T>&,             \
                                       const BasicMatrix<T>&, const BasicMatrix<T>&, T);         \
  template BasicVaeForward<T> vae_forward(const BasicVaeModel<T>&, const BasicMatrix<T>&,        \
                                          const BasicMatrix<T>&, BasicTensorHook<T>*);           \
  template BasicVaeGradients<T> vae_backward(const BasicVaeModel<T>&, const BasicVaeForward<T>&, \
                                             const BasicMatrix<T>&, T);

QVAE_INSTANTIATE_VAE(float)
QVAE_INSTANTIATE_VAE(double)

#undef QVAE_INSTANTIATE_VAE

}  // namespace qvae
