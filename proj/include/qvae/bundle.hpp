#pragma once

#include <cstdint>
#include <vector>

#include "qvae/nn.hpp"
#include "qvae/quant.hpp"
#include "qvae/vae.hpp"

namespace qvae {

/// The deployed inference path: encoder trunk + mu head, then the classifier.
/// The logvar head and the decoder are training-only and never shipped.
struct FloatBundle {
  std::vector<DenseLayer> encoder;  // trunk layers followed by the mu head
  MlpModel classifier;

  std::size_t input_dim() const noexcept { return encoder.empty() ? 0 : encoder.front().in_dim(); }
  std::size_t latent_dim() const noexcept { return encoder.empty() ? 0 : encoder.back().out_dim(); }
  void validate() const;

  friend bool operator==(const FloatBundle&, const FloatBundle&) = default;
};

FloatBundle make_float_bundle(const VaeModel& vae, const MlpModel& mlp);

Matrix bundle_latent(const FloatBundle& b, const Matrix& x);
Matrix bundle_proba(const FloatBundle& b, const Matrix& x);
std::vector<int> predict(const FloatBundle& b, const Matrix& x);

/// Integer realization of a FloatBundle. Every layer's input params equal the
/// previous layer's output params, so activations stay int8 end to end; the
/// only float work is quantizing the raw input and the final argmax is taken
/// on the int8 logits.
struct QuantizedBundle {
  std::vector<QDenseLayer> encoder;
  std::vector<QDenseLayer> classifier;

  const QuantParams& input_params() const { return encoder.front().input_params; }
  std::size_t input_dim() const noexcept { return encoder.empty() ? 0 : encoder.front().in_dim(); }
  std::size_t n_classes() const noexcept {
    return classifier.empty() ? 0 : classifier.back().out_dim();
  }
  /// Checks shapes, the param chain and that the classifier ends in softmax.
  void validate() const;

  friend bool operator==(const QuantizedBundle&, const QuantizedBundle&) = default;
};

QTensor quantize_input(const QuantizedBundle& b, const Matrix& x);
/// Int8 latent (mu) codes for a batch.
QTensor bundle_latent(const QuantizedBundle& b, const Matrix& x,
                      RequantMode mode = RequantMode::float_multiplier);
QTensor bundle_logits(const QuantizedBundle& b, const Matrix& x,
                      RequantMode mode = RequantMode::float_multiplier);
std::vector<int> predict(const QuantizedBundle& b, const Matrix& x,
                         RequantMode mode = RequantMode::float_multiplier);

/// Row argmax over int8 codes; the first maximum wins.
std::vector<int> argmax_rows(const QTensor& q);

/// FNV-1a over the raw parameter bytes, in layer order.
std::uint64_t weight_hash(const VaeModel& vae);
std::uint64_t weight_hash(const MlpModel& mlp);
std::uint64_t weight_hash(const FloatBundle& b);

}  // namespace qvae
