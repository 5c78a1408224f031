#include "qvae/bundle.hpp"

#include <cstring>
#include <stdexcept>
#include <string>

namespace qvae {

void FloatBundle::validate() const {
  if (encoder.empty()) throw std::invalid_argument("bundle encoder has no layers");
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    encoder[i].validate();
    if (i > 0 && encoder[i].in_dim() != encoder[i - 1].out_dim())
      throw std::invalid_argument("bundle encoder layer " + std::to_string(i) + " input width mismatch");
    if (encoder[i].activation == Activation::softmax || encoder[i].activation == Activation::sigmoid)
      throw std::invalid_argument("bundle encoder layers must be relu or linear");
  }
  classifier.validate();
  if (classifier.input_dim != latent_dim())
    throw std::invalid_argument("classifier expects " + std::to_string(classifier.input_dim) +
                                " inputs but the latent width is " + std::to_string(latent_dim()));
}

FloatBundle make_float_bundle(const VaeModel& vae, const MlpModel& mlp) {
  vae.validate();
  FloatBundle b;
  b.encoder = vae.encoder_trunk;
  b.encoder.push_back(vae.mu_head);
  b.classifier = mlp;
  b.validate();
  return b;
}

Matrix bundle_latent(const FloatBundle& b, const Matrix& x) {
  Matrix h = x;
  for (std::size_t i = 0; i < b.encoder.size(); ++i)
    h = layer_forward<float>(b.encoder[i], h, nullptr, "bundle", nullptr);
  return h;
}

Matrix bundle_proba(const FloatBundle& b, const Matrix& x) {
  return predict_proba(b.classifier, bundle_latent(b, x));
}

std::vector<int> predict(const FloatBundle& b, const Matrix& x) {
  return argmax_rows(bundle_proba(b, x));
}

namespace {

void check_chain(const std::vector<QDenseLayer>& layers, const char* what) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].validate();
    if (i == 0) continue;
    if (layers[i].in_dim() != layers[i - 1].out_dim())
      throw std::invalid_argument(std::string(what) + " layer " + std::to_string(i) +
                                  " input width mismatch");
    if (!(layers[i].input_params == layers[i - 1].output_params))
      throw std::invalid_argument(std::string(what) + " layer " + std::to_string(i) +
                                  " input params differ from the previous output params");
  }
}

QTensor run_chain(const std::vector<QDenseLayer>& layers, QTensor h, RequantMode mode) {
  for (const auto& l : layers) h = qgemm(h, l, mode);
  return h;
}

}  // namespace

void QuantizedBundle::validate() const {
  if (encoder.empty() || classifier.empty())
    throw std::invalid_argument("quantized bundle needs encoder and classifier layers");
  check_chain(encoder, "encoder");
  check_chain(classifier, "classifier");
  if (classifier.front().in_dim() != encoder.back().out_dim())
    throw std::invalid_argument("classifier input width does not match the latent width");
  if (!(classifier.front().input_params == encoder.back().output_params))
    throw std::invalid_argument("classifier input params differ from the latent params");
  for (std::size_t i = 0; i < classifier.size(); ++i) {
    const bool last = i + 1 == classifier.size();
    if (last != (classifier[i].activation == Activation::softmax))
      throw std::invalid_argument("quantized classifier must end in exactly one softmax layer");
  }
  if (classifier.back().out_dim() < 2) throw std::invalid_argument("classifier needs >= 2 classes");
}

QTensor quantize_input(const QuantizedBundle& b, const Matrix& x) {
  if (x.cols() != b.input_dim())
    throw std::invalid_argument("bundle expects " + std::to_string(b.input_dim()) +
                                " features, got " + std::to_string(x.cols()));
  return quantize(x, b.input_params(), RoundMode::nearest);
}

QTensor bundle_latent(const QuantizedBundle& b, const Matrix& x, RequantMode mode) {
  return run_chain(b.encoder, quantize_input(b, x), mode);
}

QTensor bundle_logits(const QuantizedBundle& b, const Matrix& x, RequantMode mode) {
  return run_chain(b.classifier, bundle_latent(b, x, mode), mode);
}

std::vector<int> predict(const QuantizedBundle& b, const Matrix& x, RequantMode mode) {
  return argmax_rows(bundle_logits(b, x, mode));
}

std::vector<int> argmax_rows(const QTensor& q) {
  std::vector<int> out(q.rows());
  for (std::size_t r = 0; r < q.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < q.cols(); ++c)
      if (q(r, c) > q(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void hash_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

void hash_layer(std::uint64_t& h, const DenseLayer& l) {
  const std::uint64_t dims[2] = {l.in_dim(), l.out_dim()};
  hash_bytes(h, dims, sizeof dims);
  const auto act = static_cast<std::uint8_t>(l.activation);
  hash_bytes(h, &act, 1);
  hash_bytes(h, l.weights.data().data(), l.weights.size() * sizeof(float));
  hash_bytes(h, l.bias.data(), l.bias.size() * sizeof(float));
}

}  // namespace

std::uint64_t weight_hash(const VaeModel& vae) {
  std::uint64_t h = kFnvOffset;
  for (const auto& l : vae.encoder_trunk) hash_layer(h, l);
  hash_layer(h, vae.mu_head);
  hash_layer(h, vae.logvar_head);
  for (const auto& l : vae.decoder) hash_layer(h, l);
  return h;
}

std::uint64_t weight_hash(const MlpModel& mlp) {
  std::uint64_t h = kFnvOffset;
  for (const auto& l : mlp.layers) hash_layer(h, l);
  return h;
}

std::uint64_t weight_hash(const FloatBundle& b) {
  std::uint64_t h = kFnvOffset;
  for (const auto& l : b.encoder) hash_layer(h, l);
  for (const auto& l : b.classifier.layers) hash_layer(h, l);
  return h;
}

}  // namespace qvae
