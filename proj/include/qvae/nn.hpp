#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qvae/rng.hpp"
#include "qvae/tensor.hpp"

namespace qvae {

/// Activation tags. The numeric values are the on-disk encoding.
enum class Activation : std::uint8_t { linear = 0, relu = 1, sigmoid = 2, softmax = 3 };

std::string_view activation_name(Activation a) noexcept;
std::optional<Activation> activation_from_tag(std::uint8_t tag) noexcept;

/// Applies `a` elementwise. Softmax-tagged layers emit logits at layer level;
/// the row normalization happens in the model-level forward pass, so here
/// softmax is the identity.
template <typename T>
BasicMatrix<T> activate(Activation a, const BasicMatrix<T>& pre);

template <typename T>
struct BasicDenseLayer {
  BasicMatrix<T> weights;  // in_dim x out_dim
  std::vector<T> bias;     // out_dim
  Activation activation = Activation::linear;

  std::size_t in_dim() const noexcept { return weights.rows(); }
  std::size_t out_dim() const noexcept { return weights.cols(); }
  std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }

  /// Throws std::invalid_argument when weights and bias disagree.
  void validate() const;

  template <typename U>
  BasicDenseLayer<U> cast() const {
    return {weights.template cast<U>(), std::vector<U>(bias.begin(), bias.end()), activation};
  }

  friend bool operator==(const BasicDenseLayer&, const BasicDenseLayer&) = default;
};

using DenseLayer = BasicDenseLayer<float>;

/// He-style normal init for relu layers, Xavier-style normal otherwise; zero bias.
DenseLayer make_dense(std::size_t in_dim, std::size_t out_dim, Activation activation, Rng& rng);

enum class TensorRole { weight, activation };

/// Per-tensor transform injected into forward passes (QAT fake quantization).
/// `apply` rewrites `tensor` in place and fills `pass` (same shape) with the
/// straight-through gate used by backward: 1 lets the gradient through, 0 blocks it.
template <typename T>
class BasicTensorHook {
 public:
  virtual ~BasicTensorHook() = default;
  virtual void apply(TensorRole role, std::string_view site, BasicMatrix<T>& tensor,
                     BasicMatrix<T>& pass) = 0;
};

using TensorHook = BasicTensorHook<float>;

template <typename T>
struct BasicLayerCache {
  BasicMatrix<T> input;
  BasicMatrix<T> weights;      // effective (possibly hooked) weights
  BasicMatrix<T> weight_pass;  // empty when unhooked
  BasicMatrix<T> output;       // activation output before the hook
  BasicMatrix<T> output_pass;  // empty when unhooked
};

template <typename T>
struct BasicLayerGrad {
  BasicMatrix<T> weights;
  std::vector<T> bias;
};

/// One dense layer forward. Hook sites are `<site>.w` for the weights and
/// `<site>.out` for the activation output. `cache` may be null for inference.
template <typename T>
BasicMatrix<T> layer_forward(const BasicDenseLayer<T>& layer, const BasicMatrix<T>& x,
                             BasicTensorHook<T>* hook, std::string_view site,
                             BasicLayerCache<T>* cache);

/// Backpropagates `d_output` (gradient w.r.t. the hooked output, or w.r.t. the
/// pre-activation when `d_is_preactivation`) and returns the input gradient.
template <typename T>
BasicMatrix<T> layer_backward(const BasicDenseLayer<T>& layer, const BasicLayerCache<T>& cache,
                              const BasicMatrix<T>& d_output, BasicLayerGrad<T>& grad,
                              bool d_is_preactivation = false);

// ---------------------------------------------------------------------------
// MLP classifier

template <typename T>
struct BasicMlpModel {
  std::vector<BasicDenseLayer<T>> layers;
  std::size_t input_dim = 0;
  std::size_t n_classes = 0;

  /// Checks the layer chain, the input width and the softmax head.
  void validate() const;
  std::size_t parameter_count() const noexcept;

  template <typename U>
  BasicMlpModel<U> cast() const {
    BasicMlpModel<U> out{{}, input_dim, n_classes};
    for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
    return out;
  }

  friend bool operator==(const BasicMlpModel&, const BasicMlpModel&) = default;
};

using MlpModel = BasicMlpModel<float>;
using MlpModelD = BasicMlpModel<double>;

/// input_dim -> hidden... (relu) -> n_classes (softmax).
MlpModel make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t n_classes,
                  Rng& rng);

template <typename T>
struct BasicMlpForward {
  BasicMatrix<T> probs;
  std::vector<BasicLayerCache<T>> caches;
};

template <typename T>
BasicMlpForward<T> forward(const BasicMlpModel<T>& model, const BasicMatrix<T>& x,
                           BasicTensorHook<T>* hook = nullptr);

template <typename T>
BasicMatrix<T> predict_proba(const BasicMlpModel<T>& model, const BasicMatrix<T>& x,
                             BasicTensorHook<T>* hook = nullptr);

/// Mean negative log-likelihood with probabilities clamped to >= 1e-12.
/// Optional per-class weights scale each sample's term.
template <typename T>
T cross_entropy(const BasicMatrix<T>& probs, std::span<const int> labels,
                std::span<const T> class_weights = {});

/// Gradient of `cross_entropy` w.r.t. every layer parameter.
template <typename T>
std::vector<BasicLayerGrad<T>> backward(const BasicMlpModel<T>& model, const BasicMlpForward<T>& fwd,
                                        std::span<const int> labels,
                                        std::span<const T> class_weights = {});

// ---------------------------------------------------------------------------
// Training

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  float learning_rate = 1e-3f;
  OptimizerKind optimizer = OptimizerKind::adam;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  std::uint64_t seed = 0;
  /// Inverse-frequency class weights for imbalanced data (classifier only).
  bool class_weighting = false;

  void validate() const;
};

/// Raised when a loss turns non-finite; names the epoch and batch.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch) + ")"),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

/// SGD or Adam over parameter slots; each slot is one contiguous tensor.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config) : config_(config) {}
  void begin_step() noexcept { ++step_; }
  void update(std::size_t slot, std::span<float> params, std::span<const float> grads);

 private:
  TrainConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

/// Applies one optimizer step to a layer list; slots start at `first_slot`.
void apply_gradients(Optimizer& opt, std::span<DenseLayer> layers,
                     std::span<const BasicLayerGrad<float>> grads, std::size_t first_slot);

/// Shuffled mini-batch order for one epoch; a pure function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);

std::vector<float> inverse_frequency_weights(std::span<const int> labels, std::size_t n_classes);

struct MlpTrainResult {
  MlpModel model;
  std::vector<double> loss_history;  // mean training loss per epoch
};

MlpTrainResult train(MlpModel model, const Matrix& x, std::span<const int> labels,
                     const TrainConfig& config, TensorHook* hook = nullptr);

}  // namespace qvae
