#include "qvae/nn.hpp"

#include <algorithm>
#include <cmath>

namespace qvae {

std::string_view activation_name(Activation a) noexcept {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softmax: return "softmax";
  }
  return "unknown";
}

std::optional<Activation> activation_from_tag(std::uint8_t tag) noexcept {
  if (tag > static_cast<std::uint8_t>(Activation::softmax)) return std::nullopt;
  return static_cast<Activation>(tag);
}

template <typename T>
BasicMatrix<T> activate(Activation a, const BasicMatrix<T>& pre) {
  switch (a) {
    case Activation::relu: return relu(pre);
    case Activation::sigmoid: return sigmoid(pre);
    case Activation::linear:
    case Activation::softmax: return pre;
  }
  return pre;
}

template <typename T>
void BasicDenseLayer<T>::validate() const {
  if (weights.rows() == 0 || weights.cols() == 0)
    throw std::invalid_argument("dense layer has an empty weight matrix");
  if (bias.size() != weights.cols())
    throw std::invalid_argument("dense layer bias length " + std::to_string(bias.size()) +
                                " does not match out_dim " + std::to_string(weights.cols()));
}

DenseLayer make_dense(std::size_t in_dim, std::size_t out_dim, Activation activation, Rng& rng) {
  const double stddev = activation == Activation::relu
                            ? std::sqrt(2.0 / static_cast<double>(in_dim))
                            : std::sqrt(2.0 / static_cast<double>(in_dim + out_dim));
  DenseLayer layer{Matrix(in_dim, out_dim), std::vector<float>(out_dim, 0.0f), activation};
  for (auto& w : layer.weights.data()) w = static_cast<float>(stddev * rng.standard_normal());
  return layer;
}

template <typename T>
BasicMatrix<T> layer_forward(const BasicDenseLayer<T>& layer, const BasicMatrix<T>& x,
                             BasicTensorHook<T>* hook, std::string_view site,
                             BasicLayerCache<T>* cache) {
  if (x.cols() != layer.in_dim())
    throw std::invalid_argument("layer '" + std::string(site) + "' expects " +
                                std::to_string(layer.in_dim()) + " inputs, got " +
                                std::to_string(x.cols()));
  BasicMatrix<T> weights = layer.weights;
  BasicMatrix<T> weight_pass;
  if (hook) hook->apply(TensorRole::weight, std::string(site) + ".w", weights, weight_pass);

  BasicMatrix<T> output = activate(layer.activation, add_row_vector(matmul(x, weights),
                                                                    std::span<const T>(layer.bias)));
  BasicMatrix<T> hooked = output;
  BasicMatrix<T> output_pass;
  if (hook) hook->apply(TensorRole::activation, std::string(site) + ".out", hooked, output_pass);

  if (cache) {
    cache->input = x;
    cache->weights = std::move(weights);
    cache->weight_pass = std::move(weight_pass);
    cache->output = std::move(output);
    cache->output_pass = std::move(output_pass);
  }
  return hooked;
}

template <typename T>
BasicMatrix<T> layer_backward(const BasicDenseLayer<T>& layer, const BasicLayerCache<T>& cache,
                              const BasicMatrix<T>& d_output, BasicLayerGrad<T>& grad,
                              bool d_is_preactivation) {
  BasicMatrix<T> d_pre = d_output;
  if (!d_is_preactivation) {
    if (!cache.output_pass.empty()) d_pre = hadamard(d_pre, cache.output_pass);
    switch (layer.activation) {
      case Activation::relu:
        for (std::size_t i = 0; i < d_pre.size(); ++i)
          if (!(cache.output[i] > T{0})) d_pre[i] = T{0};
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < d_pre.size(); ++i) {
          const T y = cache.output[i];
          d_pre[i] *= y * (T{1} - y);
        }
        break;
      case Activation::linear:
      case Activation::softmax: break;
    }
  }
  grad.weights = matmul_at_b(cache.input, d_pre);
  if (!cache.weight_pass.empty()) grad.weights = hadamard(grad.weights, cache.weight_pass);
  grad.bias = column_sums(d_pre);
  return matmul_a_bt(d_pre, cache.weights);
}

// ---------------------------------------------------------------------------

template <typename T>
void BasicMlpModel<T>::validate() const {
  if (layers.empty()) throw std::invalid_argument("MLP has no layers");
  if (layers.front().in_dim() != input_dim)
    throw std::invalid_argument("MLP first layer takes " + std::to_string(layers.front().in_dim()) +
                                " inputs but input_dim is " + std::to_string(input_dim));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].validate();
    if (i > 0 && layers[i].in_dim() != layers[i - 1].out_dim())
      throw std::invalid_argument("MLP layer " + std::to_string(i) + " input width mismatch");
    const bool last = i + 1 == layers.size();
    if (last != (layers[i].activation == Activation::softmax))
      throw std::invalid_argument("MLP must end in exactly one softmax layer");
  }
  if (layers.back().out_dim() != n_classes)
    throw std::invalid_argument("MLP softmax width does not match n_classes");
}

template <typename T>
std::size_t BasicMlpModel<T>::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.parameter_count();
  return n;
}

MlpModel make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t n_classes,
                  Rng& rng) {
  if (input_dim == 0 || n_classes < 2)
    throw std::invalid_argument("make_mlp: need input_dim >= 1 and n_classes >= 2");
  MlpModel model{{}, input_dim, n_classes};
  std::size_t width = input_dim;
  for (std::size_t h : hidden) {
    model.layers.push_back(make_dense(width, h, Activation::relu, rng));
    width = h;
  }
  model.layers.push_back(make_dense(width, n_classes, Activation::softmax, rng));
  return model;
}

template <typename T>
BasicMlpForward<T> forward(const BasicMlpModel<T>& model, const BasicMatrix<T>& x,
                           BasicTensorHook<T>* hook) {
  if (x.cols() != model.input_dim)
    throw std::invalid_argument("MLP expects " + std::to_string(model.input_dim) +
                                " features, got " + std::to_string(x.cols()));
  BasicMlpForward<T> fwd;
  fwd.caches.resize(model.layers.size());
  BasicMatrix<T> h = x;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    h = layer_forward(model.layers[i], h, hook, "mlp." + std::to_string(i), &fwd.caches[i]);
  fwd.probs = softmax_rows(h);
  return fwd;
}

template <typename T>
BasicMatrix<T> predict_proba(const BasicMlpModel<T>& model, const BasicMatrix<T>& x,
                             BasicTensorHook<T>* hook) {
  if (x.cols() != model.input_dim)
    throw std::invalid_argument("MLP expects " + std::to_string(model.input_dim) +
                                " features, got " + std::to_string(x.cols()));
  BasicMatrix<T> h = x;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    h = layer_forward(model.layers[i], h, hook, "mlp." + std::to_string(i),
                      static_cast<BasicLayerCache<T>*>(nullptr));
  return softmax_rows(h);
}

namespace {

template <typename T>
void check_labels(std::span<const int> labels, std::size_t rows, std::size_t n_classes) {
  if (labels.size() != rows)
    throw std::invalid_argument("label count " + std::to_string(labels.size()) +
                                " does not match " + std::to_string(rows) + " rows");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes)
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " at row " +
                                  std::to_string(i) + " is outside [0, " +
                                  std::to_string(n_classes) + ")");
}

template <typename T>
T sample_weight(std::span<const T> class_weights, int label) {
  return class_weights.empty() ? T{1} : class_weights[static_cast<std::size_t>(label)];
}

}  // namespace

template <typename T>
T cross_entropy(const BasicMatrix<T>& probs, std::span<const int> labels,
                std::span<const T> class_weights) {
  check_labels<T>(labels, probs.rows(), probs.cols());
  if (probs.rows() == 0) return T{0};
  T total{0};
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const T p = std::max(probs(i, static_cast<std::size_t>(labels[i])), static_cast<T>(1e-12));
    total -= sample_weight(class_weights, labels[i]) * std::log(p);
  }
  return total / static_cast<T>(probs.rows());
}

template <typename T>
std::vector<BasicLayerGrad<T>> backward(const BasicMlpModel<T>& model, const BasicMlpForward<T>& fwd,
                                        std::span<const int> labels,
                                        std::span<const T> class_weights) {
  check_labels<T>(labels, fwd.probs.rows(), fwd.probs.cols());
  const T inv_batch = T{1} / static_cast<T>(fwd.probs.rows());
  // Fused softmax + cross-entropy: d(loss)/d(logits) = (probs - onehot) / batch.
  BasicMatrix<T> d = fwd.probs;
  for (std::size_t i = 0; i < d.rows(); ++i) {
    d(i, static_cast<std::size_t>(labels[i])) -= T{1};
    const T w = sample_weight(class_weights, labels[i]) * inv_batch;
    for (auto& v : d.row(i)) v *= w;
  }
  std::vector<BasicLayerGrad<T>> grads(model.layers.size());
  for (std::size_t i = model.layers.size(); i-- > 0;)
    d = layer_backward(model.layers[i], fwd.caches[i], d, grads[i]);
  return grads;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0f) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be a finite non-negative value");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (optimizer == OptimizerKind::adam &&
      (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f) || !(epsilon > 0.0f)))
    throw std::invalid_argument("adam requires beta1, beta2 in [0, 1) and epsilon > 0");
}

void Optimizer::update(std::size_t slot, std::span<float> params, std::span<const float> grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("optimizer: parameter/gradient length mismatch");
  const float lr = config_.learning_rate;
  if (config_.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
    return;
  }
  if (slot >= m_.size()) {
    m_.resize(slot + 1);
    v_.resize(slot + 1);
  }
  auto& m = m_[slot];
  auto& v = v_[slot];
  if (m.size() != params.size()) {
    m.assign(params.size(), 0.0f);
    v.assign(params.size(), 0.0f);
  }
  const float b1 = config_.beta1, b2 = config_.beta2;
  const auto t = static_cast<double>(std::max<std::uint64_t>(step_, 1));
  const float c1 = static_cast<float>(1.0 - std::pow(static_cast<double>(b1), t));
  const float c2 = static_cast<float>(1.0 - std::pow(static_cast<double>(b2), t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = b1 * m[i] + (1.0f - b1) * grads[i];
    v[i] = b2 * v[i] + (1.0f - b2) * grads[i] * grads[i];
    const float m_hat = m[i] / c1;
    const float v_hat = v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
  }
}

void apply_gradients(Optimizer& opt, std::span<DenseLayer> layers,
                     std::span<const BasicLayerGrad<float>> grads, std::size_t first_slot) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    opt.update(first_slot + 2 * i, layers[i].weights.data(), grads[i].weights.data());
    opt.update(first_slot + 2 * i + 1, layers[i].bias, grads[i].bias);
  }
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  Rng rng(derive_seed(seed, "shuffle", epoch));
  return permutation(rng, n);
}

std::vector<float> inverse_frequency_weights(std::span<const int> labels, std::size_t n_classes) {
  std::vector<std::size_t> counts(n_classes, 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  std::vector<float> weights(n_classes, 0.0f);
  for (std::size_t c = 0; c < n_classes; ++c)
    if (counts[c] > 0)
      weights[c] = static_cast<float>(static_cast<double>(labels.size()) /
                                      (static_cast<double>(n_classes) * counts[c]));
  return weights;
}

MlpTrainResult train(MlpModel model, const Matrix& x, std::span<const int> labels,
                     const TrainConfig& config, TensorHook* hook) {
  config.validate();
  model.validate();
  if (x.rows() == 0) throw std::invalid_argument("train: empty dataset");
  check_labels<float>(labels, x.rows(), model.n_classes);

  const std::vector<float> class_weights =
      config.class_weighting ? inverse_frequency_weights(labels, model.n_classes)
                             : std::vector<float>{};
  Optimizer opt(config);
  MlpTrainResult result;
  std::vector<int> batch_labels;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(config.seed, epoch, x.rows());
    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Matrix xb = gather_rows(x, idx);
      batch_labels.clear();
      for (std::size_t i : idx) batch_labels.push_back(labels[i]);

      const auto fwd = forward(model, xb, hook);
      const float loss = cross_entropy<float>(fwd.probs, batch_labels, class_weights);
      if (!std::isfinite(loss)) throw TrainingError("non-finite classifier loss", epoch, batch_index);
      epoch_loss += static_cast<double>(loss) * static_cast<double>(idx.size());

      const auto grads = backward<float>(model, fwd, batch_labels, class_weights);
      opt.begin_step();
      apply_gradients(opt, model.layers, grads, 0);
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(x.rows()));
  }
  result.model = std::move(model);
  return result;
}

#define QVAE_INSTANTIATE_NN(T)                                                                  \
  template BasicMatrix<T> activate(Activation, const BasicMatrix<T>&);                          \
  template struct BasicDenseLayer<T>;                                                           \
  template struct BasicMlpModel<T>;                                                             \
  template BasicMatrix<T> layer_forward(const BasicDenseLayer<T>&, const BasicMatrix<T>&,       \
                                        BasicTensorHook<T>*, std::string_view,                  \
                                        BasicLayerCache<T>*);                                   \
  template BasicMatrix<T> layer_backward(const BasicDenseLayer<T>&, const BasicLayerCache<T>&,  \
                                         const BasicMatrix<T>&, BasicLayerGrad<T>&, bool);      \
  template BasicMlpForward<T> forward(const BasicMlpModel<T>&, const BasicMatrix<T>&,           \
                                      BasicTensorHook<T>*);                                     \
  template BasicMatrix<T> predict_proba(const BasicMlpModel<T>&, const BasicMatrix<T>&,         \
                                        BasicTensorHook<T>*);                                   \
  template T cross_entropy(const BasicMatrix<T>&, std::span<const int>, std::span<const T>);    \
  template std::vector<BasicLayerGrad<T>> backward(const BasicMlpModel<T>&,                     \
                                                   const BasicMlpForward<T>&,                   \
                                                   std::span<const int>, std::span<const T>);

QVAE_INSTANTIATE_NN(float)
QVAE_INSTANTIATE_NN(double)

#undef QVAE_INSTANTIATE_NN

}  // namespace qvae
