#include "qvae/quant.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace qvae {

std::int32_t qmin_of(Signedness s) noexcept { return s == Signedness::signed_int8 ? -128 : 0; }
std::int32_t qmax_of(Signedness s) noexcept { return s == Signedness::signed_int8 ? 127 : 255; }

void QuantParams::validate() const {
  if (!(scale > 0.0f) || !std::isfinite(scale))
    throw std::invalid_argument("quant params: scale must be positive and finite");
  const bool known_range = (q_min == -128 && q_max == 127) || (q_min == 0 && q_max == 255);
  if (!known_range)
    throw std::invalid_argument("quant params: range [" + std::to_string(q_min) + ", " +
                                std::to_string(q_max) + "] is not an int8 range");
  if (zero_point < q_min || zero_point > q_max)
    throw std::invalid_argument("quant params: zero point " + std::to_string(zero_point) +
                                " outside [" + std::to_string(q_min) + ", " +
                                std::to_string(q_max) + "]");
}

QuantParams compute_qparams(float min_val, float max_val, Signedness signedness) {
  if (!std::isfinite(min_val) || !std::isfinite(max_val))
    throw std::invalid_argument("compute_qparams: range must be finite");
  if (min_val > max_val) throw std::invalid_argument("compute_qparams: min exceeds max");

  QuantParams p;
  p.q_min = qmin_of(signedness);
  p.q_max = qmax_of(signedness);
  const double lo = std::min(static_cast<double>(min_val), 0.0);
  const double hi = std::max(static_cast<double>(max_val), 0.0);
  if (hi == lo) {
    p.scale = 1.0f;
    p.zero_point = std::clamp(0, p.q_min, p.q_max);
    return p;
  }
  const double levels = static_cast<double>(p.q_max - p.q_min);
  p.scale = std::max(static_cast<float>((hi - lo) / levels), std::numeric_limits<float>::min());
  // lo / s evaluated as lo * levels / (hi - lo) keeps symmetric ranges exact
  // (e.g. -127.5 for [-1, 1]) so the half-way case rounds as specified.
  const double z = static_cast<double>(p.q_min) - std::round(lo * levels / (hi - lo));
  p.zero_point = static_cast<std::int32_t>(
      std::clamp(z, static_cast<double>(p.q_min), static_cast<double>(p.q_max)));
  return p;
}


QTensor::QTensor(std::size_t rows, std::size_t cols, const QuantParams& params)
    : rows_(rows), cols_(cols), params_(params), is_signed_(params.q_min < 0), raw_(rows * cols) {
  params_.validate();
  for (std::size_t i = 0; i < raw_.size(); ++i) set(i, params_.zero_point);
}

QTensor::QTensor(std::size_t rows, std::size_t cols, const QuantParams& params,
                 std::vector<std::uint8_t> raw)
    : rows_(rows), cols_(cols), params_(params), is_signed_(params.q_min < 0), raw_(std::move(raw)) {
  params_.validate();
  if (raw_.size() != rows_ * cols_)
    throw std::invalid_argument("QTensor: " + std::to_string(raw_.size()) + " bytes for " +
                                std::to_string(rows_) + "x" + std::to_string(cols_));
}

QTensor quantize(const Matrix& v, const QuantParams& p, RoundMode mode) {
  QTensor q(v.rows(), v.cols(), p);
  for (std::size_t i = 0; i < v.size(); ++i) q.set(i, quantize_value(v[i], p, mode));
  return q;
}

Matrix dequantize(const QTensor& q) {
  Matrix out(q.rows(), q.cols());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = q.params().dequantize(q.at(i));
  return out;
}

Matrix fake_quant(const Matrix& v, const QuantParams& p, RoundMode mode, Matrix* pass) {
  Matrix out(v.rows(), v.cols());
  if (pass) *pass = Matrix(v.rows(), v.cols());
  const double lo = static_cast<double>(p.q_min) - 0.5;
  const double hi = static_cast<double>(p.q_max) + 0.5;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = p.dequantize(quantize_value(v[i], p, mode));
    if (pass) {
      const double t = static_cast<double>(v[i]) / static_cast<double>(p.scale) + p.zero_point;
      (*pass)[i] = (t >= lo && t <= hi) ? 1.0f : 0.0f;
    }
  }
  return out;
}

Observer::Observer(Mode mode, float decay) : mode_(mode), decay_(decay) {
  if (!(decay >= 0.0f && decay < 1.0f))
    throw std::invalid_argument("observer decay must lie in [0, 1)");
}

void Observer::observe(std::span<const float> values) {
  if (values.empty()) return;
  float lo = std::numeric_limits<float>::infinity();
  float hi = -lo;
  for (float v : values) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (lo > hi) return;  // nothing finite
  if (!initialized_) {
    min_ = lo;
    max_ = hi;
    initialized_ = true;
  } else if (mode_ == Mode::absolute) {
    min_ = std::min(min_, lo);
    max_ = std::max(max_, hi);
  } else {
    min_ = decay_ * min_ + (1.0f - decay_) * lo;
    max_ = decay_ * max_ + (1.0f - decay_) * hi;
  }
  min_ = std::min(min_, 0.0f);
  max_ = std::max(max_, 0.0f);
}

QuantParams Observer::params() const {
  if (!initialized_) throw std::logic_error("observer has not seen any data");
  return compute_qparams(min_, max_, natural_signedness());
}

void QDenseLayer::validate() const {
  weights.params().validate();
  input_params.validate();
  output_params.validate();
  if (weights.params().signedness() != Signedness::signed_int8)
    throw std::invalid_argument("quantized weights must be signed int8");
  if (in_dim() == 0 || out_dim() == 0) throw std::invalid_argument("quantized layer is empty");
  if (bias.size() != out_dim())
    throw std::invalid_argument("quantized bias length does not match out_dim");
  if (in_dim() > kMaxAccumulationDepth)
    throw std::invalid_argument("quantized layer in_dim exceeds the int32 accumulation bound");
  if (activation == Activation::sigmoid)
    throw std::invalid_argument("sigmoid has no integer realization");
}

QDenseLayer quantize_layer(const DenseLayer& layer, const QuantParams& input,
                           const QuantParams& output, RoundMode mode) {
  layer.validate();
  input.validate();
  output.validate();
  if (layer.activation == Activation::sigmoid)
    throw std::invalid_argument("quantize_layer: sigmoid layers are not supported");
  const auto [wmin, wmax] = std::minmax_element(layer.weights.data().begin(), layer.weights.data().end());
  const QuantParams wp = compute_qparams(*wmin, *wmax, Signedness::signed_int8);

  QDenseLayer q;
  q.weights = quantize(layer.weights, wp, mode);
  q.input_params = input;
  q.output_params = output;
  q.activation = layer.activation;
  const double bias_scale = static_cast<double>(q.bias_scale());
  q.bias.resize(layer.bias.size());
  constexpr double lim = static_cast<double>(std::numeric_limits<std::int32_t>::max());
  for (std::size_t j = 0; j < layer.bias.size(); ++j)
    q.bias[j] = static_cast<std::int32_t>(
        std::clamp(std::round(static_cast<double>(layer.bias[j]) / bias_scale), -lim, lim));
  q.validate();
  return q;
}

FixedPointMultiplier quantize_multiplier(double real) {
  if (!(real > 0.0) || !std::isfinite(real))
    throw std::invalid_argument("quantize_multiplier: multiplier must be positive and finite");
  int exponent = 0;
  const double mantissa = std::frexp(real, &exponent);  // real = mantissa * 2^exponent, [0.5, 1)
  auto q = static_cast<std::int64_t>(std::round(mantissa * static_cast<double>(1LL << 31)));
  if (q == (1LL << 31)) {
    q /= 2;
    ++exponent;
  }
  return {static_cast<std::int32_t>(q), exponent};
}

std::int32_t apply_multiplier(std::int32_t acc, const FixedPointMultiplier& m) noexcept {
  const std::int64_t prod = static_cast<std::int64_t>(acc) * m.multiplier;
  const int total_shift = 31 - m.shift;
  std::int64_t result;
  if (total_shift <= 0) {
    result = prod * (std::int64_t{1} << std::min(-total_shift, 30));
  } else if (total_shift >= 63) {
    result = 0;
  } else {
    const std::int64_t half = std::int64_t{1} << (total_shift - 1);
    result = prod >= 0 ? (prod + half) >> total_shift : -((-prod + half) >> total_shift);
  }
  constexpr std::int64_t lim = std::numeric_limits<std::int32_t>::max();
  return static_cast<std::int32_t>(std::clamp(result, -lim, lim));
}

Requantizer Requantizer::for_layer(const QDenseLayer& layer, RequantMode mode) {
  Requantizer r;
  r.mode = mode;
  const double real = static_cast<double>(layer.input_params.scale) * layer.weights.params().scale /
                      layer.output_params.scale;
  r.multiplier = static_cast<float>(real);
  r.fixed = quantize_multiplier(real);
  r.zero_point = layer.output_params.zero_point;
  r.lower = layer.activation == Activation::relu
                ? std::max(layer.output_params.zero_point, layer.output_params.q_min)
                : layer.output_params.q_min;
  r.upper = layer.output_params.q_max;
  return r;
}

QTensor qgemm(const QTensor& x, const QDenseLayer& layer, RequantMode mode) {
  if (!(x.params() == layer.input_params))
    throw std::invalid_argument("qgemm: input quantization does not match the layer's input params");
  if (x.cols() != layer.in_dim())
    throw std::invalid_argument("qgemm: layer expects " + std::to_string(layer.in_dim()) +
                                " inputs, got " + std::to_string(x.cols()));
  assert(layer.in_dim() <= kMaxAccumulationDepth);

  const std::size_t k_dim = layer.in_dim(), n_out = layer.out_dim();
  const std::int32_t zx = x.params().zero_point;
  const std::int32_t zw = layer.weights.params().zero_point;
  std::vector<std::int32_t> w_centered(k_dim * n_out);
  for (std::size_t i = 0; i < w_centered.size(); ++i) w_centered[i] = layer.weights.at(i) - zw;

  const Requantizer requant = Requantizer::for_layer(layer, mode);
  QTensor out(x.rows(), n_out, layer.output_params);
  std::vector<std::int32_t> acc(n_out);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::copy(layer.bias.begin(), layer.bias.end(), acc.begin());
    for (std::size_t k = 0; k < k_dim; ++k) {
      const std::int32_t xv = x(r, k) - zx;
      if (xv == 0) continue;
      const std::int32_t* w_row = w_centered.data() + k * n_out;
      for (std::size_t j = 0; j < n_out; ++j) acc[j] += xv * w_row[j];
    }
    for (std::size_t j = 0; j < n_out; ++j) out.set(r * n_out + j, requant(acc[j]));
  }
  return out;
}

Matrix dequantized_forward(const QTensor& x, const QDenseLayer& layer) {
  std::vector<float> bias(layer.bias.size());
  for (std::size_t j = 0; j < bias.size(); ++j)
    bias[j] = static_cast<float>(layer.bias[j]) * layer.bias_scale();
  return activate(layer.activation, add_row_vector(matmul(dequantize(x), dequantize(layer.weights)),
                                                   std::span<const float>(bias)));
}

}  // namespace qvae
