#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "qvae/nn.hpp"
#include "qvae/tensor.hpp"

namespace qvae {

enum class Signedness : std::uint8_t { signed_int8, unsigned_int8 };

/// `nearest` rounds half away from zero; `floor` reproduces a literal ⌊v/s + z⌋.
enum class RoundMode : std::uint8_t { nearest, floor };

/// How the int32 accumulator is rescaled to the output grid: a float multiply
/// (default) or an int32 multiplier with a rounding right shift.
enum class RequantMode : std::uint8_t { float_multiplier, fixed_point };

std::int32_t qmin_of(Signedness s) noexcept;
std::int32_t qmax_of(Signedness s) noexcept;

/// Affine per-tensor quantization parameters: real = scale * (q - zero_point).
struct QuantParams {
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  std::int32_t q_min = -128;
  std::int32_t q_max = 127;

  Signedness signedness() const noexcept {
    return q_min < 0 ? Signedness::signed_int8 : Signedness::unsigned_int8;
  }
  float dequantize(std::int32_t q) const noexcept {
    return scale * static_cast<float>(q - zero_point);
  }
  /// Throws std::invalid_argument unless scale > 0 (finite), the range is one
  /// of the two int8 ranges and zero_point lies inside it.
  void validate() const;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

/// Widens [min_val, max_val] to include 0, then
///   s = (max - min) / (q_max - q_min),  z = clamp(q_min - round(min / s)).
/// An all-zero range yields s = 1, z = 0. Non-finite or inverted input throws.
QuantParams compute_qparams(float min_val, float max_val, Signedness signedness);

/// Round half away from zero, same result as std::round for |t| < 2^52,
/// without the libm call.
inline double round_half_away(double t) noexcept {
  const double i = static_cast<double>(static_cast<std::int64_t>(t));
  const double frac = t - i;
  return frac >= 0.5 ? i + 1.0 : (frac <= -0.5 ? i - 1.0 : i);
}

/// clamp(round_mode(v / s + z), q_min, q_max).
inline std::int32_t quantize_value(float v, const QuantParams& p, RoundMode mode = RoundMode::nearest) noexcept {
  if (std::isnan(v)) return p.zero_point;
  double t = static_cast<double>(v) / static_cast<double>(p.scale) + p.zero_point;
  // Pre-clamping one step outside the range keeps the cast below in bounds
  // for infinities and leaves the final clamp unchanged.
  t = std::clamp(t, p.q_min - 1.0, p.q_max + 1.0);
  const double r = mode == RoundMode::floor ? std::floor(t) : round_half_away(t);
  return static_cast<std::int32_t>(
      std::clamp(r, static_cast<double>(p.q_min), static_cast<double>(p.q_max)));
}

/// Row-major int8 tensor; element bytes are interpreted as int8 or uint8
/// according to the parameters' range.
class QTensor {
 public:
  QTensor() = default;
  /// Filled with the zero point (real 0.0).
  QTensor(std::size_t rows, std::size_t cols, const QuantParams& params);
  /// Takes raw element bytes as stored on disk.
  QTensor(std::size_t rows, std::size_t cols, const QuantParams& params, std::vector<std::uint8_t> raw);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return raw_.size(); }
  const QuantParams& params() const noexcept { return params_; }

  std::int32_t at(std::size_t i) const noexcept {
    return is_signed_ ? static_cast<std::int32_t>(static_cast<std::int8_t>(raw_[i]))
                      : static_cast<std::int32_t>(raw_[i]);
  }
  std::int32_t operator()(std::size_t r, std::size_t c) const noexcept { return at(r * cols_ + c); }
  /// `q` must already lie in [q_min, q_max].
  void set(std::size_t i, std::int32_t q) noexcept { raw_[i] = static_cast<std::uint8_t>(q & 0xff); }

  std::span<const std::uint8_t> raw() const noexcept { return raw_; }

  friend bool operator==(const QTensor&, const QTensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  QuantParams params_;
  bool is_signed_ = true;
  std::vector<std::uint8_t> raw_;
};

QTensor quantize(const Matrix& v, const QuantParams& p, RoundMode mode = RoundMode::nearest);
Matrix dequantize(const QTensor& q);

/// dequantize(quantize(v)). When `pass` is given it receives the straight-through
/// gate: 1 where v / s + z lies within half a step of [q_min, q_max]
/// (i.e. round(v / s + z) is representable), 0 where the value saturates.
Matrix fake_quant(const Matrix& v, const QuantParams& p, RoundMode mode = RoundMode::nearest,
                  Matrix* pass = nullptr);

/// Running range tracker for activation calibration. The tracked range always
/// contains 0 so the zero point stays representable.
class Observer {
 public:
  enum class Mode { absolute, ema };

  explicit Observer(Mode mode = Mode::absolute, float decay = 0.99f);

  void observe(std::span<const float> values);
  void observe(const Matrix& v) { observe(v.data()); }

  bool initialized() const noexcept { return initialized_; }
  float min() const noexcept { return min_; }
  float max() const noexcept { return max_; }
  Mode mode() const noexcept { return mode_; }

  /// Unsigned when the observed range is non-negative, signed otherwise.
  Signedness natural_signedness() const noexcept {
    return min_ < 0.0f ? Signedness::signed_int8 : Signedness::unsigned_int8;
  }
  QuantParams params() const;

 private:
  Mode mode_;
  float decay_;
  bool initialized_ = false;
  float min_ = 0.0f;
  float max_ = 0.0f;
};

/// Integer dense layer. The int32 bias is quantized at scale
/// input_scale * weight_scale with zero point 0.
struct QDenseLayer {
  QTensor weights;  // in_dim x out_dim, signed
  std::vector<std::int32_t> bias;
  QuantParams input_params;
  QuantParams output_params;
  Activation activation = Activation::linear;

  std::size_t in_dim() const noexcept { return weights.rows(); }
  std::size_t out_dim() const noexcept { return weights.cols(); }
  float bias_scale() const noexcept { return input_params.scale * weights.params().scale; }

  /// Structural checks plus the accumulator bound on in_dim.
  void validate() const;

  friend bool operator==(const QDenseLayer&, const QDenseLayer&) = default;
};

/// Largest reduction depth for which int32 accumulation of 8-bit products is
/// overflow-free: 255 * 255 * 2^15 < 2^31.
inline constexpr std::size_t kMaxAccumulationDepth = std::size_t{1} << 15;

/// Quantizes a float layer: weights per-tensor from their exact min/max
/// (signed), bias to int32 at input_scale * weight_scale. Sigmoid layers have
/// no integer realization here and are rejected.
QDenseLayer quantize_layer(const DenseLayer& layer, const QuantParams& input,
                           const QuantParams& output, RoundMode mode = RoundMode::nearest);

struct FixedPointMultiplier {
  std::int32_t multiplier = 0;  // Q0.31, in [2^30, 2^31) for positive reals
  int shift = 0;                // real ≈ multiplier * 2^(shift - 31)
};

FixedPointMultiplier quantize_multiplier(double real);
/// round(acc * multiplier * 2^(shift - 31)), half away from zero, exact in int64.
std::int32_t apply_multiplier(std::int32_t acc, const FixedPointMultiplier& m) noexcept;

/// Rescales an int32 accumulator onto a layer's output grid and applies the
/// layer activation in the integer domain. Shared by qgemm and the
/// single-instance inference engines so both paths round identically.
struct Requantizer {
  RequantMode mode = RequantMode::float_multiplier;
  float multiplier = 1.0f;  // s_x * s_w / s_y
  FixedPointMultiplier fixed;
  std::int32_t zero_point = 0;
  std::int32_t lower = -128;  // q_min, or the zero point for relu
  std::int32_t upper = 127;

  static Requantizer for_layer(const QDenseLayer& layer, RequantMode mode);

  std::int32_t operator()(std::int32_t acc) const noexcept;
};

inline std::int32_t Requantizer::operator()(std::int32_t acc) const noexcept {
  std::int64_t scaled;
  if (mode == RequantMode::fixed_point) {
    scaled = apply_multiplier(acc, fixed);
  } else {
    const double t = std::clamp(static_cast<double>(static_cast<float>(acc) * multiplier), -0x1p40, 0x1p40);
    scaled = static_cast<std::int64_t>(round_half_away(t));
  }
  scaled += zero_point;
  return static_cast<std::int32_t>(std::clamp<std::int64_t>(scaled, lower, upper));
}

/// acc = Σ (x - z_x)(w - z_w) + bias, requantized to the output grid, then the
/// activation in the integer domain (relu clamps at the output zero point).
/// `x.params()` must equal `layer.input_params`.
QTensor qgemm(const QTensor& x, const QDenseLayer& layer,
              RequantMode mode = RequantMode::float_multiplier);

/// Float reference of a quantized layer computed on dequantized operands.
Matrix dequantized_forward(const QTensor& x, const QDenseLayer& layer);

}  // namespace qvae
