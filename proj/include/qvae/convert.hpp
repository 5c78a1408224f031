#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>

#include "qvae/bundle.hpp"
#include "qvae/quant.hpp"

namespace qvae {

/// Activation params per hook site (`enc.in`, `enc.<i>.out`, `enc.mu.out`, `mlp.<i>.out`).
using SiteParams = std::map<std::string, QuantParams, std::less<>>;

/// Builds the integer bundle from float weights and per-site activation params.
/// Weights are quantized per tensor from their exact min/max.
QuantizedBundle convert_bundle(const FloatBundle& fb, const SiteParams& params,
                               RoundMode mode = RoundMode::nearest);

/// Inference-only hook that records activation ranges without touching them.
class CalibrationHook final : public TensorHook {
 public:
  explicit CalibrationHook(Observer::Mode mode = Observer::Mode::absolute) : mode_(mode) {}
  void apply(TensorRole role, std::string_view site, Matrix& tensor, Matrix& pass) override;
  SiteParams params() const;
  const std::map<std::string, Observer, std::less<>>& observers() const noexcept { return observers_; }

 private:
  Observer::Mode mode_;
  std::map<std::string, Observer, std::less<>> observers_;
};

/// Calibrates activation ranges with absolute min/max over `calib` (already
/// normalized features) and converts the encoder-mu path plus the classifier.
/// 64 or more calibration rows are recommended; an empty set throws.
QuantizedBundle ptq_convert(const VaeModel& vae, const MlpModel& mlp, const Matrix& calib,
                            RoundMode mode = RoundMode::nearest);
QuantizedBundle ptq_convert(const FloatBundle& fb, const Matrix& calib, RoundMode mode = RoundMode::nearest);

struct QatOptions {
  float ema_decay = 0.99f;
  RoundMode round_mode = RoundMode::nearest;
  /// When set, every activation uses this fixed range instead of EMA observers.
  std::optional<std::pair<float, float>> fixed_activation_range;
  /// Activation sites left in float (the VAE reconstruction output).
  std::set<std::string, std::less<>> passthrough_sites;
};

/// Fake-quantizes every weight tensor (exact per-tensor min/max, signed) and
/// every activation (EMA-observed range, frozen after `freeze()`), recording
/// the straight-through gate for backward.
class QatHook final : public TensorHook {
 public:
  explicit QatHook(QatOptions options = {}) : options_(std::move(options)) {}

  void apply(TensorRole role, std::string_view site, Matrix& tensor, Matrix& pass) override;

  void freeze() noexcept { frozen_ = true; }
  bool frozen() const noexcept { return frozen_; }
  const QatOptions& options() const noexcept { return options_; }

  /// Current params for an activation site; throws if the site was never seen.
  QuantParams activation_params(std::string_view site) const;
  SiteParams all_activation_params() const;

 private:
  QuantParams params_for(std::string_view site) const;

  QatOptions options_;
  bool frozen_ = false;
  std::map<std::string, Observer, std::less<>> observers_;
};

struct QatHooks {
  QatHook vae;
  QatHook mlp;
};

/// Hooks for QAT of a VAE with the given architecture and of its classifier.
QatHooks qat_hooks(const VaeArchitecture& arch, const QatOptions& options = {});

/// Converts QAT-trained models with the (frozen) ranges their hooks learned.
/// The classifier's input params are the `enc.mu.out` params.
QuantizedBundle qat_convert(const VaeModel& vae, const QatHook& vae_hook, const MlpModel& mlp,
                            const QatHook& mlp_hook);

}  // namespace qvae
