#include "qvae/convert.hpp"

#include <algorithm>
#include <stdexcept>

namespace qvae {

namespace {

const QuantParams& site(const SiteParams& params, const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end()) throw std::invalid_argument("no activation range recorded for '" + name + "'");
  return it->second;
}

std::string encoder_site(const FloatBundle& fb, std::size_t i) {
  return i + 1 == fb.encoder.size() ? std::string("enc.mu.out") : "enc." + std::to_string(i) + ".out";
}

}  // namespace

QuantizedBundle convert_bundle(const FloatBundle& fb, const SiteParams& params, RoundMode mode) {
  fb.validate();
  QuantizedBundle qb;
  QuantParams in = site(params, "enc.in");
  for (std::size_t i = 0; i < fb.encoder.size(); ++i) {
    const QuantParams out = site(params, encoder_site(fb, i));
    qb.encoder.push_back(quantize_layer(fb.encoder[i], in, out, mode));
    in = out;
  }
  for (std::size_t i = 0; i < fb.classifier.layers.size(); ++i) {
    const QuantParams out = site(params, "mlp." + std::to_string(i) + ".out");
    qb.classifier.push_back(quantize_layer(fb.classifier.layers[i], in, out, mode));
    in = out;
  }
  qb.validate();
  return qb;
}

void CalibrationHook::apply(TensorRole role, std::string_view site, Matrix& tensor, Matrix&) {
  if (role != TensorRole::activation) return;
  auto it = observers_.find(site);
  if (it == observers_.end()) it = observers_.emplace(std::string(site), Observer(mode_)).first;
  it->second.observe(tensor);
}

SiteParams CalibrationHook::params() const {
  SiteParams out;
  for (const auto& [name, obs] : observers_) out.emplace(name, obs.params());
  return out;
}

QuantizedBundle ptq_convert(const FloatBundle& fb, const Matrix& calib, RoundMode mode) {
  if (calib.rows() == 0) throw std::invalid_argument("ptq_convert: calibration set is empty");
  fb.validate();
  CalibrationHook hook;
  // Same hook sites as project() followed by the classifier forward pass.
  Matrix h = calib, unused;
  hook.apply(TensorRole::activation, "enc.in", h, unused);
  for (std::size_t i = 0; i < fb.encoder.size(); ++i) {
    const std::string name = i + 1 == fb.encoder.size() ? std::string("enc.mu") : "enc." + std::to_string(i);
    h = layer_forward<float>(fb.encoder[i], h, &hook, name, nullptr);
  }
  predict_proba(fb.classifier, h, &hook);
  return convert_bundle(fb, hook.params(), mode);
}

QuantizedBundle ptq_convert(const VaeModel& vae, const MlpModel& mlp, const Matrix& calib,
                            RoundMode mode) {
  return ptq_convert(make_float_bundle(vae, mlp), calib, mode);
}

void QatHook::apply(TensorRole role, std::string_view site, Matrix& tensor, Matrix& pass) {
  if (tensor.empty()) return;
  if (role == TensorRole::weight) {
    const auto [lo, hi] = std::minmax_element(tensor.data().begin(), tensor.data().end());
    const QuantParams p = compute_qparams(*lo, *hi, Signedness::signed_int8);
    tensor = fake_quant(tensor, p, options_.round_mode, &pass);
    return;
  }
  if (options_.passthrough_sites.contains(site)) return;
  if (!frozen_ && !options_.fixed_activation_range) {
    auto it = observers_.find(site);
    if (it == observers_.end())
      it = observers_.emplace(std::string(site), Observer(Observer::Mode::ema, options_.ema_decay)).first;
    it->second.observe(tensor);
  }
  tensor = fake_quant(tensor, params_for(site), options_.round_mode, &pass);
}

QuantParams QatHook::params_for(std::string_view site) const {
  if (options_.fixed_activation_range) {
    const auto [lo, hi] = *options_.fixed_activation_range;
    return compute_qparams(lo, hi, lo < 0.0f ? Signedness::signed_int8 : Signedness::unsigned_int8);
  }
  const auto it = observers_.find(site);
  if (it == observers_.end() || !it->second.initialized())
    throw std::logic_error("QAT hook has no range for activation '" + std::string(site) + "'");
  return it->second.params();
}

QuantParams QatHook::activation_params(std::string_view site) const { return params_for(site); }

SiteParams QatHook::all_activation_params() const {
  SiteParams out;
  for (const auto& [name, obs] : observers_)
    if (obs.initialized()) out.emplace(name, params_for(name));
  return out;
}

QatHooks qat_hooks(const VaeArchitecture& arch, const QatOptions& options) {
  QatOptions vae_opts = options;
  // The decoder mirrors the trunk, so its last layer index equals the trunk depth.
  vae_opts.passthrough_sites.insert("dec." + std::to_string(arch.hidden.size()) + ".out");
  return {QatHook(vae_opts), QatHook(options)};
}

QuantizedBundle qat_convert(const VaeModel& vae, const QatHook& vae_hook, const MlpModel& mlp,
                            const QatHook& mlp_hook) {
  const FloatBundle fb = make_float_bundle(vae, mlp);
  SiteParams params;
  params.emplace("enc.in", vae_hook.activation_params("enc.in"));
  for (std::size_t i = 0; i < fb.encoder.size(); ++i) {
    const std::string name = encoder_site(fb, i);
    params.emplace(name, vae_hook.activation_params(name));
  }
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const std::string name = "mlp." + std::to_string(i) + ".out";
    params.emplace(name, mlp_hook.activation_params(name));
  }
  return convert_bundle(fb, params, vae_hook.options().round_mode);
}

}  // namespace qvae
