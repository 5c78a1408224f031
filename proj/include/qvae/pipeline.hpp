#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qvae/convert.hpp"
#include "qvae/data.hpp"
#include "qvae/eval.hpp"
#include "qvae/model_store.hpp"
#include "qvae/vae.hpp"

namespace qvae {

enum class Variant { unquantized, qat, ptq };

std::string_view variant_name(Variant v) noexcept;
Variant variant_from_name(std::string_view name);

/// Flat `key = value` configuration; see docs/config.md for the keys.
struct ExperimentConfig {
  // data
  std::string source = "synthetic";  // synthetic | csv
  std::string schema = "custom";     // nbaiot | ciciot2022 | custom
  std::vector<CsvSource> csv;
  bool binary = true;
  std::size_t synthetic_per_class = 6000;
  std::size_t synthetic_features = 115;
  std::size_t synthetic_classes = 2;
  double synthetic_spread = 0.15;
  double test_fraction = 1.0 / 6.0;
  std::uint64_t seed = 1;

  // models
  VaeArchitecture vae_arch{0, {32}, 8};
  TrainConfig vae_train{.epochs = 20, .batch_size = 64};
  float vae_beta = 1.0f;
  std::vector<std::size_t> mlp_hidden{16, 16};
  TrainConfig mlp_train{.epochs = 20, .batch_size = 64};
  bool mlp_sampled_latent = false;

  // quantization
  std::vector<Variant> variants{Variant::unquantized, Variant::qat, Variant::ptq};
  std::size_t calib_samples = 512;
  RoundMode round_mode = RoundMode::nearest;
  RequantMode requant = RequantMode::float_multiplier;
  bool qat_warm_start = false;
  float qat_ema_decay = 0.99f;

  // outputs
  std::filesystem::path output_dir = "out";
  std::size_t bench_iters = 30;
  std::size_t bench_warmup = 1;
  std::size_t bench_probe_rows = 256;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  /// key = value lines in canonical order (the config echo in reports).
  std::vector<std::pair<std::string, std::string>> entries() const;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys throw.
/// Relative CSV paths resolve against `base_dir`.
ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
/// Applies one `key=value` override on top of an existing config.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value,
                      const std::filesystem::path& base_dir = {});

/// A failure inside run_experiment, tagged with the stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

using Logger = std::function<void(std::string_view)>;

/// Train/test features after loading, splitting and normalization.
struct PreparedData {
  LabeledDataset train;  // normalized
  LabeledDataset test;   // normalized with the training statistics
  NormStats norm;
  LoadReport load;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

/// Encoder input for the classifier: mu, or one reparameterized sample when
/// `sampled` (drawn with a seed derived from `seed`).
Matrix classifier_inputs(const VaeModel& vae, const Matrix& x, bool sampled, std::uint64_t seed,
                         TensorHook* hook = nullptr);

struct Fp32Models {
  VaeModel vae;
  MlpModel mlp;
  std::vector<double> vae_loss;
  std::vector<double> mlp_loss;
};

/// Phase one: VAE, projection, classifier.
Fp32Models train_fp32(const ExperimentConfig& cfg, const LabeledDataset& train, const Logger& log = {});

struct QatModels {
  VaeModel vae;
  MlpModel mlp;
  QuantizedBundle bundle;
  std::vector<double> vae_loss;
  std::vector<double> mlp_loss;
};

/// QAT from scratch with the FP32 seeds (or from `warm_start`).
QatModels train_qat(const ExperimentConfig& cfg, const LabeledDataset& train,
                    const Fp32Models* warm_start = nullptr, const Logger& log = {});

/// Rows used for PTQ calibration: a seeded subset of the training split.
Matrix calibration_rows(const ExperimentConfig& cfg, const LabeledDataset& train);

struct VariantResult {
  Variant variant = Variant::unquantized;
  MetricsReport metrics;
  ConfusionMatrix confusion{2};
  BenchReport bench;
  std::filesystem::path artifact;
  std::uintmax_t artifact_bytes = 0;
  ArtifactStats stats;
  /// Batch predictions agree with the single-instance engine on the probe rows.
  bool engine_matches_batch = false;
  /// FNV-1a of the float weights the variant was built from.
  std::uint64_t source_weight_hash = 0;
  double build_seconds = 0.0;
};

struct ExperimentReport {
  std::vector<std::pair<std::string, std::string>> config;
  EnvironmentFingerprint environment;
  LoadReport load;
  std::size_t train_rows = 0;
  std::size_t test_rows = 0;
  std::size_t n_classes = 0;
  std::vector<std::string> class_names;
  std::vector<VariantResult> variants;
  std::vector<double> vae_loss, mlp_loss, qat_vae_loss, qat_mlp_loss;

  const VariantResult* find(Variant v) const noexcept;
};

/// Runs the full comparison and writes artifacts plus report.txt / report.jsonl
/// into cfg.output_dir. On failure, files created by this run are removed and
/// a StageError names the failing stage.
ExperimentReport run_experiment(const ExperimentConfig& cfg, const Logger& log = {});

/// Evaluates a loaded bundle artifact on normalized features.
VariantResult evaluate_artifact(Variant variant, const ModelArtifact& model, const LabeledDataset& test,
                                RequantMode requant, std::size_t probe_rows);

/// Detection, storage and latency tables as aligned text.
std::string format_tables(const ExperimentReport& report);
/// One JSON object per line: config, environment, one record per variant.
std::string format_jsonl(const ExperimentReport& report);

}  // namespace qvae
