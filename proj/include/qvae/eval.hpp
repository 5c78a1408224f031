#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qvae/bundle.hpp"
#include "qvae/model_store.hpp"

namespace qvae {

/// Rows are true classes, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes);
  static ConfusionMatrix from_predictions(std::span<const int> labels, std::span<const int> predictions,
                                          std::size_t n_classes);

  void add(int truth, int predicted, std::uint64_t count = 1);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * n_ + predicted); }
  std::size_t n_classes() const noexcept { return n_; }
  std::uint64_t total() const noexcept;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

enum class Averaging { binary, macro };

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  Averaging averaging = Averaging::binary;
  /// Set when some precision/recall denominator was zero and scored as 0.
  bool zero_division = false;
};

/// Binary mode needs a 2x2 matrix and treats class 1 (attack) as positive.
/// Macro mode averages per-class precision and recall without weights and
/// reports F1 as their harmonic mean, so f1 == 2pr / (p + r) in both modes.
/// An empty matrix throws.
MetricsReport compute_metrics(const ConfusionMatrix& cm, Averaging averaging);

/// Single-instance inference with preallocated buffers; one forward call per
/// traffic instance. `predict` = `encode` then `classify`.
class InferenceEngine {
 public:
  virtual ~InferenceEngine() = default;
  virtual std::size_t input_dim() const noexcept = 0;
  /// Runs the encoder-mu path on one instance and keeps the latent internally.
  virtual void encode(std::span<const float> x) = 0;
  /// Classifies the latent from the last `encode`; argmax on the logits.
  virtual int classify() = 0;
  int predict(std::span<const float> x) {
    encode(x);
    return classify();
  }
};

std::unique_ptr<InferenceEngine> make_engine(const FloatBundle& b);
std::unique_ptr<InferenceEngine> make_engine(const QuantizedBundle& b,
                                             RequantMode mode = RequantMode::float_multiplier);
/// Only bundle artifacts are executable; anything else throws.
std::unique_ptr<InferenceEngine> make_engine(const ModelArtifact& m,
                                             RequantMode mode = RequantMode::float_multiplier);

/// quantize_value(x[i], p) - p.zero_point for every element, vectorized; the
/// INT8 engine's input stage.
void quantize_centered(std::span<const float> x, const QuantParams& p, std::int16_t* out) noexcept;

std::vector<int> predict_each(InferenceEngine& engine, const Matrix& x);

struct LatencyStats {
  double mean_s = 0.0;  // median over passes of the per-pass mean
  double p50_s = 0.0;
  double p95_s = 0.0;
};

struct BenchOptions {
  std::size_t warmup_passes = 1;
  std::size_t iters = 30;  // measured passes over the probe set, >= 30
  bool pin_thread = true;
  RequantMode requant = RequantMode::float_multiplier;
};

struct BenchReport {
  LatencyStats total;       // encoder + classifier, per instance
  LatencyStats encoder;
  LatencyStats classifier;
  std::size_t warmup_iters = 0;
  std::size_t measured_iters = 0;
  std::size_t probe_rows = 0;
  std::uintmax_t artifact_bytes = 0;
  bool pinned = false;
  std::vector<int> predictions;  // from the last measured pass
};

BenchReport bench_latency(const ModelArtifact& model, const Matrix& probe, const BenchOptions& options = {});
/// Loads the artifact (excluded from timing) and records its size.
BenchReport bench_latency(const std::filesystem::path& artifact, const Matrix& probe,
                          const BenchOptions& options = {});

/// Best-effort pin of the calling thread to the first CPU it may run on.
bool pin_current_thread() noexcept;

struct EnvironmentFingerprint {
  unsigned hardware_threads = 0;
  unsigned benchmark_threads = 1;
  double clock_resolution_s = 0.0;  // smallest observed steady_clock step
  std::string compiler;
  std::string build_type;
};

EnvironmentFingerprint environment_fingerprint();

}  // namespace qvae
