#include "qvae/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

#include <sched.h>

#if defined(__SSE2__)
#include <emmintrin.h>
#endif

#ifndef QVAE_BUILD_TYPE
#define QVAE_BUILD_TYPE "unknown"
#endif

namespace qvae {

ConfusionMatrix::ConfusionMatrix(std::size_t n_classes) : n_(n_classes), counts_(n_classes * n_classes, 0) {
  if (n_classes < 2) throw std::invalid_argument("confusion matrix needs at least 2 classes");
}

ConfusionMatrix ConfusionMatrix::from_predictions(std::span<const int> labels,
                                                  std::span<const int> predictions, std::size_t n_classes) {
  if (labels.size() != predictions.size())
    throw std::invalid_argument("label and prediction counts differ");
  ConfusionMatrix cm(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], predictions[i]);
  return cm;
}

void ConfusionMatrix::add(int truth, int predicted, std::uint64_t count) {
  const auto n = static_cast<int>(n_);
  if (truth < 0 || truth >= n || predicted < 0 || predicted >= n)
    throw std::invalid_argument("class index outside the confusion matrix");
  counts_[static_cast<std::size_t>(truth) * n_ + static_cast<std::size_t>(predicted)] += count;
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm, Averaging averaging) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw std::invalid_argument("compute_metrics: empty confusion matrix");
  MetricsReport m;
  m.averaging = averaging;
  const std::size_t n = cm.n_classes();
  std::uint64_t correct = 0;
  for (std::size_t c = 0; c < n; ++c) correct += cm.at(c, c);
  m.accuracy = static_cast<double>(correct) / static_cast<double>(total);

  if (averaging == Averaging::binary) {
    if (n != 2) throw std::invalid_argument("binary metrics need a 2-class confusion matrix");
    const auto tp = static_cast<double>(cm.at(1, 1));
    const auto fp = static_cast<double>(cm.at(0, 1));
    const auto fn = static_cast<double>(cm.at(1, 0));
    if (tp + fp > 0) m.precision = tp / (tp + fp); else m.zero_division = true;
    if (tp + fn > 0) m.recall = tp / (tp + fn); else m.zero_division = true;
    // Same value as 2pr/(p+r), written with a single rounding.
    m.f1 = tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    return m;
  }

  // Extended precision so the averages round to double once.
  long double p_sum = 0, r_sum = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t col = 0, row = 0;
    for (std::size_t k = 0; k < n; ++k) {
      col += cm.at(k, c);
      row += cm.at(c, k);
    }
    const auto tp = static_cast<long double>(cm.at(c, c));
    if (col > 0) p_sum += tp / static_cast<long double>(col); else m.zero_division = true;
    if (row > 0) r_sum += tp / static_cast<long double>(row); else m.zero_division = true;
  }
  const long double p = p_sum / static_cast<long double>(n), r = r_sum / static_cast<long double>(n);
  m.precision = static_cast<double>(p);
  m.recall = static_cast<double>(r);
  m.f1 = p + r > 0 ? static_cast<double>(2 * p * r / (p + r)) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------

void quantize_centered(std::span<const float> x, const QuantParams& p, std::int16_t* out) noexcept {
  const double s = static_cast<double>(p.scale), z = p.zero_point;
  const double lo = p.q_min - 1.0, hi = p.q_max + 1.0;
  std::size_t i = 0;
#if defined(__SSE2__)
  const __m128d vs = _mm_set1_pd(s), vz = _mm_set1_pd(z), vlo = _mm_set1_pd(lo), vhi = _mm_set1_pd(hi);
  const __m128d qlo = _mm_set1_pd(p.q_min), qhi = _mm_set1_pd(p.q_max);
  const __m128d half = _mm_set1_pd(0.5), mhalf = _mm_set1_pd(-0.5), one = _mm_set1_pd(1.0);
  for (; i + 2 <= x.size(); i += 2) {
    const __m128d v = _mm_cvtps_pd(_mm_castpd_ps(_mm_load_sd(reinterpret_cast<const double*>(x.data() + i))));
    __m128d t = _mm_add_pd(_mm_div_pd(v, vs), vz);
    const __m128d nan = _mm_cmpunord_pd(v, v);
    t = _mm_or_pd(_mm_andnot_pd(nan, t), _mm_and_pd(nan, vz));
    t = _mm_min_pd(_mm_max_pd(t, vlo), vhi);
    const __m128d ti = _mm_cvtepi32_pd(_mm_cvttpd_epi32(t));
    const __m128d frac = _mm_sub_pd(t, ti);
    __m128d r = _mm_add_pd(ti, _mm_and_pd(_mm_cmpge_pd(frac, half), one));
    r = _mm_sub_pd(r, _mm_and_pd(_mm_cmple_pd(frac, mhalf), one));
    r = _mm_sub_pd(_mm_min_pd(_mm_max_pd(r, qlo), qhi), vz);
    const __m128i ri = _mm_cvttpd_epi32(r);
    out[i] = static_cast<std::int16_t>(_mm_cvtsi128_si32(ri));
    out[i + 1] = static_cast<std::int16_t>(_mm_cvtsi128_si32(_mm_shuffle_epi32(ri, 1)));
  }
#endif
  for (; i < x.size(); ++i) {
    const float v = x[i];
    double t = v == v ? static_cast<double>(v) / s + z : z;
    t = t < lo ? lo : (t > hi ? hi : t);
    const auto ti = static_cast<std::int32_t>(t);
    const double frac = t - ti;
    std::int32_t r = ti + (frac >= 0.5 ? 1 : 0) - (frac <= -0.5 ? 1 : 0);
    r = std::clamp(r, p.q_min, p.q_max);
    out[i] = static_cast<std::int16_t>(r - p.zero_point);
  }
}

namespace {

class FloatEngine final : public InferenceEngine {
 public:
  explicit FloatEngine(const FloatBundle& b) {
    b.validate();
    for (const auto& l : b.encoder) encoder_.push_back(l);
    for (const auto& l : b.classifier.layers) classifier_.push_back(l);
    std::size_t width = b.input_dim();
    for (const auto& l : encoder_) width = std::max(width, l.out_dim());
    for (const auto& l : classifier_) width = std::max(width, l.out_dim());
    a_.resize(width);
    b_.resize(width);
    latent_.resize(b.latent_dim());
  }

  std::size_t input_dim() const noexcept override { return encoder_.front().in_dim(); }

  void encode(std::span<const float> x) override {
    if (x.size() != input_dim()) throw std::invalid_argument("engine input width mismatch");
    std::copy(x.begin(), x.end(), a_.begin());
    const float* out = run(encoder_, a_.data(), b_.data());
    std::copy(out, out + latent_.size(), latent_.begin());
  }

  int classify() override {
    std::copy(latent_.begin(), latent_.end(), a_.begin());
    const float* logits = run(classifier_, a_.data(), b_.data());
    const std::size_t n = classifier_.back().out_dim();
    return static_cast<int>(std::max_element(logits, logits + n) - logits);
  }

 private:
  static const float* run(const std::vector<DenseLayer>& layers, float* in, float* out) {
    for (const auto& l : layers) {
      const std::size_t n_in = l.in_dim(), n_out = l.out_dim();
      // Same accumulation order as matmul + add_row_vector, so results match
      // the batch path bit for bit.
      std::fill(out, out + n_out, 0.0f);
      const float* w = l.weights.data().data();
      for (std::size_t k = 0; k < n_in; ++k) {
        const float xv = in[k];
        const float* w_row = w + k * n_out;
        for (std::size_t j = 0; j < n_out; ++j) out[j] += xv * w_row[j];
      }
      for (std::size_t j = 0; j < n_out; ++j) out[j] += l.bias[j];
      if (l.activation == Activation::relu)
        for (std::size_t j = 0; j < n_out; ++j) out[j] = std::max(out[j], 0.0f);
      std::swap(in, out);
    }
    return in;
  }

  std::vector<DenseLayer> encoder_;
  std::vector<DenseLayer> classifier_;
  std::vector<float> a_, b_, latent_;
};

class Int8Engine final : public InferenceEngine {
 public:
  Int8Engine(const QuantizedBundle& b, RequantMode mode) : input_params_(b.input_params()) {
    b.validate();
    std::size_t width = b.input_dim();
    for (const auto& l : b.encoder) encoder_.push_back(prepare(l, mode, width));
    for (const auto& l : b.classifier) classifier_.push_back(prepare(l, mode, width));
    // One spare slot so odd widths can be padded with a zero pair partner.
    a_.assign(width + 1, 0);
    b_.assign(width + 1, 0);
    pairs_.resize(width / 2 + 1);
    latent_.resize(b.encoder.back().out_dim());
  }

  std::size_t input_dim() const noexcept override { return encoder_.front().in; }

  void encode(std::span<const float> x) override {
    if (x.size() != input_dim()) throw std::invalid_argument("engine input width mismatch");
    quantize_centered(x, input_params_, a_.data());
    a_[x.size()] = 0;
    const std::int16_t* out = run(encoder_, a_.data(), b_.data());
    std::copy(out, out + latent_.size(), latent_.begin());
  }

  int classify() override {
    std::copy(latent_.begin(), latent_.end(), a_.begin());
    a_[latent_.size()] = 0;
    const std::int16_t* logits = run(classifier_, a_.data(), b_.data());
    const std::size_t n = classifier_.back().out;
    return static_cast<int>(std::max_element(logits, logits + n) - logits);
  }

 private:
  // Activations travel between layers as codes minus the zero point. The
  // chain check guarantees each layer's output zero is the next one's input
  // zero, and argmax over centered logits equals argmax over codes.
  //
  // Centered weights are grouped in blocks of four outputs; within a block,
  // inputs 2p and 2p+1 are interleaved so that one 16-bit multiply-add
  // covers two inputs for four outputs:
  //   w[((j / 4) * pairs + k / 2) * 8 + (j % 4) * 2 + k % 2]
  struct Layer {
    std::size_t in = 0, out = 0, pairs = 0, blocks = 0;
    std::int32_t output_zero = 0;
    std::vector<std::int16_t> w;
    std::vector<std::int32_t> bias;  // padded to 4 * blocks
    Requantizer requant;
  };

  static Layer prepare(const QDenseLayer& l, RequantMode mode, std::size_t& width) {
    Layer p;
    p.in = l.in_dim();
    p.out = l.out_dim();
    p.pairs = (p.in + 1) / 2;
    p.blocks = (p.out + 3) / 4;
    p.output_zero = l.output_params.zero_point;
    const std::int32_t zw = l.weights.params().zero_point;
    p.w.assign(p.blocks * p.pairs * 8, 0);
    for (std::size_t k = 0; k < p.in; ++k)
      for (std::size_t j = 0; j < p.out; ++j)
        p.w[((j / 4) * p.pairs + k / 2) * 8 + (j % 4) * 2 + k % 2] =
            static_cast<std::int16_t>(l.weights.at(k * p.out + j) - zw);
    p.bias = l.bias;
    p.bias.resize(p.blocks * 4, 0);
    p.requant = Requantizer::for_layer(l, mode);
    width = std::max(width, p.blocks * 4);
    return p;
  }

  const std::int16_t* run(const std::vector<Layer>& layers, std::int16_t* in, std::int16_t* out) {
    for (const auto& l : layers) {
      // Each pair of inputs packed as one 32-bit lane value.
      for (std::size_t p = 0; p < l.pairs; ++p)
        pairs_[p] = static_cast<std::int32_t>(static_cast<std::uint16_t>(in[2 * p])) |
                    static_cast<std::int32_t>(static_cast<std::uint32_t>(static_cast<std::uint16_t>(in[2 * p + 1])) << 16);
      for (std::size_t b = 0; b < l.blocks; ++b) {
        const std::int16_t* w = l.w.data() + b * l.pairs * 8;
        std::int32_t acc[4];
#if defined(__SSE2__)
        __m128i av = _mm_loadu_si128(reinterpret_cast<const __m128i*>(l.bias.data() + b * 4));
        for (std::size_t p = 0; p < l.pairs; ++p) {
          const __m128i wv = _mm_loadu_si128(reinterpret_cast<const __m128i*>(w + p * 8));
          av = _mm_add_epi32(av, _mm_madd_epi16(_mm_set1_epi32(pairs_[p]), wv));
        }
        _mm_storeu_si128(reinterpret_cast<__m128i*>(acc), av);
#else
        for (std::size_t j = 0; j < 4; ++j) acc[j] = l.bias[b * 4 + j];
        for (std::size_t p = 0; p < l.pairs; ++p)
          for (std::size_t j = 0; j < 4; ++j)
            acc[j] += in[2 * p] * w[p * 8 + j * 2] + in[2 * p + 1] * w[p * 8 + j * 2 + 1];
#endif
        for (std::size_t j = 0; j < 4 && b * 4 + j < l.out; ++j)
          out[b * 4 + j] = static_cast<std::int16_t>(l.requant(acc[j]) - l.output_zero);
      }
      out[l.out] = 0;
      std::swap(in, out);
    }
    return in;
  }

  QuantParams input_params_;
  std::vector<Layer> encoder_;
  std::vector<Layer> classifier_;
  std::vector<std::int16_t> a_, b_, latent_;
  std::vector<std::int32_t> pairs_;
};

using Clock = std::chrono::steady_clock;

double seconds(Clock::duration d) { return std::chrono::duration<double>(d).count(); }

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

LatencyStats summarize(const std::vector<double>& samples, std::size_t per_pass) {
  std::vector<double> pass_means;
  for (std::size_t start = 0; start < samples.size(); start += per_pass) {
    double sum = 0.0;
    for (std::size_t i = start; i < start + per_pass; ++i) sum += samples[i];
    pass_means.push_back(sum / static_cast<double>(per_pass));
  }
  return {median(std::move(pass_means)), percentile(samples, 0.50), percentile(samples, 0.95)};
}

}  // namespace

std::unique_ptr<InferenceEngine> make_engine(const FloatBundle& b) { return std::make_unique<FloatEngine>(b); }

std::unique_ptr<InferenceEngine> make_engine(const QuantizedBundle& b, RequantMode mode) {
  return std::make_unique<Int8Engine>(b, mode);
}

std::unique_ptr<InferenceEngine> make_engine(const ModelArtifact& m, RequantMode mode) {
  if (const auto* fb = std::get_if<FloatBundle>(&m)) return make_engine(*fb);
  if (const auto* qb = std::get_if<QuantizedBundle>(&m)) return make_engine(*qb, mode);
  throw std::invalid_argument("only encoder+classifier bundles can be executed");
}

std::vector<int> predict_each(InferenceEngine& engine, const Matrix& x) {
  std::vector<int> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = engine.predict(x.row(r));
  return out;
}

bool pin_current_thread() noexcept {
  cpu_set_t allowed;
  CPU_ZERO(&allowed);
  if (sched_getaffinity(0, sizeof allowed, &allowed) != 0) return false;
  for (int cpu = 0; cpu < CPU_SETSIZE; ++cpu) {
    if (!CPU_ISSET(cpu, &allowed)) continue;
    cpu_set_t one;
    CPU_ZERO(&one);
    CPU_SET(cpu, &one);
    return sched_setaffinity(0, sizeof one, &one) == 0;
  }
  return false;
}

BenchReport bench_latency(const ModelArtifact& model, const Matrix& probe, const BenchOptions& options) {
  if (options.iters < 30) throw std::invalid_argument("bench_latency: iters must be >= 30");
  if (probe.rows() == 0) throw std::invalid_argument("bench_latency: empty probe set");
  auto engine = make_engine(model, options.requant);
  if (probe.cols() != engine->input_dim())
    throw std::invalid_argument("probe rows have " + std::to_string(probe.cols()) +
                                " features, model expects " + std::to_string(engine->input_dim()));

  BenchReport r;
  r.pinned = options.pin_thread && pin_current_thread();
  r.probe_rows = probe.rows();
  r.warmup_iters = options.warmup_passes;
  r.measured_iters = options.iters;
  for (std::size_t p = 0; p < options.warmup_passes; ++p)
    for (std::size_t i = 0; i < probe.rows(); ++i) engine->predict(probe.row(i));

  const std::size_t n = probe.rows();
  std::vector<double> enc(n * options.iters), cls(n * options.iters), tot(n * options.iters);
  r.predictions.resize(n);
  for (std::size_t it = 0; it < options.iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto t0 = Clock::now();
      engine->encode(probe.row(i));
      const auto t1 = Clock::now();
      r.predictions[i] = engine->classify();
      const auto t2 = Clock::now();
      const std::size_t k = it * n + i;
      enc[k] = seconds(t1 - t0);
      cls[k] = seconds(t2 - t1);
      tot[k] = seconds(t2 - t0);
    }
  }
  r.encoder = summarize(enc, n);
  r.classifier = summarize(cls, n);
  r.total = summarize(tot, n);
  return r;
}

BenchReport bench_latency(const std::filesystem::path& artifact, const Matrix& probe,
                          const BenchOptions& options) {
  const ModelArtifact model = load(artifact);
  BenchReport r = bench_latency(model, probe, options);
  r.artifact_bytes = artifact_size(artifact);
  return r;
}

EnvironmentFingerprint environment_fingerprint() {
  EnvironmentFingerprint f;
  f.hardware_threads = std::thread::hardware_concurrency();
  auto best = Clock::duration::max();
  for (int i = 0; i < 1000; ++i) {
    const auto a = Clock::now();
    auto b = Clock::now();
    while (b == a) b = Clock::now();
    best = std::min(best, b - a);
  }
  f.clock_resolution_s = seconds(best);
#if defined(__clang__)
  f.compiler = "clang " __clang_version__;
#elif defined(__GNUC__)
  f.compiler = "gcc " __VERSION__;
#else
  f.compiler = "unknown";
#endif
  f.build_type = QVAE_BUILD_TYPE;
  return f;
}

}  // namespace qvae
