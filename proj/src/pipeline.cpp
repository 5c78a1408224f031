#include "qvae/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>
#include <system_error>

#include <fmt/format.h>
#include "json.hpp"

#include "qvae/rng.hpp"

namespace qvae {

std::string_view variant_name(Variant v) noexcept {
  switch (v) {
    case Variant::unquantized: return "unquantized";
    case Variant::qat: return "qat";
    case Variant::ptq: return "ptq";
  }
  return "unknown";
}

Variant variant_from_name(std::string_view name) {
  if (name == "unquantized" || name == "fp32") return Variant::unquantized;
  if (name == "qat") return Variant::qat;
  if (name == "ptq") return Variant::ptq;
  throw std::invalid_argument("unknown variant '" + std::string(name) + "' (expected unquantized, qat or ptq)");
}

// ---------------------------------------------------------------------------
// Config

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t pos = v.find(',', start);
    const auto item = trim(v.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!item.empty()) out.emplace_back(item);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw std::invalid_argument("config key '" + std::string(key) + "': '" + std::string(v) +
                                "' is not a valid number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key '" + std::string(key) + "': '" + std::string(v) + "' is not a boolean");
}

std::vector<std::size_t> parse_widths(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(parse_number<std::size_t>(key, item));
  return out;
}

OptimizerKind parse_optimizer(std::string_view key, std::string_view v) {
  if (v == "adam") return OptimizerKind::adam;
  if (v == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("config key '" + std::string(key) + "': optimizer must be adam or sgd");
}

bool set_train_key(TrainConfig& t, std::string_view field, std::string_view key, std::string_view v) {
  if (field == "epochs") t.epochs = parse_number<std::size_t>(key, v);
  else if (field == "batch_size") t.batch_size = parse_number<std::size_t>(key, v);
  else if (field == "learning_rate") t.learning_rate = parse_number<float>(key, v);
  else if (field == "optimizer") t.optimizer = parse_optimizer(key, v);
  else if (field == "beta1") t.beta1 = parse_number<float>(key, v);
  else if (field == "beta2") t.beta2 = parse_number<float>(key, v);
  else if (field == "epsilon") t.epsilon = parse_number<float>(key, v);
  else return false;
  return true;
}

std::string join_widths(const std::vector<std::size_t>& w) {
  return fmt::format("{}", fmt::join(w, ","));
}

}  // namespace

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value,
                      const std::filesystem::path& base_dir) {
  const std::string_view v = trim(value);
  if (key == "data.source") {
    if (v != "synthetic" && v != "csv") throw std::invalid_argument("data.source must be synthetic or csv");
    cfg.source = std::string(v);
  } else if (key == "data.schema") {
    DatasetSchema::preset(std::string(v));
    cfg.schema = std::string(v);
  } else if (key == "data.csv") {
    cfg.csv.clear();
    for (const auto& item : split_list(v)) {
      // path[@class]
      const auto at = item.rfind('@');
      CsvSource src;
      std::filesystem::path p = at == std::string::npos ? item : item.substr(0, at);
      if (at != std::string::npos) src.label = item.substr(at + 1);
      src.path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
      cfg.csv.push_back(std::move(src));
    }
  } else if (key == "data.binary") {
    cfg.binary = parse_bool(key, v);
  } else if (key == "synthetic.per_class") {
    cfg.synthetic_per_class = parse_number<std::size_t>(key, v);
  } else if (key == "synthetic.features") {
    cfg.synthetic_features = parse_number<std::size_t>(key, v);
  } else if (key == "synthetic.classes") {
    cfg.synthetic_classes = parse_number<std::size_t>(key, v);
  } else if (key == "synthetic.spread") {
    cfg.synthetic_spread = parse_number<double>(key, v);
  } else if (key == "split.test_fraction") {
    cfg.test_fraction = parse_number<double>(key, v);
  } else if (key == "seed") {
    cfg.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "vae.hidden") {
    cfg.vae_arch.hidden = parse_widths(key, v);
  } else if (key == "vae.latent_dim") {
    cfg.vae_arch.latent_dim = parse_number<std::size_t>(key, v);
  } else if (key == "vae.beta") {
    cfg.vae_beta = parse_number<float>(key, v);
  } else if (key.starts_with("vae.") && set_train_key(cfg.vae_train, key.substr(4), key, v)) {
  } else if (key == "mlp.hidden") {
    cfg.mlp_hidden = parse_widths(key, v);
  } else if (key == "mlp.class_weighting") {
    cfg.mlp_train.class_weighting = parse_bool(key, v);
  } else if (key == "mlp.sampled_latent") {
    cfg.mlp_sampled_latent = parse_bool(key, v);
  } else if (key.starts_with("mlp.") && set_train_key(cfg.mlp_train, key.substr(4), key, v)) {
  } else if (key == "variants") {
    cfg.variants.clear();
    for (const auto& item : split_list(v)) {
      const Variant var = variant_from_name(item);
      if (std::find(cfg.variants.begin(), cfg.variants.end(), var) == cfg.variants.end())
        cfg.variants.push_back(var);
    }
  } else if (key == "calib.samples") {
    cfg.calib_samples = parse_number<std::size_t>(key, v);
  } else if (key == "quant.round_mode") {
    if (v == "nearest") cfg.round_mode = RoundMode::nearest;
    else if (v == "floor") cfg.round_mode = RoundMode::floor;
    else throw std::invalid_argument("quant.round_mode must be nearest or floor");
  } else if (key == "quant.requant") {
    if (v == "float") cfg.requant = RequantMode::float_multiplier;
    else if (v == "fixed") cfg.requant = RequantMode::fixed_point;
    else throw std::invalid_argument("quant.requant must be float or fixed");
  } else if (key == "qat.warm_start") {
    cfg.qat_warm_start = parse_bool(key, v);
  } else if (key == "qat.ema_decay") {
    cfg.qat_ema_decay = parse_number<float>(key, v);
  } else if (key == "output_dir") {
    // Relative to the working directory, unlike data paths.
    cfg.output_dir = std::filesystem::path{std::string(v)};
  } else if (key == "bench.iters") {
    cfg.bench_iters = parse_number<std::size_t>(key, v);
  } else if (key == "bench.warmup") {
    cfg.bench_warmup = parse_number<std::size_t>(key, v);
  } else if (key == "bench.probe_rows") {
    cfg.bench_probe_rows = parse_number<std::size_t>(key, v);
  } else {
    throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
  }
}

ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1), base_dir);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

void ExperimentConfig::validate() const {
  if (variants.empty()) throw std::invalid_argument("at least one variant must be selected");
  if (source == "csv" && csv.empty()) throw std::invalid_argument("data.source = csv needs data.csv");
  if (source == "synthetic" &&
      (synthetic_per_class < 2 || synthetic_features < 1 || synthetic_classes < 2))
    throw std::invalid_argument("synthetic data needs per_class >= 2, features >= 1, classes >= 2");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw std::invalid_argument("split.test_fraction must lie strictly between 0 and 1");
  if (vae_arch.latent_dim < 1) throw std::invalid_argument("vae.latent_dim must be >= 1");
  vae_train.validate();
  mlp_train.validate();
  if (!(vae_train.learning_rate > 0.0f) || !(mlp_train.learning_rate > 0.0f))
    throw std::invalid_argument("learning rates must be > 0");
  if (calib_samples < 1) throw std::invalid_argument("calib.samples must be >= 1");
  if (!(qat_ema_decay >= 0.0f && qat_ema_decay < 1.0f))
    throw std::invalid_argument("qat.ema_decay must lie in [0, 1)");
  if (bench_iters < 30) throw std::invalid_argument("bench.iters must be >= 30");
  if (bench_probe_rows < 1) throw std::invalid_argument("bench.probe_rows must be >= 1");
  if (output_dir.empty()) throw std::invalid_argument("output_dir must not be empty");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> e;
  auto add = [&](std::string k, std::string v) { e.emplace_back(std::move(k), std::move(v)); };
  auto train = [&](const std::string& p, const TrainConfig& t) {
    add(p + ".epochs", std::to_string(t.epochs));
    add(p + ".batch_size", std::to_string(t.batch_size));
    add(p + ".learning_rate", fmt::format("{}", t.learning_rate));
    add(p + ".optimizer", t.optimizer == OptimizerKind::adam ? "adam" : "sgd");
    add(p + ".beta1", fmt::format("{}", t.beta1));
    add(p + ".beta2", fmt::format("{}", t.beta2));
    add(p + ".epsilon", fmt::format("{}", t.epsilon));
  };
  add("data.source", source);
  add("data.schema", schema);
  if (!csv.empty()) {
    std::vector<std::string> items;
    for (const auto& c : csv) items.push_back(c.path.string() + (c.label ? "@" + *c.label : ""));
    add("data.csv", fmt::format("{}", fmt::join(items, ",")));
  }
  add("data.binary", binary ? "true" : "false");
  if (source == "synthetic") {
    add("synthetic.per_class", std::to_string(synthetic_per_class));
    add("synthetic.features", std::to_string(synthetic_features));
    add("synthetic.classes", std::to_string(synthetic_classes));
    add("synthetic.spread", fmt::format("{}", synthetic_spread));
  }
  add("split.test_fraction", fmt::format("{}", test_fraction));
  add("seed", std::to_string(seed));
  add("vae.hidden", join_widths(vae_arch.hidden));
  add("vae.latent_dim", std::to_string(vae_arch.latent_dim));
  add("vae.beta", fmt::format("{}", vae_beta));
  train("vae", vae_train);
  add("mlp.hidden", join_widths(mlp_hidden));
  train("mlp", mlp_train);
  add("mlp.class_weighting", mlp_train.class_weighting ? "true" : "false");
  add("mlp.sampled_latent", mlp_sampled_latent ? "true" : "false");
  std::vector<std::string> vs;
  for (auto v : variants) vs.emplace_back(variant_name(v));
  add("variants", fmt::format("{}", fmt::join(vs, ",")));
  add("calib.samples", std::to_string(calib_samples));
  add("quant.round_mode", round_mode == RoundMode::nearest ? "nearest" : "floor");
  add("quant.requant", requant == RequantMode::float_multiplier ? "float" : "fixed");
  add("qat.warm_start", qat_warm_start ? "true" : "false");
  add("qat.ema_decay", fmt::format("{}", qat_ema_decay));
  add("output_dir", output_dir.string());
  add("bench.iters", std::to_string(bench_iters));
  add("bench.warmup", std::to_string(bench_warmup));
  add("bench.probe_rows", std::to_string(bench_probe_rows));
  return e;
}

// ---------------------------------------------------------------------------
// Stages

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData out;
  LabeledDataset all;
  if (cfg.source == "synthetic") {
    all = gen_synthetic(cfg.synthetic_per_class, cfg.synthetic_features, cfg.synthetic_classes,
                        cfg.synthetic_spread, derive_seed(cfg.seed, "synthetic"));
    out.load.rows_read = all.size();
    for (std::size_t c = 0; c < all.n_classes(); ++c)
      out.load.class_histogram[all.schema.class_names[c]] = all.class_counts()[c];
  } else {
    all = load_csvs(cfg.csv, DatasetSchema::preset(cfg.schema), &out.load);
  }
  if (cfg.binary) all = to_binary(all);
  auto [train, test] = split(all, cfg.test_fraction, derive_seed(cfg.seed, "split"));
  out.norm = fit_normalizer(train);
  out.train = apply_normalizer(train, out.norm);
  out.test = apply_normalizer(test, out.norm);
  return out;
}

Matrix classifier_inputs(const VaeModel& vae, const Matrix& x, bool sampled, std::uint64_t seed,
                         TensorHook* hook) {
  if (!sampled) return project(vae, x, hook);
  const auto enc = encode(vae, x, hook);
  Rng rng(derive_seed(seed, "mlp.latent_noise"));
  return reparameterize(enc.mu, enc.logvar, rng_normal(rng, enc.mu.rows(), enc.mu.cols()));
}

namespace {

VaeTrainConfig vae_config(const ExperimentConfig& cfg, std::size_t input_dim) {
  VaeTrainConfig vc;
  vc.train = cfg.vae_train;
  vc.train.seed = derive_seed(cfg.seed, "vae");
  vc.arch = cfg.vae_arch;
  vc.arch.input_dim = input_dim;
  vc.beta = cfg.vae_beta;
  return vc;
}

TrainConfig mlp_config(const ExperimentConfig& cfg) {
  TrainConfig tc = cfg.mlp_train;
  tc.seed = derive_seed(cfg.seed, "mlp");
  return tc;
}

MlpModel initial_mlp(const ExperimentConfig& cfg, std::size_t n_classes) {
  Rng rng(derive_seed(cfg.seed, "mlp.init"));
  return make_mlp(cfg.vae_arch.latent_dim, cfg.mlp_hidden, n_classes, rng);
}

void note(const Logger& log, std::string_view msg) {
  if (log) log(msg);
}

}  // namespace

Fp32Models train_fp32(const ExperimentConfig& cfg, const LabeledDataset& train, const Logger& log) {
  Fp32Models m;
  note(log, "training FP32 VAE");
  auto vae = train_vae(train.features, vae_config(cfg, train.features.cols()));
  m.vae = std::move(vae.model);
  m.vae_loss = std::move(vae.loss_history);
  note(log, "training FP32 classifier on latent vectors");
  const Matrix latent = classifier_inputs(m.vae, train.features, cfg.mlp_sampled_latent, cfg.seed);
  auto mlp = qvae::train(initial_mlp(cfg, train.n_classes()), latent, train.labels, mlp_config(cfg));
  m.mlp = std::move(mlp.model);
  m.mlp_loss = std::move(mlp.loss_history);
  return m;
}

QatModels train_qat(const ExperimentConfig& cfg, const LabeledDataset& train, const Fp32Models* warm_start,
                    const Logger& log) {
  QatOptions opts;
  opts.ema_decay = cfg.qat_ema_decay;
  opts.round_mode = cfg.round_mode;
  QatHooks hooks = qat_hooks(cfg.vae_arch, opts);

  QatModels m;
  note(log, "training QAT VAE");
  auto vae = train_vae(train.features, vae_config(cfg, train.features.cols()), &hooks.vae,
                       warm_start ? &warm_start->vae : nullptr);
  hooks.vae.freeze();
  m.vae = std::move(vae.model);
  m.vae_loss = std::move(vae.loss_history);

  note(log, "training QAT classifier on fake-quantized latent vectors");
  const Matrix latent = classifier_inputs(m.vae, train.features, cfg.mlp_sampled_latent, cfg.seed, &hooks.vae);
  MlpModel init = warm_start ? warm_start->mlp : initial_mlp(cfg, train.n_classes());
  auto mlp = qvae::train(std::move(init), latent, train.labels, mlp_config(cfg), &hooks.mlp);
  hooks.mlp.freeze();
  m.mlp = std::move(mlp.model);
  m.mlp_loss = std::move(mlp.loss_history);
  m.bundle = qat_convert(m.vae, hooks.vae, m.mlp, hooks.mlp);
  return m;
}

Matrix calibration_rows(const ExperimentConfig& cfg, const LabeledDataset& train) {
  Rng rng(derive_seed(cfg.seed, "calib"));
  std::vector<std::size_t> idx = permutation(rng, train.size());
  idx.resize(std::min(idx.size(), cfg.calib_samples));
  std::sort(idx.begin(), idx.end());
  return gather_rows(train.features, std::span<const std::size_t>(idx));
}

const VariantResult* ExperimentReport::find(Variant v) const noexcept {
  for (const auto& r : variants)
    if (r.variant == v) return &r;
  return nullptr;
}

VariantResult evaluate_artifact(Variant variant, const ModelArtifact& model, const LabeledDataset& test,
                                RequantMode requant, std::size_t probe_rows) {
  VariantResult r;
  r.variant = variant;
  std::vector<int> preds;
  if (const auto* fb = std::get_if<FloatBundle>(&model)) preds = predict(*fb, test.features);
  else if (const auto* qb = std::get_if<QuantizedBundle>(&model)) preds = predict(*qb, test.features, requant);
  else throw std::invalid_argument("only bundle artifacts can be evaluated");

  const std::size_t n_classes = std::max<std::size_t>(test.n_classes(), 2);
  r.confusion = ConfusionMatrix::from_predictions(test.labels, preds, n_classes);
  r.metrics = compute_metrics(r.confusion, n_classes == 2 ? Averaging::binary : Averaging::macro);

  auto engine = make_engine(model, requant);
  const std::size_t n_probe = std::min(probe_rows, test.size());
  r.engine_matches_batch = true;
  for (std::size_t i = 0; i < n_probe; ++i)
    if (engine->predict(test.features.row(i)) != preds[i]) r.engine_matches_batch = false;
  return r;
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Files written by one experiment run; removed again unless the run commits.
class ArtifactGuard {
 public:
  explicit ArtifactGuard(std::filesystem::path dir) : dir_(std::move(dir)) {
    created_dir_ = !std::filesystem::exists(dir_);
    std::filesystem::create_directories(dir_);
  }
  ~ArtifactGuard() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : files_) {
      // Only files this run wrote; a directory in the way is the user's.
      if (!std::filesystem::is_directory(p, ec)) std::filesystem::remove(p, ec);
      auto tmp = p;
      tmp += ".tmp";
      std::filesystem::remove(tmp, ec);
    }
    if (created_dir_ && std::filesystem::is_empty(dir_, ec)) std::filesystem::remove(dir_, ec);
  }
  std::filesystem::path track(const std::string& name) {
    files_.push_back(dir_ / name);
    return files_.back();
  }
  void commit() noexcept { committed_ = true; }

 private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> files_;
  bool created_dir_ = false;
  bool committed_ = false;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  std::string stage = "setup";
  auto enter = [&](std::string name) {
    stage = std::move(name);
    note(log, "stage: " + stage);
  };

  try {
    ArtifactGuard guard(cfg.output_dir);
    ExperimentReport report;
    report.config = cfg.entries();
    report.environment = environment_fingerprint();

    enter("data");
    PreparedData data = prepare_data(cfg);
    report.load = data.load;
    report.train_rows = data.train.size();
    report.test_rows = data.test.size();
    report.n_classes = data.train.n_classes();
    report.class_names = data.train.schema.class_names;
    save_normalizer(data.norm, guard.track("normalizer.txt"));

    const Matrix probe = gather_rows(
        data.test.features, std::span<const std::size_t>([&] {
          std::vector<std::size_t> idx(std::min(cfg.bench_probe_rows, data.test.size()));
          std::iota(idx.begin(), idx.end(), std::size_t{0});
          return idx;
        }()));
    BenchOptions bench;
    bench.iters = cfg.bench_iters;
    bench.warmup_passes = cfg.bench_warmup;
    bench.requant = cfg.requant;

    auto finish_variant = [&](Variant v, const ModelArtifact& model, const std::string& file,
                              std::uint64_t source_hash, double build_s) {
      enter(std::string("evaluate-") + std::string(variant_name(v)));
      const auto path = guard.track(file);
      save(model, path);
      const ModelArtifact loaded = load(path);
      VariantResult r = evaluate_artifact(v, loaded, data.test, cfg.requant, cfg.bench_probe_rows);
      r.artifact = path;
      r.artifact_bytes = artifact_size(path);
      r.stats = artifact_stats(loaded);
      r.source_weight_hash = source_hash;
      r.build_seconds = build_s;
      enter(std::string("bench-") + std::string(variant_name(v)));
      r.bench = bench_latency(loaded, probe, bench);
      r.bench.artifact_bytes = r.artifact_bytes;
      return r;
    };

    auto selected = [&](Variant v) {
      return std::find(cfg.variants.begin(), cfg.variants.end(), v) != cfg.variants.end();
    };
    const bool need_fp32 = selected(Variant::unquantized) || selected(Variant::ptq) || cfg.qat_warm_start;
    std::optional<Fp32Models> fp32;
    double fp32_seconds = 0.0;
    if (need_fp32) {
      enter("train-fp32");
      const auto t0 = Clock::now();
      fp32 = train_fp32(cfg, data.train, log);
      fp32_seconds = since(t0);
      report.vae_loss = fp32->vae_loss;
      report.mlp_loss = fp32->mlp_loss;
      save(fp32->vae, guard.track("vae_fp32.qnm"));
      save(fp32->mlp, guard.track("mlp_fp32.qnm"));
    }

    for (Variant v : {Variant::unquantized, Variant::qat, Variant::ptq}) {
      if (!selected(v)) continue;
      if (v == Variant::unquantized) {
        const FloatBundle fb = make_float_bundle(fp32->vae, fp32->mlp);
        report.variants.push_back(finish_variant(v, fb, "fp32_bundle.qnm", weight_hash(fb), fp32_seconds));
      } else if (v == Variant::ptq) {
        enter("ptq");
        const auto t0 = Clock::now();
        const FloatBundle fb = make_float_bundle(fp32->vae, fp32->mlp);
        const QuantizedBundle qb = ptq_convert(fb, calibration_rows(cfg, data.train), cfg.round_mode);
        report.variants.push_back(finish_variant(v, qb, "ptq_int8.qnm", weight_hash(fb), since(t0)));
      } else {
        enter("qat");
        const auto t0 = Clock::now();
        QatModels qat = train_qat(cfg, data.train, cfg.qat_warm_start ? &*fp32 : nullptr, log);
        report.qat_vae_loss = qat.vae_loss;
        report.qat_mlp_loss = qat.mlp_loss;
        const double secs = since(t0);
        report.variants.push_back(finish_variant(v, qat.bundle, "qat_int8.qnm",
                                                 weight_hash(make_float_bundle(qat.vae, qat.mlp)), secs));
      }
    }

    enter("report");
    write_text(guard.track("report.txt"), format_tables(report));
    write_text(guard.track("report.jsonl"), format_jsonl(report));
    guard.commit();
    return report;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string display_name(Variant v) {
  switch (v) {
    case Variant::unquantized: return "Unquantized";
    case Variant::qat: return "QAT";
    case Variant::ptq: return "PTQ";
  }
  return "?";
}

std::vector<const VariantResult*> table_order(const ExperimentReport& r) {
  std::vector<const VariantResult*> out;
  for (Variant v : {Variant::unquantized, Variant::qat, Variant::ptq})
    if (const auto* x = r.find(v)) out.push_back(x);
  return out;
}

}  // namespace

std::string format_tables(const ExperimentReport& report) {
  const auto rows = table_order(report);
  const VariantResult* base = report.find(Variant::unquantized);
  std::string out;
  auto line = [&](std::string s) { out += s + '\n'; };

  line(fmt::format("Dataset: {} train / {} test rows, {} classes", report.train_rows, report.test_rows,
                   report.n_classes));
  line("");
  line("Detection performance");
  line(fmt::format("{:<12} {:>9} {:>10} {:>9} {:>9}", "Model", "Accuracy", "Precision", "Recall", "F1-score"));
  for (const auto* r : rows)
    line(fmt::format("{:<12} {:>9.4f} {:>10.4f} {:>9.4f} {:>9.4f}{}", display_name(r->variant),
                     r->metrics.accuracy, r->metrics.precision, r->metrics.recall, r->metrics.f1,
                     r->metrics.zero_division ? "  (zero division)" : ""));
  line("");
  line("Storage");
  line(fmt::format("{:<12} {:>11} {:>10} {:>14} {:>14} {:>12}", "Model", "File bytes", "Size (MB)",
                   "Weight bytes", "Weight ratio", "File ratio"));
  for (const auto* r : rows) {
    const double wr = base ? static_cast<double>(base->stats.weight_bytes) / static_cast<double>(r->stats.weight_bytes) : 0.0;
    const double fr = base ? static_cast<double>(base->artifact_bytes) / static_cast<double>(r->artifact_bytes) : 0.0;
    line(fmt::format("{:<12} {:>11} {:>10.6f} {:>14} {:>13.2f}x {:>11.2f}x", display_name(r->variant),
                     r->artifact_bytes, static_cast<double>(r->artifact_bytes) / 1e6, r->stats.weight_bytes,
                     wr, fr));
  }
  line("");
  line("Detection latency (seconds per instance)");
  line(fmt::format("{:<12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9}", "Model", "Mean", "p50", "p95",
                   "Encoder", "Classifier", "Speedup"));
  for (const auto* r : rows) {
    const double speedup = base && r->bench.total.mean_s > 0 ? base->bench.total.mean_s / r->bench.total.mean_s : 0.0;
    line(fmt::format("{:<12} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>8.2f}x", display_name(r->variant),
                     r->bench.total.mean_s, r->bench.total.p50_s, r->bench.total.p95_s, r->bench.encoder.mean_s,
                     r->bench.classifier.mean_s, speedup));
  }
  return out;
}

std::string format_jsonl(const ExperimentReport& report) {
  using nlohmann::json;
  std::string out;
  json cfg = json::object();
  for (const auto& [k, v] : report.config) cfg[k] = v;
  out += json{{"type", "config"}, {"config", cfg}}.dump() + '\n';

  const auto& env = report.environment;
  out += json{{"type", "environment"},
              {"hardware_threads", env.hardware_threads},
              {"benchmark_threads", env.benchmark_threads},
              {"clock_resolution_s", env.clock_resolution_s},
              {"compiler", env.compiler},
              {"build_type", env.build_type}}
             .dump() +
         '\n';

  json load{{"type", "dataset"},
            {"train_rows", report.train_rows},
            {"test_rows", report.test_rows},
            {"n_classes", report.n_classes},
            {"class_names", report.class_names},
            {"rows_read", report.load.rows_read},
            {"rows_dropped", report.load.rows_dropped}};
  out += load.dump() + '\n';

  const VariantResult* base = report.find(Variant::unquantized);
  for (const auto* r : table_order(report)) {
    json counts = json::array();
    for (std::size_t t = 0; t < r->confusion.n_classes(); ++t) {
      json row = json::array();
      for (std::size_t p = 0; p < r->confusion.n_classes(); ++p) row.push_back(r->confusion.at(t, p));
      counts.push_back(row);
    }
    json j{{"type", "variant"},
           {"variant", variant_name(r->variant)},
           {"accuracy", r->metrics.accuracy},
           {"precision", r->metrics.precision},
           {"recall", r->metrics.recall},
           {"f1", r->metrics.f1},
           {"averaging", r->metrics.averaging == Averaging::binary ? "binary" : "macro"},
           {"zero_division", r->metrics.zero_division},
           {"confusion", counts},
           {"artifact", r->artifact.string()},
           {"artifact_bytes", r->artifact_bytes},
           {"size_mb", static_cast<double>(r->artifact_bytes) / 1e6},
           {"weight_bytes", r->stats.weight_bytes},
           {"bias_bytes", r->stats.bias_bytes},
           {"qparam_bytes", r->stats.qparam_bytes},
           {"header_bytes", r->stats.header_bytes},
           {"latency_mean_s", r->bench.total.mean_s},
           {"latency_p50_s", r->bench.total.p50_s},
           {"latency_p95_s", r->bench.total.p95_s},
           {"encoder_mean_s", r->bench.encoder.mean_s},
           {"classifier_mean_s", r->bench.classifier.mean_s},
           {"warmup_iters", r->bench.warmup_iters},
           {"measured_iters", r->bench.measured_iters},
           {"probe_rows", r->bench.probe_rows},
           {"pinned", r->bench.pinned},
           {"engine_matches_batch", r->engine_matches_batch},
           {"source_weight_hash", fmt::format("{:016x}", r->source_weight_hash)},
           {"build_seconds", r->build_seconds}};
    if (base) {
      j["weight_ratio_vs_fp32"] = static_cast<double>(r->stats.weight_bytes) / static_cast<double>(base->stats.weight_bytes);
      j["file_ratio_vs_fp32"] = static_cast<double>(r->artifact_bytes) / static_cast<double>(base->artifact_bytes);
      j["speedup_vs_fp32"] = r->bench.total.mean_s > 0 ? base->bench.total.mean_s / r->bench.total.mean_s : 0.0;
    }
    out += j.dump() + '\n';
  }
  out += json{{"type", "losses"},
              {"vae", report.vae_loss},
              {"mlp", report.mlp_loss},
              {"qat_vae", report.qat_vae_loss},
              {"qat_mlp", report.qat_mlp_loss}}
             .dump() +
         '\n';
  return out;
}

}  // namespace qvae
