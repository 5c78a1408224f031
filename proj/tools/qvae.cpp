// qvae command-line front end: every experiment stage as a subcommand that
// communicates through files (CSV data, QNM1 artifacts, normalizer, reports).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "qvae/pipeline.hpp"

namespace fs = std::filesystem;
using namespace qvae;

namespace {

void log_line(std::string_view msg) { fmt::print(stderr, "[qvae] {}\n", msg); }

ExperimentConfig config_with_overrides(const std::string& path, const std::vector<std::string>& sets,
                                       const std::string& output_dir) {
  ExperimentConfig cfg = load_config(path);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1), fs::path(path).parent_path());
  }
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  cfg.validate();
  return cfg;
}

fs::path normalizer_for(const fs::path& model, const std::string& flag) {
  if (!flag.empty()) return flag;
  return model.parent_path() / "normalizer.txt";
}

LabeledDataset load_eval_data(const std::string& data, const std::string& schema, bool multiclass,
                              const fs::path& normalizer) {
  LoadReport report;
  LabeledDataset ds = load_csv(data, DatasetSchema::preset(schema), &report);
  log_line("loaded " + data + ": " + report.to_string());
  if (!multiclass) ds = to_binary(ds);
  if (!fs::exists(normalizer))
    throw std::runtime_error("normalizer '" + normalizer.string() +
                             "' not found (pass --normalizer or keep normalizer.txt next to the model)");
  return apply_normalizer(ds, load_normalizer(normalizer));
}

RequantMode parse_requant(const std::string& s) {
  return s == "fixed" ? RequantMode::fixed_point : RequantMode::float_multiplier;
}

void print_metrics_row(const std::string& name, const MetricsReport& m) {
  fmt::print("{:<12} {:>9} {:>10} {:>9} {:>9}\n", "Model", "Accuracy", "Precision", "Recall", "F1-score");
  fmt::print("{:<12} {:>9.4f} {:>10.4f} {:>9.4f} {:>9.4f}\n", name, m.accuracy, m.precision, m.recall, m.f1);
}

std::string artifact_label(const ModelArtifact& m) {
  return flavor_of(m) == Flavor::int8 ? "INT8" : "FP32";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VAE-MLP botnet traffic classifier: FP32 vs QAT/PTQ INT8 comparison"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic labeled CSV (Gaussian clusters at hypercube corners)");
  std::size_t g_classes = 2, g_features = 115, g_per_class = 1000;
  double g_spread = 0.25;
  std::uint64_t g_seed = 1;
  std::string g_out;
  gen->add_option("--classes", g_classes, "Number of classes")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20));
  gen->add_option("--features", g_features, "Features per row")->check(CLI::PositiveNumber);
  gen->add_option("--per-class", g_per_class, "Rows per class")->check(CLI::PositiveNumber);
  gen->add_option("--spread", g_spread, "Cluster standard deviation before the sigmoid squash")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", g_seed, "Generator seed");
  gen->add_option("--out", g_out, "Output CSV path")->required();

  // train
  auto* tr = app.add_subcommand("train", "Phase one: train the FP32 VAE and classifier");
  std::string t_config, t_outdir;
  std::vector<std::string> t_sets;
  tr->add_option("--config", t_config, "Experiment config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--set", t_sets, "Override a config key (key=value), repeatable");
  tr->add_option("--output-dir", t_outdir, "Override output_dir");

  // quantize
  auto* qz = app.add_subcommand("quantize", "Phase two: PTQ-convert the trained model or retrain with QAT");
  std::string q_method, q_config, q_outdir;
  std::vector<std::string> q_sets;
  qz->add_option("--method", q_method, "ptq or qat")->required()->check(CLI::IsMember({"ptq", "qat"}));
  qz->add_option("--config", q_config, "Experiment config file")->required()->check(CLI::ExistingFile);
  qz->add_option("--set", q_sets, "Override a config key (key=value), repeatable");
  qz->add_option("--output-dir", q_outdir, "Override output_dir");

  // eval
  auto* ev = app.add_subcommand("eval", "Detection metrics of a bundle artifact on a labeled CSV");
  std::string e_model, e_data, e_schema = "custom", e_norm, e_requant = "float";
  bool e_multiclass = false, e_json = false;
  ev->add_option("--model", e_model, "QNM1 bundle artifact")->required();
  ev->add_option("--data", e_data, "Labeled CSV")->required();
  ev->add_option("--schema", e_schema, "Dataset schema")->check(CLI::IsMember({"nbaiot", "ciciot2022", "custom"}));
  ev->add_option("--normalizer", e_norm, "Normalizer file (default: normalizer.txt next to the model)");
  ev->add_option("--requant", e_requant, "INT8 requantization: float or fixed")->check(CLI::IsMember({"float", "fixed"}));
  ev->add_flag("--multiclass", e_multiclass, "Keep every class instead of benign/attack");
  ev->add_flag("--json", e_json, "Print one JSON record instead of a table");

  // bench
  auto* bn = app.add_subcommand("bench", "Per-instance inference latency of a bundle artifact");
  std::string b_model, b_data, b_schema = "custom", b_norm, b_requant = "float";
  std::size_t b_warmup = 1, b_iters = 30, b_rows = 256;
  bool b_multiclass = false;
  bn->add_option("--model", b_model, "QNM1 bundle artifact")->required();
  bn->add_option("--data", b_data, "CSV providing probe rows")->required();
  bn->add_option("--schema", b_schema, "Dataset schema")->check(CLI::IsMember({"nbaiot", "ciciot2022", "custom"}));
  bn->add_option("--normalizer", b_norm, "Normalizer file (default: normalizer.txt next to the model)");
  bn->add_option("--warmup", b_warmup, "Warm-up passes over the probe rows");
  bn->add_option("--iters", b_iters, "Measured passes over the probe rows (>= 30)")->check(CLI::Range(std::size_t{30}, std::size_t{1} << 30));
  bn->add_option("--rows", b_rows, "Probe rows taken from the start of the CSV")->check(CLI::PositiveNumber);
  bn->add_option("--requant", b_requant, "INT8 requantization: float or fixed")->check(CLI::IsMember({"float", "fixed"}));
  bn->add_flag("--multiclass", b_multiclass, "Keep every class instead of benign/attack");

  // experiment
  auto* ex = app.add_subcommand("experiment", "Full unquantized / QAT / PTQ comparison: detection, storage and latency tables");
  std::string x_config, x_outdir;
  std::vector<std::string> x_sets;
  ex->add_option("--config", x_config, "Experiment config file")->required()->check(CLI::ExistingFile);
  ex->add_option("--set", x_sets, "Override a config key (key=value), repeatable");
  ex->add_option("--output-dir", x_outdir, "Override output_dir");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const LabeledDataset ds = gen_synthetic(g_per_class, g_features, g_classes, g_spread, g_seed);
      write_csv(ds, g_out);
      fmt::print("wrote {} rows x {} features ({} classes) to {}\n", ds.size(), ds.features.cols(),
                 ds.n_classes(), g_out);
    } else if (*tr) {
      const ExperimentConfig cfg = config_with_overrides(t_config, t_sets, t_outdir);
      fs::create_directories(cfg.output_dir);
      const PreparedData data = prepare_data(cfg);
      log_line(fmt::format("{} train / {} test rows", data.train.size(), data.test.size()));
      const Fp32Models m = train_fp32(cfg, data.train, log_line);
      save_normalizer(data.norm, cfg.output_dir / "normalizer.txt");
      save(m.vae, cfg.output_dir / "vae_fp32.qnm");
      save(m.mlp, cfg.output_dir / "mlp_fp32.qnm");
      const FloatBundle fb = make_float_bundle(m.vae, m.mlp);
      const auto bytes = save(fb, cfg.output_dir / "fp32_bundle.qnm");
      const auto r = evaluate_artifact(Variant::unquantized, fb, data.test, cfg.requant, 0);
      fmt::print("final VAE loss {:.4f}, classifier loss {:.4f}\n", m.vae_loss.back(), m.mlp_loss.back());
      print_metrics_row("Unquantized", r.metrics);
      fmt::print("wrote {} ({} bytes)\n", (cfg.output_dir / "fp32_bundle.qnm").string(), bytes);
    } else if (*qz) {
      const ExperimentConfig cfg = config_with_overrides(q_config, q_sets, q_outdir);
      fs::create_directories(cfg.output_dir);
      const PreparedData data = prepare_data(cfg);
      fs::path out;
      ModelArtifact model;
      if (q_method == "ptq") {
        const fs::path src = cfg.output_dir / "fp32_bundle.qnm";
        if (!fs::exists(src))
          throw std::runtime_error("'" + src.string() + "' not found; run `qvae train` with this config first");
        const ModelArtifact loaded = load(src);
        const auto* fb = std::get_if<FloatBundle>(&loaded);
        if (!fb) throw std::runtime_error("'" + src.string() + "' is not an FP32 bundle");
        model = ptq_convert(*fb, calibration_rows(cfg, data.train), cfg.round_mode);
        out = cfg.output_dir / "ptq_int8.qnm";
      } else {
        std::optional<Fp32Models> warm;
        if (cfg.qat_warm_start) {
          Fp32Models w;
          w.vae = std::get<VaeModel>(load(cfg.output_dir / "vae_fp32.qnm"));
          w.mlp = std::get<MlpModel>(load(cfg.output_dir / "mlp_fp32.qnm"));
          warm = std::move(w);
        }
        model = train_qat(cfg, data.train, warm ? &*warm : nullptr, log_line).bundle;
        out = cfg.output_dir / "qat_int8.qnm";
      }
      const auto bytes = save(model, out);
      if (!fs::exists(cfg.output_dir / "normalizer.txt")) save_normalizer(data.norm, cfg.output_dir / "normalizer.txt");
      const auto r = evaluate_artifact(q_method == "ptq" ? Variant::ptq : Variant::qat, model, data.test,
                                       cfg.requant, 0);
      print_metrics_row(q_method == "ptq" ? "PTQ" : "QAT", r.metrics);
      fmt::print("wrote {} ({} bytes)\n", out.string(), bytes);
    } else if (*ev) {
      const ModelArtifact model = load(e_model);
      const LabeledDataset ds = load_eval_data(e_data, e_schema, e_multiclass, normalizer_for(e_model, e_norm));
      const auto r = evaluate_artifact(flavor_of(model) == Flavor::int8 ? Variant::ptq : Variant::unquantized,
                                       model, ds, parse_requant(e_requant), 0);
      if (e_json) {
        std::cout << nlohmann::json{{"model", e_model},
                                    {"flavor", artifact_label(model)},
                                    {"rows", ds.size()},
                                    {"accuracy", r.metrics.accuracy},
                                    {"precision", r.metrics.precision},
                                    {"recall", r.metrics.recall},
                                    {"f1", r.metrics.f1},
                                    {"zero_division", r.metrics.zero_division}}
                         .dump()
                  << '\n';
      } else {
        print_metrics_row(artifact_label(model), r.metrics);
      }
    } else if (*bn) {
      const LabeledDataset ds = load_eval_data(b_data, b_schema, b_multiclass, normalizer_for(b_model, b_norm));
      std::vector<std::size_t> rows(std::min(b_rows, ds.size()));
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
      const Matrix probe = gather_rows(ds.features, std::span<const std::size_t>(rows));
      BenchOptions opts;
      opts.warmup_passes = b_warmup;
      opts.iters = b_iters;
      opts.requant = parse_requant(b_requant);
      const BenchReport r = bench_latency(fs::path(b_model), probe, opts);
      fmt::print("{:<8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10}\n", "Model", "Mean (s)", "p50 (s)", "p95 (s)",
                 "Encoder", "Classifier", "Bytes");
      fmt::print("{:<8} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>10}\n",
                 artifact_label(load(b_model)), r.total.mean_s, r.total.p50_s, r.total.p95_s, r.encoder.mean_s,
                 r.classifier.mean_s, r.artifact_bytes);
      fmt::print("{} probe rows, {} warm-up + {} measured passes, pinned: {}\n", r.probe_rows, r.warmup_iters,
                 r.measured_iters, r.pinned ? "yes" : "no");
    } else if (*ex) {
      const ExperimentConfig cfg = config_with_overrides(x_config, x_sets, x_outdir);
      const ExperimentReport report = run_experiment(cfg, log_line);
      std::cout << format_tables(report);
      fmt::print("\nreports written to {}\n", cfg.output_dir.string());
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "qvae: error: {}\n", e.what());
    return 1;
  }
  return 0;
}
