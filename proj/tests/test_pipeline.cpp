#include <fstream>

#include <gtest/gtest.h>

#include "qvae/pipeline.hpp"
#include "test_util.hpp"

using namespace qvae;
using qvae::testing::TempDir;

namespace {

ExperimentConfig small_config(const std::filesystem::path& out, std::uint64_t seed = 1) {
  ExperimentConfig cfg = parse_config(R"(
    # two-class synthetic set, kept small for CI
    synthetic.per_class = 1500
    synthetic.features = 115
    vae.epochs = 15
    mlp.epochs = 15
    calib.samples = 256
    bench.iters = 30
    bench.probe_rows = 64
  )");
  cfg.seed = seed;
  cfg.output_dir = out;
  return cfg;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndOverrides) {
  const ExperimentConfig cfg = parse_config(
      "seed = 7\nvariants = ptq, unquantized  # trailing comment\nvae.hidden = 64,32\n"
      "quant.requant = fixed\nmlp.learning_rate = 0.01\n");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.variants, (std::vector<Variant>{Variant::ptq, Variant::unquantized}));
  EXPECT_EQ(cfg.vae_arch.hidden, (std::vector<std::size_t>{64, 32}));
  EXPECT_EQ(cfg.requant, RequantMode::fixed_point);
  EXPECT_FLOAT_EQ(cfg.mlp_train.learning_rate, 0.01f);
  ExperimentConfig c2 = cfg;
  set_config_value(c2, "synthetic.spread", "0.3");
  EXPECT_DOUBLE_EQ(c2.synthetic_spread, 0.3);
}

TEST(Config, EchoReparsesToSameEntries) {
  ExperimentConfig cfg = parse_config("seed = 3\nmlp.hidden = 8\nquant.round_mode = floor\n");
  std::string text;
  for (const auto& [k, v] : cfg.entries()) text += k + " = " + v + "\n";
  EXPECT_EQ(parse_config(text).entries(), cfg.entries());
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("no_such_key = 1\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("seed\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("seed = abc\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("variants = \n"), std::invalid_argument);
  EXPECT_THROW(parse_config("variants = fp16\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("split.test_fraction = 1.5\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("bench.iters = 5\n"), std::invalid_argument);
  EXPECT_THROW(load_config("/nonexistent/dir/x.conf"), std::runtime_error);
  EXPECT_THROW(variant_from_name("int4"), std::invalid_argument);
}

TEST(Config, CsvPathsResolveAgainstConfigFile) {
  const ExperimentConfig cfg = parse_config("data.source = csv\ndata.csv = a.csv@benign, /abs/b.csv\n", "/cfg/dir");
  ASSERT_EQ(cfg.csv.size(), 2u);
  EXPECT_EQ(cfg.csv[0].path, std::filesystem::path("/cfg/dir/a.csv"));
  EXPECT_EQ(cfg.csv[0].label, "benign");
  EXPECT_EQ(cfg.csv[1].path, std::filesystem::path("/abs/b.csv"));
  EXPECT_FALSE(cfg.csv[1].label);
}

TEST(Experiment, SmallRunProducesOneRowPerVariant) {
  TempDir dir;
  const ExperimentReport r = run_experiment(small_config(dir.path()));
  ASSERT_EQ(r.variants.size(), 3u);
  for (const auto& v : r.variants) {
    EXPECT_GE(v.metrics.accuracy, 0.9) << variant_name(v.variant);
    EXPECT_TRUE(v.engine_matches_batch);
    EXPECT_TRUE(std::filesystem::exists(v.artifact));
    EXPECT_EQ(v.artifact_bytes, artifact_size(v.artifact));
    EXPECT_GT(v.bench.total.mean_s, 0.0);
    EXPECT_EQ(v.confusion.total(), r.test_rows);
  }
  EXPECT_EQ(r.train_rows + r.test_rows, 3000u);
  EXPECT_LT(r.find(Variant::ptq)->artifact_bytes, r.find(Variant::unquantized)->artifact_bytes);
  // PTQ never retrains, so it is built from the unquantized weights.
  EXPECT_EQ(r.find(Variant::ptq)->source_weight_hash, r.find(Variant::unquantized)->source_weight_hash);
  EXPECT_NE(r.find(Variant::qat)->source_weight_hash, r.find(Variant::unquantized)->source_weight_hash);
  for (const char* f : {"report.txt", "report.jsonl", "normalizer.txt", "vae_fp32.qnm", "mlp_fp32.qnm"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const std::string tables = format_tables(r);
  for (const char* s : {"Unquantized", "QAT", "PTQ", "Accuracy", "MB"}) EXPECT_NE(tables.find(s), std::string::npos) << s;
  std::size_t lines = 0;
  for (const char c : format_jsonl(r)) lines += c == '\n';
  EXPECT_EQ(lines, 3u + 3u + 1u);  // config, environment, dataset, variants, losses
}

TEST(Experiment, DeterministicMetricsAndArtifacts) {
  TempDir a, b;
  ExperimentConfig ca = small_config(a.path(), 4), cb = small_config(b.path(), 4);
  ca.variants = cb.variants = {Variant::unquantized, Variant::ptq};
  const ExperimentReport ra = run_experiment(ca), rb = run_experiment(cb);
  for (std::size_t i = 0; i < ra.variants.size(); ++i) {
    EXPECT_EQ(ra.variants[i].confusion, rb.variants[i].confusion);
    EXPECT_EQ(ra.variants[i].metrics.f1, rb.variants[i].metrics.f1);
    EXPECT_EQ(read_all(ra.variants[i].artifact), read_all(rb.variants[i].artifact));
  }
  EXPECT_EQ(ra.vae_loss, rb.vae_loss);
}

TEST(Experiment, FailingStageIsNamedAndArtifactsRemoved) {
  TempDir dir;
  std::filesystem::create_directories(dir / "report.txt");  // blocks the report writer
  ExperimentConfig cfg = small_config(dir.path());
  cfg.variants = {Variant::unquantized, Variant::ptq};
  try {
    run_experiment(cfg);
    FAIL() << "expected a StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "report");
  }
  for (const char* f : {"fp32_bundle.qnm", "ptq_int8.qnm", "vae_fp32.qnm", "normalizer.txt", "report.jsonl"})
    EXPECT_FALSE(std::filesystem::exists(dir / f)) << f;
  EXPECT_TRUE(std::filesystem::is_directory(dir / "report.txt"));
}

TEST(Experiment, MissingCsvFailsInDataStage) {
  TempDir dir;
  ExperimentConfig cfg = parse_config("data.source = csv\ndata.csv = missing.csv\n", dir.path());
  cfg.output_dir = dir / "out";
  try {
    run_experiment(cfg);
    FAIL() << "expected a StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "data");
  }
}

TEST(Experiment, EvaluateArtifactMatchesPipelineRow) {
  TempDir dir;
  ExperimentConfig cfg = small_config(dir.path(), 2);
  cfg.variants = {Variant::ptq};
  const ExperimentReport r = run_experiment(cfg);
  const PreparedData data = prepare_data(cfg);
  const VariantResult v = evaluate_artifact(Variant::ptq, load(dir / "ptq_int8.qnm"), data.test, cfg.requant, 32);
  EXPECT_EQ(v.confusion, r.variants[0].confusion);
}

// Hooks whose ranges never clip only add rounding noise to FP32 training.
TEST(Qat, FixedWideRangeTracksFloatTraining) {
  TempDir dir;
  const ExperimentConfig cfg = small_config(dir.path(), 3);
  const PreparedData data = prepare_data(cfg);
  const Fp32Models fp = train_fp32(cfg, data.train);
  const double fp_acc = accuracy(predict(make_float_bundle(fp.vae, fp.mlp), data.test.features), data.test.labels);

  QatOptions opts;
  opts.fixed_activation_range = std::pair{-16.0f, 16.0f};
  VaeArchitecture arch = cfg.vae_arch;
  arch.input_dim = data.train.features.cols();
  QatHooks hooks = qat_hooks(arch, opts);
  auto vae = train_vae(data.train.features, {cfg.vae_train, arch, cfg.vae_beta}, &hooks.vae);
  Rng rng(derive_seed(cfg.seed, "mlp.init"));
  MlpModel init = make_mlp(arch.latent_dim, cfg.mlp_hidden, 2, rng);
  auto mlp = train(std::move(init), project(vae.model, data.train.features, &hooks.vae), data.train.labels,
                   cfg.mlp_train, &hooks.mlp);
  const double q_acc = accuracy(predict(make_float_bundle(vae.model, mlp.model), data.test.features), data.test.labels);
  EXPECT_GE(fp_acc, 0.9);
  EXPECT_NEAR(q_acc, fp_acc, 0.05);
}
