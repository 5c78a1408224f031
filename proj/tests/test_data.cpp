#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "qvae/data.hpp"
#include "test_util.hpp"

using namespace qvae;
using qvae::testing::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

LabeledDataset column(std::initializer_list<float> values) {
  LabeledDataset ds;
  ds.features = Matrix(values.size(), 1);
  std::size_t i = 0;
  for (const float v : values) ds.features(i++, 0) = v;
  ds.labels.assign(values.size(), 0);
  ds.schema.class_names = {"a"};
  return ds;
}

// Nearest-centroid accuracy on `test` with centroids fitted on `train`.
double nearest_centroid_accuracy(const LabeledDataset& train, const LabeledDataset& test) {
  const std::size_t k = train.n_classes(), d = train.features.cols();
  std::vector<std::vector<double>> mean(k, std::vector<double>(d, 0.0));
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    ++count[train.labels[i]];
    for (std::size_t j = 0; j < d; ++j) mean[train.labels[i]][j] += train.features(i, j);
  }
  for (std::size_t c = 0; c < k; ++c)
    for (auto& m : mean[c]) m /= static_cast<double>(count[c]);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    int best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < k; ++c) {
      double dist = 0;
      for (std::size_t j = 0; j < d; ++j) dist += (test.features(i, j) - mean[c][j]) * (test.features(i, j) - mean[c][j]);
      if (dist < best_d) best_d = dist, best = static_cast<int>(c);
    }
    correct += best == test.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace

TEST(LoadCsv, WellFormedFiveRows) {
  TempDir dir;
  write_file(dir / "d.csv", "f1,f2,label\n1,2,benign\n3,4,attack\n5,6,benign\n7,8,attack\n9,10,benign\n");
  LoadReport report;
  const LabeledDataset ds = load_csv(dir / "d.csv", DatasetSchema::custom(), &report);
  ASSERT_EQ(ds.size(), 5u);
  EXPECT_EQ(ds.schema.class_names, (std::vector<std::string>{"attack", "benign"}));
  EXPECT_EQ(ds.labels, (std::vector<int>{1, 0, 1, 0, 1}));
  EXPECT_EQ(ds.features, Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}, {7, 8}, {9, 10}}));
  EXPECT_EQ(ds.feature_names, (std::vector<std::string>{"f1", "f2"}));
  EXPECT_EQ(report.rows_read, 5u);
  EXPECT_EQ(report.rows_dropped, 0u);
}

TEST(LoadCsv, SchemaClassOrderDefinesLabels) {
  TempDir dir;
  write_file(dir / "d.csv", "x;y\nb;1\na;2\n");
  DatasetSchema s;
  s.delimiter = ';';
  s.label_column.clear();
  s.label_index = 0;
  s.class_names = {"b", "a"};
  const LabeledDataset ds = load_csv(dir / "d.csv", s);
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 1}));
  EXPECT_EQ(ds.features, Matrix::from_rows({{1}, {2}}));
}

TEST(LoadCsv, CorruptRowIsDroppedAndCounted) {
  TempDir dir;
  write_file(dir / "d.csv", "f1,f2,label\n1,2,benign\n3,oops,attack\n5,6,benign\n7,8,attack\n9,10,benign\n");
  LoadReport report;
  const LabeledDataset ds = load_csv(dir / "d.csv", DatasetSchema::custom(), &report);
  EXPECT_EQ(ds.size(), 4u);
  EXPECT_EQ(report.rows_dropped, 1u);
  ASSERT_FALSE(report.drop_samples.empty());
  EXPECT_EQ(report.drop_samples[0].first, 3u);
  EXPECT_NE(report.to_string().find("dropped"), std::string::npos);
}

TEST(LoadCsv, UnknownLabelAndShortRowAreDropped) {
  TempDir dir;
  write_file(dir / "d.csv", "f1,label\n1,a\n2,zzz\n3\n4,b\n");
  DatasetSchema s;
  s.class_names = {"a", "b"};
  LoadReport report;
  const LabeledDataset ds = load_csv(dir / "d.csv", s, &report);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(report.rows_dropped, 2u);
}

TEST(LoadCsv, NbaiotPresetRejectsTenColumns) {
  TempDir dir;
  std::string text = "f0,f1,f2,f3,f4,f5,f6,f7,f8,f9,label\n";
  for (int r = 0; r < 3; ++r) text += "1,2,3,4,5,6,7,8,9,10,benign\n";
  write_file(dir / "d.csv", text);
  try {
    load_csv(dir / "d.csv", DatasetSchema::nbaiot());
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("115"), std::string::npos) << e.what();
  }
}

TEST(LoadCsv, FatalErrors) {
  TempDir dir;
  EXPECT_THROW(load_csv(dir / "missing.csv", DatasetSchema::custom()), std::runtime_error);
  write_file(dir / "nolabel.csv", "f1,f2\n1,2\n");
  EXPECT_THROW(load_csv(dir / "nolabel.csv", DatasetSchema::custom()), std::runtime_error);
  write_file(dir / "bad.csv", "f1,label\nx,a\ny,b\n");
  EXPECT_THROW(load_csv(dir / "bad.csv", DatasetSchema::custom()), std::runtime_error);
}

TEST(LoadCsv, PerFileLabels) {
  TempDir dir;
  write_file(dir / "benign.csv", "f1,f2\n1,2\n3,4\n");
  write_file(dir / "mirai.csv", "f1,f2\n5,6\n");
  DatasetSchema s;
  s.class_names = {"benign", "mirai"};
  const LabeledDataset ds = load_csvs({{dir / "benign.csv", "benign"}, {dir / "mirai.csv", "mirai"}}, s);
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 0, 1}));
}

TEST(LoadCsv, LoadingIsIdempotentAndWriteRoundTrips) {
  TempDir dir;
  const LabeledDataset ds = gen_synthetic(20, 5, 3, 0.2, 7);
  write_csv(ds, dir / "s.csv");
  const LabeledDataset a = load_csv(dir / "s.csv", DatasetSchema::custom());
  const LabeledDataset b = load_csv(dir / "s.csv", DatasetSchema::custom());
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.features, ds.features);
  // Discovered classes are ordered lexicographically, so compare by name.
  for (std::size_t i = 0; i < ds.size(); ++i)
    EXPECT_EQ(a.schema.class_names[a.labels[i]], ds.schema.class_names[ds.labels[i]]);
}

TEST(Normalizer, MinMaxExamples) {
  const LabeledDataset train = column({0, 5, 10});
  const NormStats st = fit_normalizer(train);
  EXPECT_EQ(apply_normalizer(train, st).features, Matrix::from_rows({{0}, {0.5f}, {1}}));
  EXPECT_EQ(apply_normalizer(column({12, -3}), st).features, Matrix::from_rows({{1}, {0}}));
  const LabeledDataset c = column({7, 7, 7});
  EXPECT_EQ(apply_normalizer(c, fit_normalizer(c)).features, Matrix::from_rows({{0.5f}, {0.5f}, {0.5f}}));
}

TEST(Normalizer, FittingSplitLandsInUnitInterval) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    LabeledDataset ds = gen_synthetic(50, 12, 2, 1.0, seed);
    std::mt19937_64 gen(seed);
    ds.features = qvae::testing::random_matrix(gen, ds.size(), 12, -1000, 1000);
    const Matrix n = apply_normalizer(ds, fit_normalizer(ds)).features;
    for (const float v : n.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Normalizer, MismatchAndPersistence) {
  TempDir dir;
  const NormStats st = fit_normalizer(gen_synthetic(10, 4, 2, 0.3, 1));
  EXPECT_THROW(apply_normalizer(gen_synthetic(10, 5, 2, 0.3, 1), st), std::invalid_argument);
  save_normalizer(st, dir / "n.txt");
  EXPECT_EQ(load_normalizer(dir / "n.txt"), st);
  EXPECT_THROW(load_normalizer(dir / "none.txt"), std::runtime_error);
}

TEST(Split, StratifiedEightyTwenty) {
  const LabeledDataset ds = gen_synthetic(50, 3, 2, 0.2, 3);
  const auto [train, test] = split(ds, 0.2, 11);
  EXPECT_EQ(train.size(), 80u);
  EXPECT_EQ(test.size(), 20u);
  EXPECT_EQ(test.class_counts(), (std::vector<std::size_t>{10, 10}));
}

TEST(Split, DeterministicDisjointAndCountPreserving) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const LabeledDataset ds = gen_synthetic(7 + seed * 3, 2, 3, 0.2, seed);
    const SplitIndices a = split_indices(ds, 0.3, seed), b = split_indices(ds, 0.3, seed);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    std::set<std::size_t> all(a.train.begin(), a.train.end());
    for (const auto i : a.test) EXPECT_TRUE(all.insert(i).second) << "index in both splits";
    EXPECT_EQ(all.size(), ds.size());
    const auto [train, test] = split(ds, 0.3, seed);
    const auto total = ds.class_counts(), tr = train.class_counts(), te = test.class_counts();
    for (std::size_t c = 0; c < total.size(); ++c) EXPECT_EQ(tr[c] + te[c], total[c]);
  }
}

TEST(Split, Errors) {
  LabeledDataset ds = gen_synthetic(5, 2, 2, 0.2, 1);
  EXPECT_THROW(split(ds, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(split(ds, 1.0, 1), std::invalid_argument);
  ds = subset(ds, {0, 1, 2, 4});  // rows alternate classes: one "attack1"
  try {
    split(ds, 0.2, 1);
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("attack1"), std::string::npos) << e.what();
  }
}

TEST(Synthetic, SeparableAtSmallSpread) {
  const LabeledDataset ds = gen_synthetic(1000, 115, 2, 0.1, 5);
  const auto [train, test] = split(ds, 0.2, 5);
  EXPECT_GE(nearest_centroid_accuracy(train, test), 0.99);
}

TEST(Synthetic, ChanceLevelAtLargeSpread) {
  const LabeledDataset ds = gen_synthetic(2000, 115, 2, 10.0, 6);
  const auto [train, test] = split(ds, 0.5, 6);
  EXPECT_NEAR(nearest_centroid_accuracy(train, test), 0.5, 0.05);
}

TEST(Synthetic, DeterministicAndInOpenUnitInterval) {
  const LabeledDataset a = gen_synthetic(30, 8, 4, 0.5, 9), b = gen_synthetic(30, 8, 4, 0.5, 9);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.features, gen_synthetic(30, 8, 4, 0.5, 10).features);
  EXPECT_EQ(a.schema.class_names, (std::vector<std::string>{"benign", "attack1", "attack2", "attack3"}));
  for (const float v : a.features.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Synthetic, BinaryCollapse) {
  const LabeledDataset b = to_binary(gen_synthetic(4, 2, 3, 0.1, 1));
  EXPECT_EQ(b.n_classes(), 2u);
  EXPECT_EQ(b.class_counts(), (std::vector<std::size_t>{4, 8}));
}
