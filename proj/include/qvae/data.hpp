#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qvae/tensor.hpp"

namespace qvae {

struct DatasetSchema {
  std::string name = "custom";
  /// 0 means "whatever the header says" (custom schemas only).
  std::size_t n_features = 0;
  /// Label column by name; when empty, `label_index` is used instead.
  std::string label_column = "label";
  std::optional<std::size_t> label_index;
  /// Class order defines label indices. Empty means discover classes from the
  /// data and order them lexicographically.
  std::vector<std::string> class_names;
  /// Classes counted as "attack" for binary metrics.
  std::vector<std::string> positive_classes;
  char delimiter = ',';

  /// 115 features, classes benign / gafgyt / mirai.
  static DatasetSchema nbaiot();
  /// 84 features, classes discovered from the data, everything but benign is an attack.
  static DatasetSchema ciciot2022();
  static DatasetSchema custom();
  /// "nbaiot", "ciciot2022" or "custom"; throws on anything else.
  static DatasetSchema preset(const std::string& name);

  bool is_positive(const std::string& class_name) const;
};

/// Per-feature min/max fitted on the training split.
struct NormStats {
  std::vector<float> min;
  std::vector<float> max;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

struct LabeledDataset {
  Matrix features;
  std::vector<int> labels;
  DatasetSchema schema;
  std::vector<std::string> feature_names;
  std::optional<NormStats> norm_stats;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t n_classes() const noexcept { return schema.class_names.size(); }
  std::vector<std::size_t> class_counts() const;
  void validate() const;
};

struct LoadReport {
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;
  /// (1-based line number, reason) for the first few dropped rows.
  std::vector<std::pair<std::size_t, std::string>> drop_samples;
  std::map<std::string, std::size_t> class_histogram;

  std::string to_string() const;
};

/// One CSV input. `label` assigns every row of the file to that class, for
/// per-class dumps that carry no label column.
struct CsvSource {
  std::filesystem::path path;
  std::optional<std::string> label;
};

/// Reads a headed CSV. Rows with non-numeric feature cells, the wrong cell
/// count or an unknown label are dropped and counted. Throws std::runtime_error
/// for a missing file, missing label column, a feature count that contradicts
/// the schema, or zero usable rows.
LabeledDataset load_csv(const std::filesystem::path& path, const DatasetSchema& schema,
                        LoadReport* report = nullptr);

/// Loads several CSVs with a shared schema and concatenates them. With an
/// open class list, classes are discovered across all files.
LabeledDataset load_csvs(const std::vector<CsvSource>& sources, const DatasetSchema& schema,
                         LoadReport* report = nullptr);

/// Writes features plus a trailing `label` column holding class names.
void write_csv(const LabeledDataset& ds, const std::filesystem::path& path);

NormStats fit_normalizer(const LabeledDataset& train);
/// (x - min) / (max - min) clamped to [0, 1]; constant features map to 0.5.
LabeledDataset apply_normalizer(const LabeledDataset& ds, const NormStats& stats);
void save_normalizer(const NormStats& stats, const std::filesystem::path& path);
NormStats load_normalizer(const std::filesystem::path& path);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Stratified split: each class contributes round(n_c * test_fraction) test
/// samples (at least 1, at most n_c - 1). Deterministic for a fixed seed.
SplitIndices split_indices(const LabeledDataset& ds, double test_fraction, std::uint64_t seed);
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double test_fraction,
                                                std::uint64_t seed);
LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& rows);

/// Gaussian clusters around distinct hypercube corners with unit circumradius
/// (entries +-1/sqrt(D)), squashed through a sigmoid into (0, 1). Two classes
/// sit at opposite corners. Class names are "benign", "attack1", "attack2", ...
LabeledDataset gen_synthetic(std::size_t n_per_class, std::size_t n_features, std::size_t n_classes,
                             double cluster_spread, std::uint64_t seed);

/// Collapses every positive class to label 1 and the rest to 0.
LabeledDataset to_binary(const LabeledDataset& ds);

}  // namespace qvae
