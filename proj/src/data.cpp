#include "qvae/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string_view>

#include <fmt/format.h>

#include "qvae/rng.hpp"

namespace qvae {

DatasetSchema DatasetSchema::nbaiot() {
  DatasetSchema s;
  s.name = "nbaiot";
  s.n_features = 115;
  s.class_names = {"benign", "gafgyt", "mirai"};
  s.positive_classes = {"gafgyt", "mirai"};
  return s;
}

DatasetSchema DatasetSchema::ciciot2022() {
  DatasetSchema s;
  s.name = "ciciot2022";
  s.n_features = 84;
  return s;
}

DatasetSchema DatasetSchema::custom() { return {}; }

DatasetSchema DatasetSchema::preset(const std::string& name) {
  if (name == "nbaiot") return nbaiot();
  if (name == "ciciot2022") return ciciot2022();
  if (name == "custom") return custom();
  throw std::invalid_argument("unknown schema '" + name + "' (expected nbaiot, ciciot2022 or custom)");
}

bool DatasetSchema::is_positive(const std::string& class_name) const {
  if (!positive_classes.empty())
    return std::find(positive_classes.begin(), positive_classes.end(), class_name) !=
           positive_classes.end();
  std::string lower = class_name;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return lower != "benign";
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(n_classes(), 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

void LabeledDataset::validate() const {
  if (features.rows() != labels.size())
    throw std::invalid_argument("dataset has " + std::to_string(features.rows()) + " rows but " +
                                std::to_string(labels.size()) + " labels");
  if (schema.n_features != 0 && features.cols() != schema.n_features)
    throw std::invalid_argument("dataset has " + std::to_string(features.cols()) +
                                " features, schema expects " + std::to_string(schema.n_features));
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= n_classes())
      throw std::invalid_argument("label " + std::to_string(l) + " outside the class list");
}

std::string LoadReport::to_string() const {
  std::string out = fmt::format("rows_read={} rows_dropped={}", rows_read, rows_dropped);
  for (const auto& [name, n] : class_histogram) out += fmt::format(" class[{}]={}", name, n);
  for (const auto& [line, why] : drop_samples) out += fmt::format("\n  dropped line {}: {}", line, why);
  return out;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"'))
    s.remove_suffix(1);
  return s;
}

void split_cells(std::string_view line, char delim, std::vector<std::string_view>& cells) {
  cells.clear();
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      cells.push_back(trim(line.substr(start)));
      return;
    }
    cells.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
}

bool parse_float(std::string_view s, float& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

struct RawRows {
  std::vector<float> values;
  std::vector<std::string> labels;
  std::vector<std::string> feature_names;
  std::size_t n_features = 0;
};

constexpr std::size_t kMaxDropSamples = 10;

void record_drop(LoadReport& report, std::size_t line, std::string why) {
  ++report.rows_dropped;
  if (report.drop_samples.size() < kMaxDropSamples) report.drop_samples.emplace_back(line, std::move(why));
}

void read_source(const CsvSource& src, const DatasetSchema& schema, RawRows& raw, LoadReport& report) {
  const auto& path = src.path;
  if (path.empty()) throw std::runtime_error("empty CSV path");
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV file '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("CSV file '" + path.string() + "' is empty");
  std::vector<std::string_view> cells;
  split_cells(line, schema.delimiter, cells);

  std::optional<std::size_t> label_col;
  if (!schema.label_column.empty()) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (cells[i] == schema.label_column) label_col = i;
  } else if (schema.label_index) {
    label_col = *schema.label_index;
  }
  if (label_col && *label_col >= cells.size())
    throw std::runtime_error("label column index " + std::to_string(*label_col) + " is outside the " +
                             std::to_string(cells.size()) + "-column header of '" + path.string() + "'");
  if (!label_col && !src.label)
    throw std::runtime_error("CSV file '" + path.string() + "' has no label column '" +
                             schema.label_column + "'");

  std::vector<std::string> names;
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (!label_col || i != *label_col) names.emplace_back(cells[i]);
  const std::size_t n_features = names.size();
  if (schema.n_features != 0 && n_features != schema.n_features)
    throw std::runtime_error("CSV file '" + path.string() + "' has " + std::to_string(n_features) +
                             " feature columns; schema '" + schema.name + "' expects " +
                             std::to_string(schema.n_features) + " features");
  if (raw.feature_names.empty()) {
    raw.feature_names = std::move(names);
    raw.n_features = n_features;
  } else if (n_features != raw.n_features) {
    throw std::runtime_error("CSV file '" + path.string() + "' has " + std::to_string(n_features) +
                             " feature columns, earlier files have " + std::to_string(raw.n_features));
  }

  const std::set<std::string, std::less<>> known(schema.class_names.begin(), schema.class_names.end());
  std::vector<float> row(n_features);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    ++report.rows_read;
    split_cells(line, schema.delimiter, cells);
    const std::size_t expected = n_features + (label_col ? 1 : 0);
    if (cells.size() != expected) {
      record_drop(report, line_no, fmt::format("{} cells, expected {}", cells.size(), expected));
      continue;
    }
    std::string label = src.label ? *src.label : std::string(cells[*label_col]);
    if (!known.empty() && !known.contains(label)) {
      record_drop(report, line_no, "unknown label '" + label + "'");
      continue;
    }
    if (label.empty()) {
      record_drop(report, line_no, "empty label");
      continue;
    }
    bool ok = true;
    std::size_t f = 0;
    for (std::size_t i = 0; i < cells.size() && ok; ++i) {
      if (label_col && i == *label_col) continue;
      if (!parse_float(cells[i], row[f])) {
        record_drop(report, line_no, fmt::format("non-numeric value '{}' in column {}", cells[i], i + 1));
        ok = false;
      }
      ++f;
    }
    if (!ok) continue;
    raw.values.insert(raw.values.end(), row.begin(), row.end());
    raw.labels.push_back(std::move(label));
  }
}

}  // namespace

LabeledDataset load_csvs(const std::vector<CsvSource>& sources, const DatasetSchema& schema,
                         LoadReport* report) {
  if (sources.empty()) throw std::runtime_error("no CSV files given");
  LoadReport local;
  RawRows raw;
  for (const auto& src : sources) read_source(src, schema, raw, local);
  if (raw.labels.empty())
    throw std::runtime_error("no usable rows (" + std::to_string(local.rows_read) + " read, " +
                             std::to_string(local.rows_dropped) + " dropped)" +
                             (local.drop_samples.empty()
                                  ? std::string()
                                  : "; first problem at line " +
                                        std::to_string(local.drop_samples.front().first) + ": " +
                                        local.drop_samples.front().second));

  LabeledDataset ds;
  ds.schema = schema;
  if (ds.schema.class_names.empty()) {
    const std::set<std::string> found(raw.labels.begin(), raw.labels.end());
    ds.schema.class_names.assign(found.begin(), found.end());
  }
  ds.schema.n_features = raw.n_features;
  std::map<std::string, int, std::less<>> index;
  for (std::size_t i = 0; i < ds.schema.class_names.size(); ++i)
    index.emplace(ds.schema.class_names[i], static_cast<int>(i));
  ds.labels.reserve(raw.labels.size());
  for (const auto& l : raw.labels) {
    ds.labels.push_back(index.at(l));
    ++local.class_histogram[l];
  }
  ds.features = Matrix(raw.labels.size(), raw.n_features, std::move(raw.values));
  ds.feature_names = std::move(raw.feature_names);
  ds.validate();
  if (report) *report = std::move(local);
  return ds;
}

LabeledDataset load_csv(const std::filesystem::path& path, const DatasetSchema& schema,
                        LoadReport* report) {
  return load_csvs({CsvSource{path, std::nullopt}}, schema, report);
}

void write_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  const char d = ds.schema.delimiter;
  fmt::memory_buffer buf;
  for (std::size_t c = 0; c < ds.features.cols(); ++c) {
    if (c < ds.feature_names.size())
      fmt::format_to(std::back_inserter(buf), "{}{}", ds.feature_names[c], d);
    else
      fmt::format_to(std::back_inserter(buf), "f{}{}", c, d);
  }
  fmt::format_to(std::back_inserter(buf), "label\n");
  for (std::size_t r = 0; r < ds.features.rows(); ++r) {
    for (float v : ds.features.row(r)) fmt::format_to(std::back_inserter(buf), "{}{}", v, d);
    fmt::format_to(std::back_inserter(buf), "{}\n",
                   ds.schema.class_names[static_cast<std::size_t>(ds.labels[r])]);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

NormStats fit_normalizer(const LabeledDataset& train) {
  if (train.features.rows() == 0) throw std::invalid_argument("fit_normalizer: empty dataset");
  const std::size_t d = train.features.cols();
  NormStats s{std::vector<float>(d), std::vector<float>(d)};
  for (std::size_t c = 0; c < d; ++c) s.min[c] = s.max[c] = train.features(0, c);
  for (std::size_t r = 1; r < train.features.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const float v = train.features(r, c);
      s.min[c] = std::min(s.min[c], v);
      s.max[c] = std::max(s.max[c], v);
    }
  return s;
}

LabeledDataset apply_normalizer(const LabeledDataset& ds, const NormStats& stats) {
  const std::size_t d = ds.features.cols();
  if (stats.min.size() != d || stats.max.size() != d)
    throw std::invalid_argument("normalizer has " + std::to_string(stats.min.size()) +
                                " features, dataset has " + std::to_string(d));
  LabeledDataset out = ds;
  for (std::size_t r = 0; r < out.features.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) {
      float& v = out.features(r, c);
      const double range = static_cast<double>(stats.max[c]) - stats.min[c];
      if (!(range > 0.0)) {
        v = 0.5f;
        continue;
      }
      const double t = (static_cast<double>(v) - stats.min[c]) / range;
      v = static_cast<float>(std::clamp(t, 0.0, 1.0));
    }
  out.norm_stats = stats;
  return out;
}

void save_normalizer(const NormStats& stats, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write normalizer '" + path.string() + "'");
  out << "qvae-normalizer 1 " << stats.min.size() << '\n';
  for (std::size_t i = 0; i < stats.min.size(); ++i)
    out << fmt::format("{} {}\n", stats.min[i], stats.max[i]);
  if (!out) throw std::runtime_error("failed writing normalizer '" + path.string() + "'");
}

NormStats load_normalizer(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open normalizer '" + path.string() + "'");
  std::string magic;
  int version = 0;
  std::size_t n = 0;
  if (!(in >> magic >> version >> n) || magic != "qvae-normalizer" || version != 1)
    throw std::runtime_error("'" + path.string() + "' is not a normalizer file");
  NormStats s{std::vector<float>(n), std::vector<float>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    std::string lo, hi;
    if (!(in >> lo >> hi) || !parse_float(lo, s.min[i]) || !parse_float(hi, s.max[i]))
      throw std::runtime_error("normalizer '" + path.string() + "' is truncated or corrupt at feature " +
                               std::to_string(i));
  }
  return s;
}

SplitIndices split_indices(const LabeledDataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw std::invalid_argument("test_fraction must lie strictly between 0 and 1");
  ds.validate();
  std::vector<std::vector<std::size_t>> by_class(ds.n_classes());
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  Rng rng(derive_seed(seed, "split"));
  SplitIndices out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 2)
      throw std::invalid_argument("class '" + ds.schema.class_names[c] +
                                  "' has fewer than 2 samples and cannot be split");
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_test = static_cast<std::size_t>(
        std::clamp(std::round(n * test_fraction), 1.0, n - 1.0));
    out.test.insert(out.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    out.train.insert(out.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& rows) {
  LabeledDataset out;
  out.schema = ds.schema;
  out.feature_names = ds.feature_names;
  out.norm_stats = ds.norm_stats;
  out.features = gather_rows(ds.features, std::span<const std::size_t>(rows));
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) out.labels.push_back(ds.labels.at(r));
  return out;
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double test_fraction,
                                                std::uint64_t seed) {
  const SplitIndices idx = split_indices(ds, test_fraction, seed);
  return {subset(ds, idx.train), subset(ds, idx.test)};
}

LabeledDataset gen_synthetic(std::size_t n_per_class, std::size_t n_features, std::size_t n_classes,
                             double cluster_spread, std::uint64_t seed) {
  if (n_per_class < 1 || n_features < 1 || n_classes < 1)
    throw std::invalid_argument("gen_synthetic: counts must be >= 1");
  if (!(cluster_spread >= 0.0) || !std::isfinite(cluster_spread))
    throw std::invalid_argument("gen_synthetic: spread must be finite and >= 0");
  if (n_features < 63 && n_classes > (std::size_t{1} << n_features))
    throw std::invalid_argument("gen_synthetic: more classes than hypercube corners");

  Rng rng(derive_seed(seed, "synthetic"));
  const double half = 1.0 / std::sqrt(static_cast<double>(n_features));
  std::vector<std::vector<double>> centers;
  std::set<std::vector<double>> seen;
  while (centers.size() < n_classes) {
    std::vector<double> c(n_features);
    if (centers.size() == 1 && n_classes == 2) {
      for (std::size_t j = 0; j < n_features; ++j) c[j] = -centers[0][j];
    } else {
      for (auto& v : c) v = (rng.next_u64() >> 63) ? half : -half;
    }
    if (seen.insert(c).second) centers.push_back(std::move(c));
  }

  LabeledDataset ds;
  ds.schema.name = "synthetic";
  ds.schema.n_features = n_features;
  ds.schema.class_names.push_back("benign");
  for (std::size_t k = 1; k < n_classes; ++k) ds.schema.class_names.push_back("attack" + std::to_string(k));
  for (std::size_t j = 0; j < n_features; ++j) ds.feature_names.push_back("f" + std::to_string(j));
  ds.features = Matrix(n_per_class * n_classes, n_features);
  ds.labels.resize(n_per_class * n_classes);
  std::size_t r = 0;
  for (std::size_t i = 0; i < n_per_class; ++i)
    for (std::size_t k = 0; k < n_classes; ++k, ++r) {
      ds.labels[r] = static_cast<int>(k);
      for (std::size_t j = 0; j < n_features; ++j) {
        const double v = centers[k][j] + cluster_spread * rng.standard_normal();
        ds.features(r, j) = static_cast<float>(1.0 / (1.0 + std::exp(-v)));
      }
    }
  return ds;
}

LabeledDataset to_binary(const LabeledDataset& ds) {
  ds.validate();
  LabeledDataset out = ds;
  out.schema.class_names = {"benign", "attack"};
  out.schema.positive_classes = {"attack"};
  for (auto& l : out.labels)
    l = ds.schema.is_positive(ds.schema.class_names[static_cast<std::size_t>(l)]) ? 1 : 0;
  return out;
}

}  // namespace qvae
