#include <cstring>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "qvae/convert.hpp"
#include "qvae/model_store.hpp"
#include "test_util.hpp"

using namespace qvae;
using qvae::testing::random_matrix;
using qvae::testing::TempDir;

namespace {

constexpr std::size_t kFixedHeader = 16;   // magic, version, flavor, kind, reserved, count, split
constexpr std::size_t kFpDescriptor = 9;   // in, out, activation

struct Models {
  VaeModel vae;
  MlpModel mlp;
  FloatBundle fp;
  QuantizedBundle q;
  Matrix probe;
};

Models make_models(std::uint64_t seed, std::size_t input_dim = 20) {
  Rng rng(seed);
  Models m;
  m.vae = make_vae({input_dim, {16}, 8}, rng);
  const std::vector<std::size_t> hidden{16, 16};
  m.mlp = make_mlp(8, hidden, 2, rng);
  m.fp = make_float_bundle(m.vae, m.mlp);
  std::mt19937_64 gen(seed);
  m.probe = random_matrix(gen, 64, input_dim, 0, 1);
  m.q = ptq_convert(m.fp, m.probe);
  return m;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

FormatError::Code error_code(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize(bytes);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "malformed bytes were accepted";
  return FormatError::Code::bad_header;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace

TEST(ModelStore, FloatArtifactsRoundTripBitExactly) {
  TempDir dir;
  const Models m = make_models(1);
  const ModelArtifact items[] = {m.fp, m.vae, m.mlp};
  for (const auto& item : items) {
    const auto path = dir / "m.qnm";
    const std::size_t n = save(item, path);
    EXPECT_EQ(n, artifact_size(path));
    const ModelArtifact back = load(path);
    EXPECT_EQ(back, item);
    EXPECT_EQ(serialize(back), serialize(item));
  }
}

TEST(ModelStore, QuantizedBundleRoundTripsAndPredictsIdentically) {
  TempDir dir;
  const Models m = make_models(2);
  save(m.q, dir / "q.qnm");
  save(m.fp, dir / "f.qnm");
  const auto q = std::get<QuantizedBundle>(load(dir / "q.qnm"));
  const auto f = std::get<FloatBundle>(load(dir / "f.qnm"));
  EXPECT_EQ(q, m.q);
  EXPECT_EQ(bundle_logits(q, m.probe), bundle_logits(m.q, m.probe));
  EXPECT_EQ(bundle_proba(f, m.probe), bundle_proba(m.fp, m.probe));
  EXPECT_EQ(weight_hash(f), weight_hash(m.fp));
}

TEST(ModelStore, SerializationIsCanonical) {
  TempDir dir;
  const Models m = make_models(3);
  save(m.q, dir / "a.qnm");
  save(m.q, dir / "b.qnm");
  EXPECT_EQ(read_all(dir / "a.qnm"), read_all(dir / "b.qnm"));
  save(load(dir / "a.qnm"), dir / "c.qnm");
  EXPECT_EQ(read_all(dir / "a.qnm"), read_all(dir / "c.qnm"));
}

TEST(ModelStore, ByteAccounting) {
  const Models m = make_models(4, 115);
  const ArtifactStats f = artifact_stats(m.fp), q = artifact_stats(m.q);
  EXPECT_EQ(f.total_bytes(), serialize(m.fp).size());
  EXPECT_EQ(q.total_bytes(), serialize(m.q).size());
  const std::size_t layers = m.fp.encoder.size() + m.fp.classifier.layers.size();
  EXPECT_EQ(q.weight_bytes * 4, f.weight_bytes);
  EXPECT_EQ(q.bias_bytes, f.bias_bytes);
  EXPECT_EQ(q.qparam_bytes, layers * 3 * 10);
  EXPECT_EQ(q.header_bytes, f.header_bytes + q.qparam_bytes);
  EXPECT_GE(static_cast<double>(f.weight_bytes) / q.weight_bytes, 3.8);
  EXPECT_LT(q.total_bytes(), f.total_bytes());
}

TEST(ModelStore, ArtifactSizeErrors) {
  TempDir dir;
  EXPECT_THROW(artifact_size(""), std::invalid_argument);
  EXPECT_THROW(artifact_size(dir / "missing.qnm"), std::runtime_error);
  EXPECT_THROW(load(dir / "missing.qnm"), std::runtime_error);
}

TEST(ModelStore, RejectsBadMagic) {
  auto b = serialize(make_models(5).fp);
  std::memcpy(b.data(), "XXXX", 4);
  EXPECT_EQ(error_code(b), FormatError::Code::bad_magic);
  EXPECT_EQ(error_code({'Q', 'N'}), FormatError::Code::bad_magic);
}

TEST(ModelStore, RejectsBadVersionAndHeader) {
  const auto good = serialize(make_models(6).fp);
  auto b = good;
  b[4] = 2;
  EXPECT_EQ(error_code(b), FormatError::Code::bad_version);
  b = good;
  b[5] = 7;
  EXPECT_EQ(error_code(b), FormatError::Code::bad_header);
  b = good;
  b[7] = 1;
  EXPECT_EQ(error_code(b), FormatError::Code::bad_header);
}

TEST(ModelStore, RejectsTruncation) {
  const auto good = serialize(make_models(7).q);
  for (const std::size_t keep : {std::size_t{10}, kFixedHeader + 3, good.size() - 1}) {
    const std::vector<std::uint8_t> b(good.begin(), good.begin() + keep);
    EXPECT_EQ(error_code(b), FormatError::Code::truncated) << keep;
  }
}

TEST(ModelStore, RejectsDimensionMismatch) {
  const auto good = serialize(make_models(8).fp);
  auto b = good;
  put_u32(b, kFixedHeader + 4, 17);  // first layer's out no longer feeds the second
  EXPECT_EQ(error_code(b), FormatError::Code::dimension_mismatch);
  b = good;
  put_u32(b, kFixedHeader, 21);  // input width grows, payload length disagrees
  EXPECT_EQ(error_code(b), FormatError::Code::dimension_mismatch);
}

TEST(ModelStore, RejectsUnknownActivation) {
  auto b = serialize(make_models(9).fp);
  b[kFixedHeader + 8] = 99;
  EXPECT_EQ(error_code(b), FormatError::Code::unknown_activation);
}

TEST(ModelStore, RejectsTrailingBytes) {
  auto b = serialize(make_models(10).q);
  b.push_back(0);
  EXPECT_EQ(error_code(b), FormatError::Code::trailing_bytes);
}

TEST(ModelStore, RejectsHugeLayerCountBeforeAllocating) {
  auto b = serialize(make_models(11).fp);
  put_u32(b, 8, 0xFFFFFFFFu);
  EXPECT_EQ(error_code(b), FormatError::Code::truncated);
}

TEST(ModelStore, DescriptorLayoutMatchesDocumentation) {
  const Models m = make_models(12);
  const auto b = serialize(m.fp);
  EXPECT_EQ(std::memcmp(b.data(), "QNM1", 4), 0);
  EXPECT_EQ(b[4], kQnmVersion);
  EXPECT_EQ(b[5], 0);  // fp32
  EXPECT_EQ(b[6], 0);  // bundle
  const std::size_t layers = m.fp.encoder.size() + m.fp.classifier.layers.size();
  EXPECT_EQ(b[8] | b[9] << 8, static_cast<int>(layers));
  EXPECT_EQ(b[kFixedHeader] | b[kFixedHeader + 1] << 8, 20);
  EXPECT_EQ(b[kFixedHeader + 8], static_cast<int>(Activation::relu));
  const std::size_t payload_at = kFixedHeader + layers * kFpDescriptor;
  std::uint64_t payload = 0;
  for (int i = 7; i >= 0; --i) payload = payload << 8 | b[payload_at + i];
  EXPECT_EQ(payload, b.size() - payload_at - 8);
}
