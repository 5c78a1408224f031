#include "qvae/model_store.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <optional>
#include <system_error>

namespace qvae {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'Q', 'N', 'M', '1'};
constexpr std::size_t kFixedHeader = 16;  // magic, version, flavor, kind, reserved, count, split
constexpr std::size_t kDescriptorBytes = 9;
constexpr std::size_t kQParamBytes = 10;
constexpr std::size_t kPayloadLengthBytes = 8;

using Code = FormatError::Code;

// One layer in file order, independent of the model kind.
struct LayerRecord {
  std::uint32_t in = 0;
  std::uint32_t out = 0;
  Activation activation = Activation::linear;
  const DenseLayer* fp = nullptr;
  const QDenseLayer* q = nullptr;
};

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& buf) : buf_(buf) {}
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i16(std::int16_t v) { u16(static_cast<std::uint16_t>(v)); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t>& buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : b_(bytes) {}
  std::size_t remaining() const noexcept { return b_.size() - pos_; }
  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw FormatError(Code::truncated, std::string("file ends inside ") + what + " (need " +
                                             std::to_string(n) + " bytes, " +
                                             std::to_string(remaining()) + " left)");
  }
  std::uint8_t u8() { return b_[pos_++]; }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int16_t i16() { return static_cast<std::int16_t>(u16()); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::uint64_t le(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t dim32(std::size_t d) {
  if (d > 0xffffffffu) throw std::invalid_argument("layer dimension does not fit the format");
  return static_cast<std::uint32_t>(d);
}

std::vector<LayerRecord> records_of(const ModelArtifact& m, std::uint32_t& split) {
  std::vector<LayerRecord> out;
  auto add_fp = [&](const DenseLayer& l) {
    out.push_back({dim32(l.in_dim()), dim32(l.out_dim()), l.activation, &l, nullptr});
  };
  auto add_q = [&](const QDenseLayer& l) {
    out.push_back({dim32(l.in_dim()), dim32(l.out_dim()), l.activation, nullptr, &l});
  };
  std::visit(
      [&](const auto& model) {
        using M = std::decay_t<decltype(model)>;
        model.validate();
        if constexpr (std::is_same_v<M, FloatBundle>) {
          split = dim32(model.encoder.size());
          for (const auto& l : model.encoder) add_fp(l);
          for (const auto& l : model.classifier.layers) add_fp(l);
        } else if constexpr (std::is_same_v<M, QuantizedBundle>) {
          split = dim32(model.encoder.size());
          for (const auto& l : model.encoder) add_q(l);
          for (const auto& l : model.classifier) add_q(l);
        } else if constexpr (std::is_same_v<M, VaeModel>) {
          split = dim32(model.encoder_trunk.size());
          for (const auto& l : model.encoder_trunk) add_fp(l);
          add_fp(model.mu_head);
          add_fp(model.logvar_head);
          for (const auto& l : model.decoder) add_fp(l);
        } else {
          split = 0;
          for (const auto& l : model.layers) add_fp(l);
        }
      },
      m);
  return out;
}

void put_qparams(Writer& w, const QuantParams& p) {
  w.f32(p.scale);
  w.i16(static_cast<std::int16_t>(p.zero_point));
  w.i16(static_cast<std::int16_t>(p.q_min));
  w.i16(static_cast<std::int16_t>(p.q_max));
}

QuantParams get_qparams(Reader& r, std::size_t layer, const char* which) {
  QuantParams p;
  p.scale = r.f32();
  p.zero_point = r.i16();
  p.q_min = r.i16();
  p.q_max = r.i16();
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(Code::invalid_params,
                      "layer " + std::to_string(layer) + " " + which + " params: " + e.what());
  }
  return p;
}

std::size_t weight_bytes_of(std::uint64_t in, std::uint64_t out, Flavor f) {
  return static_cast<std::size_t>(in * out * (f == Flavor::int8 ? 1 : 4));
}

}  // namespace

FormatError::FormatError(Code code, const std::string& what)
    : std::runtime_error("QNM1 " + std::string(format_error_name(code)) + ": " + what), code_(code) {}

std::string_view format_error_name(FormatError::Code code) noexcept {
  switch (code) {
    case Code::bad_magic: return "bad magic";
    case Code::bad_version: return "unsupported version";
    case Code::bad_header: return "bad header";
    case Code::truncated: return "truncated";
    case Code::dimension_mismatch: return "dimension mismatch";
    case Code::unknown_activation: return "unknown activation";
    case Code::invalid_params: return "invalid quantization params";
    case Code::trailing_bytes: return "trailing bytes";
  }
  return "error";
}

Flavor flavor_of(const ModelArtifact& m) noexcept {
  return std::holds_alternative<QuantizedBundle>(m) ? Flavor::int8 : Flavor::fp32;
}

ModelKind kind_of(const ModelArtifact& m) noexcept {
  if (std::holds_alternative<VaeModel>(m)) return ModelKind::vae;
  if (std::holds_alternative<MlpModel>(m)) return ModelKind::mlp;
  return ModelKind::bundle;
}

std::vector<std::uint8_t> serialize(const ModelArtifact& m) {
  std::uint32_t split = 0;
  const auto layers = records_of(m, split);
  const Flavor flavor = flavor_of(m);

  std::vector<std::uint8_t> buf;
  Writer w(buf);
  for (auto c : kMagic) w.u8(c);
  w.u8(kQnmVersion);
  w.u8(static_cast<std::uint8_t>(flavor));
  w.u8(static_cast<std::uint8_t>(kind_of(m)));
  w.u8(0);
  w.u32(dim32(layers.size()));
  w.u32(split);

  std::uint64_t payload = 0;
  for (const auto& l : layers) {
    w.u32(l.in);
    w.u32(l.out);
    w.u8(static_cast<std::uint8_t>(l.activation));
    if (l.q) {
      put_qparams(w, l.q->weights.params());
      put_qparams(w, l.q->input_params);
      put_qparams(w, l.q->output_params);
    }
    payload += weight_bytes_of(l.in, l.out, flavor) + std::uint64_t{l.out} * 4;
  }
  w.u64(payload);

  for (const auto& l : layers) {
    if (l.q) {
      const auto raw = l.q->weights.raw();
      buf.insert(buf.end(), raw.begin(), raw.end());
      for (std::int32_t b : l.q->bias) w.i32(b);
    } else {
      for (float v : l.fp->weights.data()) w.f32(v);
      for (float v : l.fp->bias) w.f32(v);
    }
  }
  return buf;
}

ModelArtifact deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw FormatError(Code::bad_magic, "file does not start with \"QNM1\"");
  r.take(kMagic.size());
  r.need(kFixedHeader - kMagic.size(), "the header");
  const std::uint8_t version = r.u8();
  if (version != kQnmVersion)
    throw FormatError(Code::bad_version, "version " + std::to_string(version) + ", reader supports " +
                                             std::to_string(kQnmVersion));
  const std::uint8_t flavor_tag = r.u8();
  const std::uint8_t kind_tag = r.u8();
  const std::uint8_t reserved = r.u8();
  if (flavor_tag > 1) throw FormatError(Code::bad_header, "unknown flavor " + std::to_string(flavor_tag));
  if (kind_tag > 2) throw FormatError(Code::bad_header, "unknown model kind " + std::to_string(kind_tag));
  if (reserved != 0) throw FormatError(Code::bad_header, "reserved byte is not zero");
  const auto flavor = static_cast<Flavor>(flavor_tag);
  const auto kind = static_cast<ModelKind>(kind_tag);
  if (flavor == Flavor::int8 && kind != ModelKind::bundle)
    throw FormatError(Code::bad_header, "int8 artifacts must be inference bundles");

  const std::uint32_t count = r.u32();
  const std::uint32_t split = r.u32();
  if (count == 0) throw FormatError(Code::bad_header, "layer count is zero");
  const std::size_t desc_bytes = kDescriptorBytes + (flavor == Flavor::int8 ? 3 * kQParamBytes : 0);
  // Bound the descriptor table by the bytes actually present before allocating.
  r.need(static_cast<std::size_t>(count) * desc_bytes + kPayloadLengthBytes, "the layer descriptors");

  struct Desc {
    std::uint32_t in, out;
    Activation act;
    QuantParams w, x, y;
  };
  std::vector<Desc> descs(count);
  std::uint64_t expected = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Desc& d = descs[i];
    d.in = r.u32();
    d.out = r.u32();
    const std::uint8_t tag = r.u8();
    const auto act = activation_from_tag(tag);
    if (!act)
      throw FormatError(Code::unknown_activation,
                        "layer " + std::to_string(i) + " has activation tag " + std::to_string(tag));
    d.act = *act;
    if (d.in == 0 || d.out == 0)
      throw FormatError(Code::dimension_mismatch, "layer " + std::to_string(i) + " has a zero dimension");
    if (i > 0 && d.in != descs[i - 1].out &&
        !(kind == ModelKind::vae && (i == split + 1 || i == split + 2)))
      throw FormatError(Code::dimension_mismatch,
                        "layer " + std::to_string(i) + " takes " + std::to_string(d.in) +
                            " inputs but the previous layer emits " + std::to_string(descs[i - 1].out));
    if (flavor == Flavor::int8) {
      d.w = get_qparams(r, i, "weight");
      d.x = get_qparams(r, i, "input");
      d.y = get_qparams(r, i, "output");
    }
    expected += weight_bytes_of(d.in, d.out, flavor) + std::uint64_t{d.out} * 4;
  }
  const std::uint64_t payload = r.u64();
  if (payload != expected)
    throw FormatError(Code::dimension_mismatch, "payload length " + std::to_string(payload) +
                                                    " disagrees with the descriptors (" +
                                                    std::to_string(expected) + " bytes)");
  if (r.remaining() < payload)
    throw FormatError(Code::truncated, "payload has " + std::to_string(r.remaining()) + " of " +
                                           std::to_string(payload) + " bytes");
  if (r.remaining() > payload)
    throw FormatError(Code::trailing_bytes,
                      std::to_string(r.remaining() - payload) + " bytes after the payload");

  std::vector<DenseLayer> fp;
  std::vector<QDenseLayer> q;
  for (const Desc& d : descs) {
    const std::size_t n = std::size_t{d.in} * d.out;
    if (flavor == Flavor::int8) {
      QDenseLayer l;
      const auto raw = r.take(n);
      l.weights = QTensor(d.in, d.out, d.w, std::vector<std::uint8_t>(raw.begin(), raw.end()));
      l.bias.resize(d.out);
      for (auto& b : l.bias) b = r.i32();
      l.input_params = d.x;
      l.output_params = d.y;
      l.activation = d.act;
      q.push_back(std::move(l));
    } else {
      DenseLayer l{Matrix(d.in, d.out), std::vector<float>(d.out), d.act};
      for (auto& v : l.weights.data()) v = r.f32();
      for (auto& b : l.bias) b = r.f32();
      fp.push_back(std::move(l));
    }
  }

  auto structural = [](auto&& build) -> ModelArtifact {
    try {
      return build();
    } catch (const std::invalid_argument& e) {
      throw FormatError(Code::dimension_mismatch, e.what());
    }
  };
  auto split_check = [&](bool ok) {
    if (!ok) throw FormatError(Code::bad_header, "split " + std::to_string(split) + " is invalid for " +
                                                     std::to_string(count) + " layers");
  };

  switch (kind) {
    case ModelKind::bundle:
      split_check(split >= 1 && split < count);
      if (flavor == Flavor::int8) {
        return structural([&] {
          QuantizedBundle b;
          b.encoder.assign(q.begin(), q.begin() + split);
          b.classifier.assign(q.begin() + split, q.end());
          b.validate();
          return ModelArtifact(std::move(b));
        });
      }
      return structural([&] {
        FloatBundle b;
        b.encoder.assign(fp.begin(), fp.begin() + split);
        b.classifier.layers.assign(fp.begin() + split, fp.end());
        b.classifier.input_dim = b.classifier.layers.front().in_dim();
        b.classifier.n_classes = b.classifier.layers.back().out_dim();
        b.validate();
        return ModelArtifact(std::move(b));
      });
    case ModelKind::vae:
      split_check(std::uint64_t{split} + 3 <= count);
      return structural([&] {
        VaeModel v;
        v.encoder_trunk.assign(fp.begin(), fp.begin() + split);
        v.mu_head = fp[split];
        v.logvar_head = fp[split + 1];
        v.decoder.assign(fp.begin() + split + 2, fp.end());
        v.input_dim = v.encoder_trunk.empty() ? v.mu_head.in_dim() : v.encoder_trunk.front().in_dim();
        v.latent_dim = v.mu_head.out_dim();
        v.validate();
        return ModelArtifact(std::move(v));
      });
    case ModelKind::mlp:
      split_check(split == 0);
      return structural([&] {
        MlpModel m{std::move(fp), 0, 0};
        m.input_dim = m.layers.front().in_dim();
        m.n_classes = m.layers.back().out_dim();
        m.validate();
        return ModelArtifact(std::move(m));
      });
  }
  throw FormatError(Code::bad_header, "unreachable model kind");
}

std::size_t save(const ModelArtifact& m, const std::filesystem::path& path) {
  if (path.empty()) throw std::invalid_argument("save: empty path");
  const auto bytes = serialize(m);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("failed writing '" + tmp.string() + "'");
    }
  }
  std::filesystem::rename(tmp, path);
  return bytes.size();
}

ModelArtifact load(const std::filesystem::path& path) {
  if (path.empty()) throw std::invalid_argument("load: empty path");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model '" + path.string() + "'");
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || !std::equal(kMagic.begin(), kMagic.end(), magic.begin(),
                                      [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); }))
    throw FormatError(Code::bad_magic, "'" + path.string() + "' does not start with \"QNM1\"");
  const auto size = std::filesystem::file_size(path);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::uintmax_t>(in.gcount()) != size)
    throw std::runtime_error("short read on '" + path.string() + "'");
  return deserialize(bytes);
}

std::uintmax_t artifact_size(const std::filesystem::path& path) {
  if (path.empty()) throw std::invalid_argument("artifact_size: empty path");
  std::error_code ec;
  const auto n = std::filesystem::file_size(path, ec);
  if (ec) throw std::runtime_error("cannot stat '" + path.string() + "': " + ec.message());
  return n;
}

ArtifactStats artifact_stats(const ModelArtifact& m) {
  std::uint32_t split = 0;
  const auto layers = records_of(m, split);
  const Flavor flavor = flavor_of(m);
  ArtifactStats s;
  s.header_bytes = kFixedHeader + kPayloadLengthBytes;
  for (const auto& l : layers) {
    s.header_bytes += kDescriptorBytes;
    if (flavor == Flavor::int8) {
      s.header_bytes += 3 * kQParamBytes;
      s.qparam_bytes += 3 * kQParamBytes;
    }
    s.weight_bytes += weight_bytes_of(l.in, l.out, flavor);
    s.bias_bytes += std::size_t{l.out} * 4;
  }
  return s;
}

}  // namespace qvae
