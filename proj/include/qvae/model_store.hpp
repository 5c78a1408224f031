#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "qvae/bundle.hpp"
#include "qvae/nn.hpp"
#include "qvae/vae.hpp"

namespace qvae {

// QNM1 model container. Layout (little-endian, byte offsets in docs/qnm1-format.md):
//
//   "QNM1" | u8 version | u8 flavor | u8 kind | u8 reserved
//   u32 layer_count | u32 split
//   layer_count x { u32 in | u32 out | u8 activation | int8 only: 3 x qparams }
//   u64 payload_bytes | payload
//
// qparams = f32 scale | i16 zero_point | i16 q_min | i16 q_max (10 bytes), in the
// order weight, input, output. The payload holds, per layer, the row-major
// weights (f32 or 8-bit codes) followed by the bias (f32 or i32).

inline constexpr std::uint8_t kQnmVersion = 1;

enum class Flavor : std::uint8_t { fp32 = 0, int8 = 1 };
enum class ModelKind : std::uint8_t { bundle = 0, vae = 1, mlp = 2 };

using ModelArtifact = std::variant<FloatBundle, QuantizedBundle, VaeModel, MlpModel>;

Flavor flavor_of(const ModelArtifact& m) noexcept;
ModelKind kind_of(const ModelArtifact& m) noexcept;

class FormatError : public std::runtime_error {
 public:
  enum class Code {
    bad_magic,
    bad_version,
    bad_header,
    truncated,
    dimension_mismatch,
    unknown_activation,
    invalid_params,
    trailing_bytes,
  };

  FormatError(Code code, const std::string& what);
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

std::string_view format_error_name(FormatError::Code code) noexcept;

std::vector<std::uint8_t> serialize(const ModelArtifact& m);
/// Validates magic and version first, then every length against the
/// descriptors, before materializing any tensor.
ModelArtifact deserialize(std::span<const std::uint8_t> bytes);

/// Writes via a temporary file and rename; returns the exact byte count.
std::size_t save(const ModelArtifact& m, const std::filesystem::path& path);
ModelArtifact load(const std::filesystem::path& path);

/// Exact on-disk size; throws for an empty path or a missing file.
std::uintmax_t artifact_size(const std::filesystem::path& path);

struct ArtifactStats {
  std::size_t header_bytes = 0;     // magic through payload length, descriptors included
  std::size_t qparam_bytes = 0;     // inside the descriptors
  std::size_t weight_bytes = 0;     // weight matrices only
  std::size_t bias_bytes = 0;
  std::size_t payload_bytes() const noexcept { return weight_bytes + bias_bytes; }
  std::size_t total_bytes() const noexcept { return header_bytes + payload_bytes(); }
};

ArtifactStats artifact_stats(const ModelArtifact& m);

}  // namespace qvae
