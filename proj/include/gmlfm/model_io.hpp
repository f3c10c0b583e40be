#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmlfm/data.hpp"
#include "gmlfm/model.hpp"

namespace gmlfm::io {

inline constexpr std::uint32_t kModelFormatVersion = 1;

class ModelFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything needed to score new inputs with a trained model.
struct ModelBundle {
  model::ModelParams params;
  model::DistanceSpec spec;
  data::FieldLayout layout;
  data::Vocabulary vocab;
  std::optional<data::ItemCatalog> catalog;
  /// Free text, typically the training config echo.
  std::string metadata;
};

/// Layout of the file, all integers and doubles little-endian:
///   magic "GMLFMMDL", u32 version, u32 k, u64 n, u32 layers, u8 kind,
///   u8 use_weight, metadata string, field layout, vocabulary, item catalog,
///   f64 arrays w0, w[n], V[n*k], h[k], L[k*k] (mahalanobis only),
///   then W_l[k*k], b_l[k] per layer, and a u32 CRC-32 trailer over all
///   preceding bytes.
std::vector<std::uint8_t> encode_model(const ModelBundle& bundle);
ModelBundle decode_model(const std::vector<std::uint8_t>& bytes);

void save_model(const std::filesystem::path& path, const ModelBundle& bundle);

/// Verifies the checksum, then the optional expected n and k.
ModelBundle load_model(const std::filesystem::path& path,
                       std::optional<std::size_t> expected_n = std::nullopt,
                       std::optional<std::size_t> expected_k = std::nullopt);

}  // namespace gmlfm::io
