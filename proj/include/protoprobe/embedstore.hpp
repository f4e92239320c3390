#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protoprobe/numerics.hpp"

namespace protoprobe {

// On-disk layout, all integers and floats little-endian:
//
//   header (36 bytes)
//     magic        4 bytes  "PEMB"
//     version      u32      1
//     dim          u32      D
//     grid_t       u32      S_t
//     grid_f       u32      S_f
//     classes      u32      C
//     record_count u64
//     dtype_code   u8       0 = float32
//     flags        u8       bit 0: records may carry an all-zero label vector
//     reserved     2 bytes  zero
//   records, fixed stride
//     id           u64
//     labels       ceil(C/8) bytes, class c at bit (c % 8) of byte (c / 8)
//     cls          D float32
//     tokens       D*S_t*S_f float32, row-major (D, S_t, S_f)

inline constexpr std::array<char, 4> kStoreMagic{'P', 'E', 'M', 'B'};
inline constexpr std::uint32_t kStoreVersion = 1;

struct StoreHeader {
  std::uint32_t version = kStoreVersion;
  std::uint32_t dim = 0;
  std::uint32_t grid_t = 0;
  std::uint32_t grid_f = 0;
  std::uint32_t classes = 0;
  std::uint64_t record_count = 0;
  std::uint8_t dtype_code = 0;
  bool allow_empty = false;

  static constexpr std::size_t kBytes = 36;

  std::size_t token_count() const { return std::size_t{grid_t} * grid_f; }
  std::size_t label_bytes() const { return (std::size_t{classes} + 7) / 8; }
  std::size_t record_bytes() const { return 8 + label_bytes() + 4 * std::size_t{dim} * (1 + token_count()); }
  std::uint64_t record_offset(std::uint64_t index) const { return kBytes + index * record_bytes(); }

  void validate() const;

  friend bool operator==(const StoreHeader&, const StoreHeader&) = default;
};

struct EmbeddingRecord {
  std::uint64_t id = 0;
  std::vector<std::uint8_t> labels;  // one 0/1 entry per class
  std::vector<float> cls;
  std::vector<float> tokens;  // (D, S_t, S_f) row-major

  /// (D, N) view of the token map, one column per (t, f) position.
  ConstMatrixMap<float> token_matrix(std::size_t dim) const {
    return ConstMatrixMap<float>(tokens.data(), static_cast<Index>(dim),
                                 static_cast<Index>(tokens.size() / dim));
  }
  ConstVectorMap<float> cls_vector() const {
    return ConstVectorMap<float>(cls.data(), static_cast<Index>(cls.size()));
  }
  std::size_t positive_count() const;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

/// A fully loaded store.
struct Store {
  StoreHeader header;
  std::vector<EmbeddingRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

/// Writes header + records. The header's record_count is taken from `records`.
/// Returns the number of bytes written.
std::uint64_t write_store(const std::filesystem::path& path, StoreHeader header,
                          std::span<const EmbeddingRecord> records);
inline std::uint64_t write_store(const std::filesystem::path& path, const Store& store) {
  return write_store(path, store.header, store.records);
}

StoreHeader read_header(const std::filesystem::path& path);
EmbeddingRecord read_record(const std::filesystem::path& path, std::uint64_t index);
Store load_store(const std::filesystem::path& path);

void pack_labels(std::span<const std::uint8_t> labels, std::span<std::uint8_t> out);
std::vector<std::uint8_t> unpack_labels(std::span<const std::uint8_t> packed, std::size_t classes);

// Synthetic planted-event generator.

struct SynthSpec {
  std::uint32_t classes = 10;
  std::uint32_t dim = 64;
  std::uint32_t grid_t = 16;
  std::uint32_t grid_f = 4;
  // Labels per clip are drawn uniformly from [classes_min, classes_max].
  std::uint32_t classes_min = 2;
  std::uint32_t classes_max = 4;
  std::uint32_t event_footprint = 1;
  double noise_sigma = 0.1;
  double correlation_rho = 0.5;
  std::uint64_t seed = 0;
  std::uint64_t record_count = 2000;
  // Distinguishes train/val/test draws that share the same class signatures.
  std::uint64_t split_stream = 1;

  void validate() const;
  StoreHeader header() const;
  std::string describe() const;
};

/// Unit class signature directions u_c as a (C, D) matrix; depends only on seed and dims.
Matrix<double> class_signatures(const SynthSpec& spec);

/// Each clip: a label set, u_c (+ noise) planted at `event_footprint` distinct token
/// positions per active class, correlated gaussian background elsewhere, cls = token mean.
/// Noise and background use per-component scale 1/sqrt(D) so vectors have unit-order norm.
std::vector<EmbeddingRecord> generate_synthetic(const SynthSpec& spec);
Store generate_synthetic_store(const SynthSpec& spec);

std::uint64_t split_stream_id(const std::string& split);

// Sidecar manifest, one `key=value` per line.

struct Manifest {
  std::string store_path;
  std::string provenance;
  std::vector<std::string> class_names;
  std::string split;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
std::filesystem::path manifest_path_for(const std::filesystem::path& store_path);

}  // namespace protoprobe
