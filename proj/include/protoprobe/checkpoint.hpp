#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "protoprobe/heads.hpp"

namespace protoprobe {

// Layout, little-endian:
//   magic "PCKP", u32 version (1)
//   kind name (u32 length + bytes)
//   u32 D, S_t, S_f, C
//   u32 mlp_hidden, conv_kernel, conv_hidden, mhca_heads, ep_queries, abmilp_queries, prototypes_per_class
//   u32 tensor count; per tensor: name (u32 length + bytes), u32 rank, u32 dims..., float32 data
//   protobin only: u32 J, u32 D, u64 byte count, sign-packed prototypes (see pack_prototypes)

std::vector<char> encode_checkpoint(const Head<float>& head);
std::unique_ptr<Head<float>> decode_checkpoint(const std::vector<char>& bytes, const std::string& context = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const Head<float>& head);
std::unique_ptr<Head<float>> load_checkpoint(const std::filesystem::path& path);

/// The +-1 deployment prototypes of a protobin checkpoint, read from the packed blob.
Matrix<float> load_packed_prototypes(const std::filesystem::path& path);

}  // namespace protoprobe
