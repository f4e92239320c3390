#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace protoprobe {

/// Unscrambled Sobol sequence with Joe-Kuo direction numbers, generated in Gray-code
/// order. The leading all-zero point is skipped, so the first point is (0.5, ..., 0.5).
class SobolSequence {
 public:
  static constexpr int kMaxDims = 8;
  static constexpr int kBits = 32;

  explicit SobolSequence(int dims = 2);

  std::vector<double> next();
  /// Number of points emitted so far.
  std::uint64_t index() const { return index_; }
  int dims() const { return dims_; }

 private:
  int dims_;
  std::uint64_t index_ = 0;
  std::array<std::array<std::uint32_t, kBits>, kMaxDims> directions_{};
  std::array<std::uint32_t, kMaxDims> state_{};
};

}  // namespace protoprobe
