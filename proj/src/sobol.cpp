#include "protoprobe/sobol.hpp"

#include <bit>
#include <string>

#include "protoprobe/errors.hpp"

namespace protoprobe {

namespace {

struct Primitive {
  int degree;
  std::uint32_t coeffs;
  std::array<std::uint32_t, 5> m;
};

// Rows 2..8 of the Joe-Kuo new-joe-kuo-6.21201 table (d, s, a, m_i).
constexpr std::array<Primitive, SobolSequence::kMaxDims - 1> kJoeKuo{{
    {1, 0, {1}},
    {2, 1, {1, 3}},
    {3, 1, {1, 3, 1}},
    {3, 2, {1, 1, 1}},
    {4, 1, {1, 1, 3, 3}},
    {4, 4, {1, 3, 5, 13}},
    {5, 2, {1, 1, 5, 5, 17}},
}};

}  // namespace

SobolSequence::SobolSequence(int dims) : dims_(dims) {
  if (dims < 1 || dims > kMaxDims) {
    throw ConfigError("sobol: dimension must lie in [1, " + std::to_string(kMaxDims) + "]");
  }
  // First coordinate: van der Corput, all m_k = 1.
  for (int k = 0; k < kBits; ++k) directions_[0][k] = 1u << (kBits - 1 - k);
  for (int d = 1; d < dims_; ++d) {
    const Primitive& p = kJoeKuo[static_cast<std::size_t>(d - 1)];
    auto& v = directions_[static_cast<std::size_t>(d)];
    for (int k = 0; k < p.degree; ++k) v[k] = p.m[static_cast<std::size_t>(k)] << (kBits - 1 - k);
    for (int k = p.degree; k < kBits; ++k) {
      std::uint32_t x = v[k - p.degree] ^ (v[k - p.degree] >> p.degree);
      for (int i = 1; i < p.degree; ++i) {
        if ((p.coeffs >> (p.degree - 1 - i)) & 1u) x ^= v[k - i];
      }
      v[k] = x;
    }
  }
}

std::vector<double> SobolSequence::next() {
  // Gray-code step: flip the direction number at the lowest zero bit of the previous index.
  const auto bit = std::countr_one(index_);
  if (bit >= kBits) throw RangeError("sobol: sequence exhausted");
  ++index_;
  std::vector<double> point(static_cast<std::size_t>(dims_));
  for (int d = 0; d < dims_; ++d) {
    state_[static_cast<std::size_t>(d)] ^= directions_[static_cast<std::size_t>(d)][static_cast<std::size_t>(bit)];
    point[static_cast<std::size_t>(d)] = static_cast<double>(state_[static_cast<std::size_t>(d)]) * 0x1.0p-32;
  }
  return point;
}

}  // namespace protoprobe
