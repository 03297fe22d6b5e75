#ifndef EVISURRO_NUMERIC_HPP_
#define EVISURRO_NUMERIC_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "evisurro/errors.hpp"

namespace evisurro {

// Output grid dimensions, slowest-varying first (D, H, W or H, W).
struct GridShape {
  std::vector<std::size_t> dims;

  std::size_t size() const {
    if (dims.empty()) return 0;
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           std::multiplies<>());
  }
  std::size_t rank() const { return dims.size(); }

  std::string to_string() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
    return os.str();
  }

  // Parses "32x32" or "16x16x16".
  static GridShape parse(const std::string& text) {
    GridShape g;
    std::stringstream ss(text);
    std::string tok;
    if (!text.empty() && text.back() == 'x') throw DomainError("bad grid shape '" + text + "'");
    while (std::getline(ss, tok, 'x')) {
      if (tok.empty()) throw DomainError("bad grid shape '" + text + "'");
      std::size_t pos = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(tok, &pos);
      } catch (const std::exception&) {
        throw DomainError("bad grid shape '" + text + "'");
      }
      if (pos != tok.size() || v == 0)
        throw DomainError("bad grid shape '" + text + "'");
      g.dims.push_back(v);
    }
    if (g.dims.empty()) throw DomainError("empty grid shape");
    return g;
  }

  friend bool operator==(const GridShape&, const GridShape&) = default;
};

// Pairwise summation; the result depends only on element order.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

inline double mean(std::span<const double> v) {
  return v.empty() ? 0.0 : pairwise_sum(v) / static_cast<double>(v.size());
}

// splitmix64 finalizer, used to derive independent per-member seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace evisurro

#endif  // EVISURRO_NUMERIC_HPP_
