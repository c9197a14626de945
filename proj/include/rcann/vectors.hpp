#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rcann/error.hpp"

namespace rcann {

using NodeId = std::uint32_t;
using Vector = std::vector<float>;

enum class Metric : std::uint8_t {
  l2 = 0,
  inner_product = 1,
  cosine = 2,
};

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::l2:
      return "l2";
    case Metric::inner_product:
      return "ip";
    case Metric::cosine:
      return "cosine";
  }
  return "unknown";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "l2") return Metric::l2;
  if (s == "ip" || s == "inner_product") return Metric::inner_product;
  if (s == "cosine") return Metric::cosine;
  throw InvalidArgument("unknown metric '" + std::string(s) + "' (expected l2, ip or cosine)");
}

// A (distance, id) pair. Ordering is lexicographic, which is the tie rule
// used everywhere: smaller distance first, then smaller id.
struct Neighbor {
  float distance;
  NodeId id;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
  }
  friend bool operator>(const Neighbor& a, const Neighbor& b) { return b < a; }
};

namespace detail {

// Eight independent lanes combined in a fixed order. The association order
// does not depend on the argument order, so both kernels are exactly symmetric.
inline float sum_sq_diff(const float* a, const float* b, std::size_t n) {
  std::array<float, 8> acc{};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) {
      const float d = a[i + j] - b[i + j];
      acc[j] += d * d;
    }
  }
  for (std::size_t j = 0; i < n; ++i, ++j) {
    const float d = a[i] - b[i];
    acc[j] += d * d;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

inline float dot(const float* a, const float* b, std::size_t n) {
  std::array<float, 8> acc{};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

}  // namespace detail

inline float squared_norm(std::span<const float> a) {
  return detail::dot(a.data(), a.data(), a.size());
}

// Smaller is better for every metric: L2 is squared Euclidean, inner product
// and cosine are negated similarities.
inline float distance_unchecked(const float* a, const float* b, std::size_t dim, Metric metric) {
  switch (metric) {
    case Metric::l2:
      return detail::sum_sq_diff(a, b, dim);
    case Metric::inner_product:
      return -detail::dot(a, b, dim);
    case Metric::cosine: {
      const float denom = std::sqrt(detail::dot(a, a, dim)) * std::sqrt(detail::dot(b, b, dim));
      if (denom == 0.0f) return 0.0f;
      return -(detail::dot(a, b, dim) / denom);
    }
  }
  return 0.0f;
}

inline float distance(std::span<const float> a, std::span<const float> b, Metric metric) {
  if (a.size() != b.size()) {
    throw InvalidArgument("distance: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  }
  return distance_unchecked(a.data(), b.data(), a.size(), metric);
}

inline void normalize(std::span<float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  if (s == 0.0) return;
  const double inv = 1.0 / std::sqrt(s);
  for (float& x : v) x = static_cast<float>(x * inv);
}

inline bool all_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Row-major block of equally sized vectors.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t dim) : dim_(dim), data_(rows * dim, 0.0f) {}

  std::size_t rows() const noexcept { return dim_ == 0 ? 0 : data_.size() / dim_; }
  std::size_t dim() const noexcept { return dim_; }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> row(std::size_t i) noexcept { return {data_.data() + i * dim_, dim_}; }
  std::span<const float> row(std::size_t i) const noexcept {
    return {data_.data() + i * dim_, dim_};
  }

  void resize(std::size_t rows) { data_.resize(rows * dim_, 0.0f); }
  void append(std::span<const float> v) { data_.insert(data_.end(), v.begin(), v.end()); }

  std::span<float> flat() noexcept { return data_; }
  std::span<const float> flat() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t dim_ = 0;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Pinned pseudo-random machinery. All randomness in the library flows through
// these three functions so fixtures reproduce bit-for-bit on any platform.
//
//   fnv1a64      FNV-1a, 64-bit (offset 0xcbf29ce484222325, prime 0x100000001b3)
//   splitmix64   Steele/Lea/Flood finalizer, used for seeding and mixing
//   Xoshiro256   xoshiro256** 1.0 (Blackman/Vigna), state seeded by splitmix64
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

class Xoshiro256 {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      s = z ^ (z >> 31);
    }
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound) by rejection; exact and platform independent,
  // unlike std::uniform_int_distribution.
  std::uint64_t below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t r;
    do {
      r = (*this)();
    } while (r >= limit);
    return r % bound;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<std::uint64_t, 4> state_{};
};

// Fisher-Yates with the pinned generator.
template <class T>
void shuffle(std::vector<T>& v, Xoshiro256& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

// Deterministic stand-in for an embedding model.
//
// seed      = mix_seed(fnv1a64(content), seed)
// value_i   = (sum of 12 uniforms from xoshiro256**) - 6      (Irwin-Hall normal)
// result    = values / ||values||_2
//
// Only integer operations, additions and one square root are involved, so the
// output is bit-identical across IEEE-754 platforms.
inline void synthetic_embed_into(std::string_view content, std::uint64_t seed,
                                 std::span<float> out) {
  Xoshiro256 rng(mix_seed(fnv1a64(content), seed));
  double sq = 0.0;
  std::vector<double> tmp(out.size());
  for (double& x : tmp) {
    double s = 0.0;
    for (int j = 0; j < 12; ++j) s += rng.uniform();
    x = s - 6.0;
    sq += x * x;
  }
  const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(tmp[i] * inv);
}

inline Vector synthetic_embed(std::string_view content, std::size_t dim, std::uint64_t seed) {
  if (dim < 2) throw InvalidArgument("synthetic_embed: dim must be >= 2");
  Vector v(dim);
  synthetic_embed_into(content, seed, v);
  return v;
}

// Parses "[x, y, z]" (commas or whitespace as separators).
inline Vector parse_vector_literal(std::string_view text) {
  std::size_t b = text.find('[');
  std::size_t e = text.rfind(']');
  if (b == std::string_view::npos || e == std::string_view::npos || e < b) {
    throw InvalidArgument("not a bracketed vector literal");
  }
  Vector out;
  std::string body(text.substr(b + 1, e - b - 1));
  for (char& c : body) {
    if (c == ',') c = ' ';
  }
  const char* p = body.c_str();
  char* end = nullptr;
  while (true) {
    while (*p == ' ' || *p == '\t') ++p;
    if (*p == '\0') break;
    const float x = std::strtof(p, &end);
    if (end == p) throw InvalidArgument("bad number in vector literal");
    out.push_back(x);
    p = end;
  }
  if (!all_finite(out)) throw InvalidArgument("vector literal contains non-finite values");
  return out;
}

inline bool is_vector_literal(std::string_view text) {
  const auto first = text.find_first_not_of(" \t");
  return first != std::string_view::npos && text[first] == '[';
}

}  // namespace rcann
