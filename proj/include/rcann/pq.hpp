#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rcann/error.hpp"
#include "rcann/io.hpp"
#include "rcann/vectors.hpp"

namespace rcann {

inline constexpr std::size_t kPqCentroids = 256;

// Subspace count that gives roughly 100x compression of FP32 vectors:
// 4*dim bytes per vector against m_pq one-byte codes.
inline std::size_t default_pq_subspaces(std::size_t dim) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(dim / 25.6)));
}

struct PqModel {
  std::size_t dim = 0;
  std::size_t m_pq = 0;
  std::size_t padded_dim = 0;  // dim rounded up to a multiple of m_pq, zero filled
  Metric metric = Metric::l2;
  std::vector<float> codebooks;  // m_pq x 256 x sub_dim

  std::size_t sub_dim() const noexcept { return m_pq == 0 ? 0 : padded_dim / m_pq; }

  std::span<const float> centroid(std::size_t sub, std::size_t c) const noexcept {
    const std::size_t sd = sub_dim();
    return {codebooks.data() + (sub * kPqCentroids + c) * sd, sd};
  }
  std::span<float> centroid(std::size_t sub, std::size_t c) noexcept {
    const std::size_t sd = sub_dim();
    return {codebooks.data() + (sub * kPqCentroids + c) * sd, sd};
  }

  // The vector PQ actually quantizes: zero padded, and unit-normalized under
  // cosine so that inner products against centroids are cosine similarities.
  Vector prepare(std::span<const float> x) const {
    if (x.size() != dim) {
      throw InvalidArgument("pq: vector dim " + std::to_string(x.size()) + " != model dim " +
                            std::to_string(dim));
    }
    Vector p(padded_dim, 0.0f);
    std::copy(x.begin(), x.end(), p.begin());
    if (metric == Metric::cosine) normalize(p);
    return p;
  }

  friend bool operator==(const PqModel&, const PqModel&) = default;
};

using PqCode = std::vector<std::uint8_t>;

struct PqCodes {
  std::size_t m_pq = 0;
  std::vector<std::uint8_t> codes;  // n x m_pq

  std::size_t size() const noexcept { return m_pq == 0 ? 0 : codes.size() / m_pq; }
  std::span<const std::uint8_t> code(NodeId i) const noexcept {
    return {codes.data() + static_cast<std::size_t>(i) * m_pq, m_pq};
  }
  void append(std::span<const std::uint8_t> c) { codes.insert(codes.end(), c.begin(), c.end()); }
  void truncate(std::size_t n) {
    if (n < size()) codes.resize(n * m_pq);
  }

  friend bool operator==(const PqCodes&, const PqCodes&) = default;
};

namespace detail {

inline std::size_t nearest_centroid(const float* x, const float* centroids, std::size_t k,
                                    std::size_t sd) {
  std::size_t best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const float d = detail::sum_sq_diff(x, centroids + c * sd, sd);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

// k-means++ seeding followed by `iters` Lloyd steps. `points` is n x sd,
// `centroids` k x sd. When n < k the surplus centroids repeat earlier picks.
inline void kmeans(std::span<const float> points, std::size_t n, std::size_t sd, std::size_t k,
                   std::size_t iters, Xoshiro256& rng, float* centroids) {
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t chosen = static_cast<std::size_t>(rng.below(n));
  for (std::size_t c = 0; c < k; ++c) {
    std::copy_n(points.data() + chosen * sd, sd, centroids + c * sd);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = detail::sum_sq_diff(points.data() + i * sd, centroids + c * sd, sd);
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    if (c + 1 == k) break;
    if (total <= 0.0) {
      chosen = (chosen + 1) % n;
      continue;
    }
    const double target = rng.uniform() * total;
    double acc = 0.0;
    chosen = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      acc += d2[i];
      if (acc > target && d2[i] > 0.0) {
        chosen = i;
        break;
      }
    }
  }

  std::vector<double> sums(k * sd);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const float* x = points.data() + i * sd;
      const std::size_t c = nearest_centroid(x, centroids, k, sd);
      ++counts[c];
      for (std::size_t d = 0; d < sd; ++d) sums[c * sd + d] += x[d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its previous centroid
      for (std::size_t d = 0; d < sd; ++d) {
        centroids[c * sd + d] = static_cast<float>(sums[c * sd + d] / counts[c]);
      }
    }
  }
}

}  // namespace detail

struct PqTrainOptions {
  std::size_t m_pq = 0;  // 0 selects default_pq_subspaces(dim)
  std::size_t iters = 15;
  std::uint64_t seed = 0;
  Metric metric = Metric::l2;
  // Permits fewer than 256 samples (tiny indexes); surplus centroids duplicate.
  bool allow_small_sample = false;
};

inline PqModel pq_train(const Matrix& sample, const PqTrainOptions& opt) {
  const std::size_t n = sample.rows();
  const std::size_t dim = sample.dim();
  const std::size_t m_pq = opt.m_pq == 0 ? default_pq_subspaces(dim) : opt.m_pq;
  if (m_pq == 0 || m_pq > dim) {
    throw InvalidArgument("pq: subspace count must be in [1, dim]");
  }
  if (n == 0 || (n < kPqCentroids && !opt.allow_small_sample)) {
    throw BuildError("pq_train: need at least 256 training vectors, got " + std::to_string(n) +
                     "; use a smaller subspace count or more data");
  }
  PqModel model;
  model.dim = dim;
  model.m_pq = m_pq;
  model.padded_dim = (dim + m_pq - 1) / m_pq * m_pq;
  model.metric = opt.metric;
  const std::size_t sd = model.sub_dim();
  model.codebooks.assign(m_pq * kPqCentroids * sd, 0.0f);

  std::vector<Vector> prepared;
  prepared.reserve(n);
  for (std::size_t i = 0; i < n; ++i) prepared.push_back(model.prepare(sample.row(i)));

  std::vector<float> points(n * sd);
  for (std::size_t s = 0; s < m_pq; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(prepared[i].data() + s * sd, sd, points.data() + i * sd);
    }
    Xoshiro256 rng(mix_seed(opt.seed, s));
    detail::kmeans(points, n, sd, kPqCentroids, opt.iters, rng,
                   model.codebooks.data() + s * kPqCentroids * sd);
  }
  return model;
}

inline PqCode pq_encode(const PqModel& model, std::span<const float> x) {
  const Vector p = model.prepare(x);
  const std::size_t sd = model.sub_dim();
  PqCode code(model.m_pq);
  for (std::size_t s = 0; s < model.m_pq; ++s) {
    code[s] = static_cast<std::uint8_t>(detail::nearest_centroid(
        p.data() + s * sd, model.codebooks.data() + s * kPqCentroids * sd, kPqCentroids, sd));
  }
  return code;
}

// Reconstruction in the prepared (padded, possibly normalized) space, truncated to dim.
inline Vector pq_decode(const PqModel& model, std::span<const std::uint8_t> code) {
  Vector out(model.padded_dim);
  const std::size_t sd = model.sub_dim();
  for (std::size_t s = 0; s < model.m_pq; ++s) {
    const auto c = model.centroid(s, code[s]);
    std::copy(c.begin(), c.end(), out.begin() + static_cast<std::ptrdiff_t>(s * sd));
  }
  out.resize(model.dim);
  return out;
}

inline PqCodes pq_encode_all(const PqModel& model, const Matrix& xs) {
  PqCodes codes;
  codes.m_pq = model.m_pq;
  codes.codes.reserve(xs.rows() * model.m_pq);
  for (std::size_t i = 0; i < xs.rows(); ++i) codes.append(pq_encode(model, xs.row(i)));
  return codes;
}

// Per-query table of partial distances, m_pq x 256.
class AdcTable {
 public:
  AdcTable() = default;
  AdcTable(const PqModel& model, std::span<const float> query) : m_pq_(model.m_pq) {
    const Vector q = model.prepare(query);
    const std::size_t sd = model.sub_dim();
    table_.resize(m_pq_ * kPqCentroids);
    for (std::size_t s = 0; s < m_pq_; ++s) {
      const float* qs = q.data() + s * sd;
      for (std::size_t c = 0; c < kPqCentroids; ++c) {
        const float* cc = model.centroid(s, c).data();
        table_[s * kPqCentroids + c] = model.metric == Metric::l2
                                           ? detail::sum_sq_diff(qs, cc, sd)
                                           : -detail::dot(qs, cc, sd);
      }
    }
  }

  std::size_t m_pq() const noexcept { return m_pq_; }
  float entry(std::size_t sub, std::size_t c) const noexcept {
    return table_[sub * kPqCentroids + c];
  }

  // Sum of m_pq lookups in subspace order.
  float distance(std::span<const std::uint8_t> code) const noexcept {
    float acc = 0.0f;
    for (std::size_t s = 0; s < m_pq_; ++s) acc += table_[s * kPqCentroids + code[s]];
    return acc;
  }

  friend bool operator==(const AdcTable&, const AdcTable&) = default;

 private:
  std::size_t m_pq_ = 0;
  std::vector<float> table_;
};

inline AdcTable adc_build(const PqModel& model, std::span<const float> query) {
  return AdcTable(model, query);
}

inline float approx_distance(const AdcTable& table, std::span<const std::uint8_t> code) {
  return table.distance(code);
}

// pq.bin: "LPQ1" | u32 dim | u32 m_pq | u8 metric | u32 padded_dim | u64 n |
//         codebooks (m_pq*256*sub_dim f32 LE) | codes (n*m_pq bytes)
inline std::size_t pq_header_bytes(const PqModel& model) {
  return 4 + 4 + 4 + 1 + 4 + 8 + model.codebooks.size() * 4;
}

inline void save_pq(const std::filesystem::path& path, const PqModel& model, const PqCodes& codes) {
  io::Writer w;
  w.magic("LPQ1");
  w.u32(static_cast<std::uint32_t>(model.dim));
  w.u32(static_cast<std::uint32_t>(model.m_pq));
  w.u8(static_cast<std::uint8_t>(model.metric));
  w.u32(static_cast<std::uint32_t>(model.padded_dim));
  w.u64(codes.size());
  for (float f : model.codebooks) w.f32(f);
  w.bytes(codes.codes.data(), codes.codes.size());
  w.save(path);
}

inline void load_pq(const std::filesystem::path& path, PqModel& model, PqCodes& codes) {
  const auto data = io::read_file(path);
  io::Reader r(data);
  r.expect_magic("LPQ1", "pq header");
  model = PqModel{};
  model.dim = r.u32("pq header");
  model.m_pq = r.u32("pq header");
  const std::uint8_t metric = r.u8("pq header");
  if (metric > 2) throw FormatError("pq header", "unknown metric tag");
  model.metric = static_cast<Metric>(metric);
  model.padded_dim = r.u32("pq header");
  const std::uint64_t n = r.u64("pq header");
  if (model.m_pq == 0 || model.padded_dim % model.m_pq != 0 || model.padded_dim < model.dim ||
      model.padded_dim >= model.dim + model.m_pq) {
    throw FormatError("pq header", "inconsistent dim / subspace geometry");
  }
  const std::size_t cb = model.m_pq * kPqCentroids * model.sub_dim();
  r.need(cb * 4, "pq codebooks");
  model.codebooks.resize(cb);
  for (float& f : model.codebooks) f = r.f32("pq codebooks");
  if (!all_finite(model.codebooks)) throw FormatError("pq codebooks", "non-finite centroid");
  codes = PqCodes{};
  codes.m_pq = model.m_pq;
  const auto raw = r.bytes(n * model.m_pq, "pq codes");
  codes.codes.assign(raw.begin(), raw.end());
  r.expect_end("pq codes");
}

}  // namespace rcann
