#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "rcann/rcann.hpp"

namespace testing_support {

using namespace rcann;
namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("rcann-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// Standard fixture: synthetic provider dim 32 seed 7, text items and queries.
inline constexpr std::size_t kDim = 32;
inline constexpr std::uint64_t kProviderSeed = 7;

inline std::string item_text(std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "fixture item %05zu", i);
  return buf;
}

inline std::string query_text(std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "fixture query %03zu", i);
  return buf;
}

inline ItemStore fixture_items(std::size_t n, std::size_t first = 0) {
  ItemStore s;
  for (std::size_t i = first; i < first + n; ++i) s.append(item_text(i));
  return s;
}

inline Matrix embed_rows(const ItemStore& items, std::size_t dim = kDim, std::uint64_t seed = kProviderSeed) {
  Matrix m(0, dim);
  for (std::size_t i = 0; i < items.size(); ++i) m.append(synthetic_embed(items.get(static_cast<NodeId>(i)), dim, seed));
  return m;
}

inline Matrix fixture_queries(std::size_t nq, std::size_t dim = kDim, std::uint64_t seed = kProviderSeed) {
  Matrix m(0, dim);
  for (std::size_t i = 0; i < nq; ++i) m.append(synthetic_embed(query_text(i), dim, seed));
  return m;
}

inline BuildParams fixture_params() {
  BuildParams p;
  p.seed = 1;
  p.M = 16;
  p.m = 3;
  p.efc = 100;
  p.beta = 2.0;
  p.pq_subspaces = 8;
  return p;
}

// Embeds by looking up rows of a matrix; item ids index the rows.
class TableProvider final : public EmbeddingProvider {
 public:
  explicit TableProvider(const Matrix& rows) : rows_(&rows) { cfg_.dim = rows.dim(); }
  const ProviderConfig& config() const override { return cfg_; }
  void embed_batch(std::span<const EmbeddingRequest> r, std::span<float> out) override {
    for (std::size_t i = 0; i < r.size(); ++i) {
      const auto row = rows_->row(r[i].item_id);
      std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(i * cfg_.dim));
    }
    calls += r.size();
  }
  std::size_t calls = 0;

 private:
  const Matrix* rows_;
  ProviderConfig cfg_;
};

// Wraps a provider and fails once `budget` rows have been embedded.
class FailingProvider final : public EmbeddingProvider {
 public:
  FailingProvider(EmbeddingProvider& inner, std::size_t budget) : inner_(&inner), budget_(budget) {}
  const ProviderConfig& config() const override { return inner_->config(); }
  void embed_batch(std::span<const EmbeddingRequest> r, std::span<float> out) override {
    if (used_ + r.size() > budget_) throw TransportError("provider down", 0);
    used_ += r.size();
    inner_->embed_batch(r, out);
  }

 private:
  EmbeddingProvider* inner_;
  std::size_t budget_;
  std::size_t used_ = 0;
};

// Independent oracles: double-precision arithmetic, straightforward loops.
inline double oracle_distance(std::span<const float> a, std::span<const float> b, Metric m) {
  double dot = 0, na = 0, nb = 0, l2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
    l2 += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  }
  switch (m) {
    case Metric::l2:
      return l2;
    case Metric::inner_product:
      return -dot;
    case Metric::cosine:
      return -dot / std::sqrt(na * nb);
  }
  return 0;
}

inline std::vector<NodeId> oracle_topk(const Matrix& data, std::span<const float> q, std::size_t k, Metric m,
                                       const std::vector<bool>& deleted = {}) {
  std::vector<std::pair<double, NodeId>> all;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    if (!deleted.empty() && deleted[i]) continue;
    all.emplace_back(oracle_distance(q, data.row(i), m), static_cast<NodeId>(i));
  }
  std::sort(all.begin(), all.end());
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i) out.push_back(all[i].second);
  return out;
}

inline double oracle_recall(const std::vector<NodeId>& got, const std::vector<NodeId>& truth) {
  std::size_t hit = 0;
  for (NodeId t : truth) hit += std::count(got.begin(), got.end(), t) > 0 ? 1 : 0;
  return double(hit) / double(truth.size());
}

inline std::vector<std::uint8_t> file_bytes(const fs::path& p) { return io::read_file(p); }

// Path of a built tool, injected by CMake.
inline std::string tool_path(const char* name) { return std::string(RCANN_TOOLS_DIR) + "/" + name; }

}  // namespace testing_support
