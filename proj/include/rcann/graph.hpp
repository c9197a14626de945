#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rcann/error.hpp"
#include "rcann/io.hpp"
#include "rcann/vectors.hpp"

namespace rcann {

// Anything the search and build routines can walk.
template <class G>
concept GraphView = requires(const G& g, NodeId v, std::size_t level) {
  { g.size() } -> std::convertible_to<std::size_t>;
  { g.entry_point() } -> std::convertible_to<NodeId>;
  { g.max_level() } -> std::convertible_to<std::size_t>;
  { g.level(v) } -> std::convertible_to<std::size_t>;
  { g.neighbors(v, level) } -> std::convertible_to<std::span<const NodeId>>;
  { g.is_deleted(v) } -> std::convertible_to<bool>;
};

// Level for node `id`: floor(-ln(U) / ln(M)) with U drawn from (seed, id).
// Keyed by id so shards and the monolithic build agree on every node's level.
inline std::uint8_t draw_level(std::uint64_t seed, NodeId id, std::size_t max_degree) {
  Xoshiro256 rng(mix_seed(seed ^ 0x6c6576656cULL, id));
  const double u = 1.0 - rng.uniform();  // (0, 1]
  const double mult = 1.0 / std::log(static_cast<double>(std::max<std::size_t>(2, max_degree)));
  const double l = std::floor(-std::log(u) * mult);
  return static_cast<std::uint8_t>(std::min(l, 15.0));
}

// Soft-delete flags. Individual flag writes are atomic so readers may run
// concurrently with deletes; resize() is not.
class DeleteSet {
 public:
  explicit DeleteSet(std::size_t n = 0) { resize(n); }
  DeleteSet(const DeleteSet& o) { *this = o; }
  DeleteSet& operator=(const DeleteSet& o) {
    if (this == &o) return *this;
    n_ = o.n_;
    words_ = std::make_unique<std::atomic<std::uint64_t>[]>(word_count(n_));
    for (std::size_t i = 0; i < word_count(n_); ++i) words_[i].store(o.words_[i].load());
    return *this;
  }
  DeleteSet(DeleteSet&&) noexcept = default;
  DeleteSet& operator=(DeleteSet&&) noexcept = default;

  std::size_t size() const noexcept { return n_; }

  void resize(std::size_t n) {
    auto w = std::make_unique<std::atomic<std::uint64_t>[]>(word_count(n));
    for (std::size_t i = 0; i < word_count(n); ++i) w[i].store(0);
    for (std::size_t i = 0; i < std::min(word_count(n), word_count(n_)); ++i) {
      w[i].store(words_[i].load());
    }
    n_ = n;
    words_ = std::move(w);
    if (n_ % 64 != 0 && word_count(n_) > 0) {
      words_[word_count(n_) - 1] &= (std::uint64_t{1} << (n_ % 64)) - 1;
    }
  }

  bool test(NodeId id) const noexcept {
    return id < n_ && ((words_[id / 64].load(std::memory_order_relaxed) >> (id % 64)) & 1U) != 0;
  }

  // Returns true if the flag was newly set.
  bool set(NodeId id) {
    check(id);
    const std::uint64_t bit = std::uint64_t{1} << (id % 64);
    return (words_[id / 64].fetch_or(bit) & bit) == 0;
  }

  std::size_t count() const noexcept {
    std::size_t c = 0;
    for (std::size_t i = 0; i < word_count(n_); ++i) c += std::popcount(words_[i].load());
    return c;
  }

  friend bool operator==(const DeleteSet& a, const DeleteSet& b) {
    if (a.n_ != b.n_) return false;
    for (std::size_t i = 0; i < word_count(a.n_); ++i) {
      if (a.words_[i].load() != b.words_[i].load()) return false;
    }
    return true;
  }

  // deleted.bin: "LDL1" | u64 n | ceil(n/8) bytes, bit i of byte j flags node 8j+i
  void save(const std::filesystem::path& path) const {
    io::Writer w;
    w.magic("LDL1");
    w.u64(n_);
    for (std::size_t b = 0; b < (n_ + 7) / 8; ++b) {
      w.u8(static_cast<std::uint8_t>(words_[b / 8].load() >> (8 * (b % 8))));
    }
    w.save(path);
  }

  static DeleteSet load(const std::filesystem::path& path) {
    const auto data = io::read_file(path);
    io::Reader r(data);
    r.expect_magic("LDL1", "deleted header");
    const std::uint64_t n = r.u64("deleted header");
    const auto bytes = r.bytes((n + 7) / 8, "deleted bitset");
    r.expect_end("deleted bitset");
    DeleteSet d(n);
    for (std::size_t b = 0; b < bytes.size(); ++b) {
      d.words_[b / 8] |= static_cast<std::uint64_t>(bytes[b]) << (8 * (b % 8));
    }
    d.resize(n);  // clears any padding bits
    return d;
  }

 private:
  static std::size_t word_count(std::size_t n) { return (n + 63) / 64; }
  void check(NodeId id) const {
    if (id >= n_) throw InvalidArgument("node id " + std::to_string(id) + " out of range");
  }

  std::size_t n_ = 0;
  std::unique_ptr<std::atomic<std::uint64_t>[]> words_;
};

// Mutable adjacency lists used while building. links[v][level].
class AdjacencyGraph {
 public:
  AdjacencyGraph() = default;
  explicit AdjacencyGraph(std::size_t max_degree) : max_degree_(max_degree) {}

  std::size_t size() const noexcept { return levels_.size(); }
  std::size_t max_degree() const noexcept { return max_degree_; }
  void set_max_degree(std::size_t m) { max_degree_ = m; }
  NodeId entry_point() const noexcept { return entry_; }
  std::size_t max_level() const noexcept { return max_level_; }
  std::size_t level(NodeId v) const noexcept { return levels_[v]; }
  bool is_deleted(NodeId) const noexcept { return false; }

  std::span<const NodeId> neighbors(NodeId v, std::size_t level) const noexcept {
    if (level > levels_[v]) return {};
    return links_[v][level];
  }
  std::vector<NodeId>& links(NodeId v, std::size_t level) { return links_[v][level]; }

  // Appends a node; the first node, and any node above the current top level,
  // becomes the entry point.
  NodeId add_node(std::uint8_t level) {
    const auto id = static_cast<NodeId>(levels_.size());
    levels_.push_back(level);
    links_.emplace_back(static_cast<std::size_t>(level) + 1);
    if (id == 0 || level > max_level_) {
      entry_ = id;
      max_level_ = level;
    }
    return id;
  }

  void set_entry_point(NodeId v) {
    entry_ = v;
    max_level_ = levels_[v];
  }

  // Raises a node's level (graph merging); upper lists start empty.
  void raise_level(NodeId v, std::uint8_t level) {
    if (level <= levels_[v]) return;
    levels_[v] = level;
    links_[v].resize(static_cast<std::size_t>(level) + 1);
  }

  std::size_t edge_count(std::size_t level) const {
    std::size_t e = 0;
    for (std::size_t v = 0; v < size(); ++v) {
      if (level <= levels_[v]) e += links_[v][level].size();
    }
    return e;
  }

 private:
  std::size_t max_degree_ = 0;
  NodeId entry_ = 0;
  std::uint8_t max_level_ = 0;
  std::vector<std::uint8_t> levels_;
  std::vector<std::vector<std::vector<NodeId>>> links_;
};

struct CsrLevel {
  std::vector<NodeId> nodes;  // sorted members; empty at level 0 where all nodes are members
  std::vector<std::uint64_t> offsets;
  std::vector<NodeId> neighbors;

  friend bool operator==(const CsrLevel&, const CsrLevel&) = default;
};

// The persisted graph: one CSR block per hierarchy level plus delete flags.
class PrunedGraph {
 public:
  PrunedGraph() = default;

  std::size_t size() const noexcept { return levels_.size(); }
  std::size_t max_degree() const noexcept { return max_degree_; }
  NodeId entry_point() const noexcept { return entry_; }
  std::size_t max_level() const noexcept { return csr_.empty() ? 0 : csr_.size() - 1; }
  std::size_t level_count() const noexcept { return csr_.size(); }
  std::size_t level(NodeId v) const noexcept { return levels_[v]; }
  const CsrLevel& csr(std::size_t level) const { return csr_.at(level); }

  std::span<const NodeId> neighbors(NodeId v, std::size_t level) const noexcept {
    if (level >= csr_.size() || level > levels_[v]) return {};
    const CsrLevel& c = csr_[level];
    std::size_t slot = v;
    if (level > 0) {
      const auto it = std::lower_bound(c.nodes.begin(), c.nodes.end(), v);
      slot = static_cast<std::size_t>(it - c.nodes.begin());
    }
    return {c.neighbors.data() + c.offsets[slot], c.offsets[slot + 1] - c.offsets[slot]};
  }

  std::size_t degree(NodeId v) const noexcept { return neighbors(v, 0).size(); }

  bool is_deleted(NodeId v) const noexcept { return deleted_.test(v); }
  void mark_deleted(NodeId v) {
    if (v >= size()) throw InvalidArgument("mark_deleted: id " + std::to_string(v) + " out of range");
    deleted_.set(v);
  }
  const DeleteSet& deleted() const noexcept { return deleted_; }
  DeleteSet& deleted() noexcept { return deleted_; }
  double deleted_fraction() const {
    return size() == 0 ? 0.0 : static_cast<double>(deleted_.count()) / static_cast<double>(size());
  }

  static PrunedGraph freeze(const AdjacencyGraph& g) {
    PrunedGraph p;
    const std::size_t n = g.size();
    p.max_degree_ = g.max_degree();
    p.entry_ = g.entry_point();
    p.levels_.resize(n);
    for (std::size_t v = 0; v < n; ++v) p.levels_[v] = static_cast<std::uint8_t>(g.level(static_cast<NodeId>(v)));
    const std::size_t level_count = n == 0 ? 0 : g.max_level() + 1;
    p.csr_.resize(level_count);
    for (std::size_t l = 0; l < level_count; ++l) {
      CsrLevel& c = p.csr_[l];
      c.offsets.push_back(0);
      for (std::size_t v = 0; v < n; ++v) {
        if (g.level(static_cast<NodeId>(v)) < l) continue;
        if (l > 0) c.nodes.push_back(static_cast<NodeId>(v));
        const auto nb = g.neighbors(static_cast<NodeId>(v), l);
        c.neighbors.insert(c.neighbors.end(), nb.begin(), nb.end());
        c.offsets.push_back(c.neighbors.size());
      }
    }
    p.deleted_ = DeleteSet(n);
    return p;
  }

  AdjacencyGraph thaw() const {
    AdjacencyGraph g(max_degree_);
    for (std::size_t v = 0; v < size(); ++v) g.add_node(levels_[v]);
    for (std::size_t v = 0; v < size(); ++v) {
      for (std::size_t l = 0; l <= levels_[v] && l < csr_.size(); ++l) {
        const auto nb = neighbors(static_cast<NodeId>(v), l);
        g.links(static_cast<NodeId>(v), l).assign(nb.begin(), nb.end());
      }
    }
    if (size() > 0) g.set_entry_point(entry_);
    return g;
  }

  // Throws FormatError naming the offending level when any CSR invariant fails.
  void validate() const {
    const std::size_t n = size();
    if (n == 0) {
      if (!csr_.empty()) throw FormatError("graph", "levels present in an empty graph");
      return;
    }
    if (entry_ >= n) throw FormatError("graph header", "entry point out of range");
    if (csr_.empty()) throw FormatError("graph", "no base level");
    for (std::size_t l = 0; l < csr_.size(); ++l) {
      const std::string sec = "graph level " + std::to_string(l);
      const CsrLevel& c = csr_[l];
      const std::size_t members = l == 0 ? n : c.nodes.size();
      if (l > 0 && !std::is_sorted(c.nodes.begin(), c.nodes.end())) {
        throw FormatError(sec, "member list not sorted");
      }
      if (c.offsets.size() != members + 1 || c.offsets.front() != 0 ||
          c.offsets.back() != c.neighbors.size()) {
        throw FormatError(sec, "offsets do not cover the neighbor array");
      }
      std::vector<std::uint8_t> seen(n, 0);
      for (std::size_t s = 0; s < members; ++s) {
        const NodeId v = l == 0 ? static_cast<NodeId>(s) : c.nodes[s];
        if (v >= n) throw FormatError(sec, "member id out of range");
        if (c.offsets[s + 1] < c.offsets[s]) throw FormatError(sec, "offsets decrease");
        if (c.offsets[s + 1] - c.offsets[s] > max_degree_) {
          throw FormatError(sec, "node " + std::to_string(v) + " exceeds max degree");
        }
        for (std::uint64_t i = c.offsets[s]; i < c.offsets[s + 1]; ++i) {
          const NodeId u = c.neighbors[i];
          if (u >= n) throw FormatError(sec, "neighbor id out of range");
          if (u == v) throw FormatError(sec, "self loop at node " + std::to_string(v));
          if (levels_[u] < l) throw FormatError(sec, "neighbor below this level");
          if (seen[u] != 0) throw FormatError(sec, "duplicate neighbor at node " + std::to_string(v));
          seen[u] = 1;
        }
        for (std::uint64_t i = c.offsets[s]; i < c.offsets[s + 1]; ++i) seen[c.neighbors[i]] = 0;
      }
    }
    const std::size_t top = csr_.size() - 1;
    if (levels_[entry_] != top) throw FormatError("graph header", "entry point is not on the top level");
    if (deleted_.size() != n) throw FormatError("deleted", "flag count does not match node count");
  }

  // graph.bin: "LGR1" | u16 version | u64 n | u16 M | u16 level_count | u32 entry |
  //   per level: u64 members | [u32 member ids, levels > 0] | u64 offsets[members+1] | u32 neighbors
  void save(const std::filesystem::path& path) const {
    io::Writer w;
    w.magic("LGR1");
    w.u16(kVersion);
    w.u64(size());
    w.u16(static_cast<std::uint16_t>(max_degree_));
    w.u16(static_cast<std::uint16_t>(csr_.size()));
    w.u32(entry_);
    for (std::size_t l = 0; l < csr_.size(); ++l) {
      const CsrLevel& c = csr_[l];
      w.u64(l == 0 ? size() : c.nodes.size());
      for (NodeId v : c.nodes) w.u32(v);
      for (std::uint64_t o : c.offsets) w.u64(o);
      for (NodeId u : c.neighbors) w.u32(u);
    }
    w.save(path);
  }

  static PrunedGraph load(const std::filesystem::path& path) {
    const auto data = io::read_file(path);
    return parse(data);
  }

  static PrunedGraph parse(std::span<const std::uint8_t> data) {
    io::Reader r(data);
    r.expect_magic("LGR1", "graph header");
    const std::uint16_t version = r.u16("graph header");
    if (version != kVersion) {
      throw FormatError("graph header", "unsupported version " + std::to_string(version));
    }
    PrunedGraph p;
    const std::uint64_t n = r.u64("graph header");
    p.max_degree_ = r.u16("graph header");
    const std::uint16_t level_count = r.u16("graph header");
    p.entry_ = r.u32("graph header");
    r.need(0, "graph header");
    if (n > r.remaining()) throw FormatError("graph header", "node count exceeds file size");
    p.levels_.assign(n, 0);
    p.csr_.resize(level_count);
    for (std::size_t l = 0; l < level_count; ++l) {
      const std::string sec = "graph level " + std::to_string(l);
      CsrLevel& c = p.csr_[l];
      const std::uint64_t members = r.u64(sec);
      if (l == 0 && members != n) throw FormatError(sec, "base level must contain every node");
      if (members > n) throw FormatError(sec, "more members than nodes");
      if (l > 0) {
        r.need(members * 4, sec);
        c.nodes.resize(members);
        for (auto& v : c.nodes) {
          v = r.u32(sec);
          if (v >= n) throw FormatError(sec, "member id out of range");
          p.levels_[v] = static_cast<std::uint8_t>(l);
        }
      }
      r.need((members + 1) * 8, sec);
      c.offsets.resize(members + 1);
      for (auto& o : c.offsets) o = r.u64(sec);
      const std::uint64_t edges = c.offsets.back();
      if (edges > r.remaining() / 4) throw FormatError(sec, "truncated neighbor array");
      c.neighbors.resize(edges);
      for (auto& u : c.neighbors) u = r.u32(sec);
    }
    r.expect_end("graph trailer");
    p.deleted_ = DeleteSet(n);
    p.validate();
    return p;
  }

  // Bitwise equality over every persisted field, including delete flags.
  friend bool operator==(const PrunedGraph& a, const PrunedGraph& b) {
    return a.max_degree_ == b.max_degree_ && a.entry_ == b.entry_ && a.levels_ == b.levels_ &&
           a.csr_ == b.csr_ && a.deleted_ == b.deleted_;
  }

  static constexpr std::uint16_t kVersion = 1;

 private:
  std::size_t max_degree_ = 0;
  NodeId entry_ = 0;
  std::vector<std::uint8_t> levels_;
  std::vector<CsrLevel> csr_;
  DeleteSet deleted_;
};

struct GraphStats {
  std::size_t n = 0;
  std::size_t n_active = 0;
  double avg_degree = 0.0;  // base level out-degree
  std::size_t max_degree = 0;
  std::map<std::size_t, std::size_t> degree_histogram;  // base level
  std::size_t base_edges = 0;
  std::size_t upper_edges = 0;
  std::size_t metadata_bytes = 0;  // 4 bytes per stored neighbor id, all levels
  std::size_t base_bytes = 0;
  std::size_t upper_bytes = 0;
};

template <GraphView G>
GraphStats degree_stats(const G& g) {
  GraphStats s;
  s.n = g.size();
  for (std::size_t v = 0; v < g.size(); ++v) {
    const auto id = static_cast<NodeId>(v);
    const std::size_t d = g.neighbors(id, 0).size();
    ++s.degree_histogram[d];
    s.base_edges += d;
    s.max_degree = std::max(s.max_degree, d);
    for (std::size_t l = 1; l <= g.level(id); ++l) s.upper_edges += g.neighbors(id, l).size();
    if (!g.is_deleted(id)) ++s.n_active;
  }
  s.avg_degree = s.n == 0 ? 0.0 : static_cast<double>(s.base_edges) / static_cast<double>(s.n);
  s.base_bytes = s.base_edges * 4;
  s.upper_bytes = s.upper_edges * 4;
  s.metadata_bytes = s.base_bytes + s.upper_bytes;
  return s;
}

// Nodes whose base out-degree is at least `threshold`.
template <GraphView G>
std::size_t count_degree_at_least(const G& g, std::size_t threshold) {
  std::size_t c = 0;
  for (std::size_t v = 0; v < g.size(); ++v) {
    if (g.neighbors(static_cast<NodeId>(v), 0).size() >= threshold) ++c;
  }
  return c;
}

}  // namespace rcann
