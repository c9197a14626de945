#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "rcann/builder.hpp"
#include "rcann/error.hpp"
#include "rcann/graph.hpp"
#include "rcann/io.hpp"
#include "rcann/item_store.hpp"
#include "rcann/pq.hpp"
#include "rcann/provider.hpp"
#include "rcann/vectors.hpp"

namespace rcann {

// Adjacency-list overlay over a frozen graph. Lists are copied out of the CSR
// the first time they are written; appended nodes live only here.
//
// A transaction journals every list it touches so a failed add can be undone.
class OverlayGraph {
 public:
  OverlayGraph() = default;
  explicit OverlayGraph(PrunedGraph base) : base_(std::move(base)) {
    const std::size_t n = base_.size();
    levels_.resize(n);
    for (std::size_t v = 0; v < n; ++v) levels_[v] = static_cast<std::uint8_t>(base_.level(static_cast<NodeId>(v)));
    patched_.assign(n, 0);
    lists_.resize(n);
    deleted_ = base_.deleted();
    entry_ = base_.entry_point();
    max_level_ = n == 0 ? 0 : base_.max_level();
    max_degree_ = base_.max_degree();
  }

  std::size_t size() const noexcept { return levels_.size(); }
  std::size_t base_size() const noexcept { return base_.size(); }
  std::size_t max_degree() const noexcept { return max_degree_; }
  void set_max_degree(std::size_t m) { max_degree_ = m; }
  NodeId entry_point() const noexcept { return entry_; }
  std::size_t max_level() const noexcept { return max_level_; }
  std::size_t level(NodeId v) const noexcept { return levels_[v]; }

  std::span<const NodeId> neighbors(NodeId v, std::size_t level) const noexcept {
    if (level > levels_[v]) return {};
    if (patched_[v] != 0) return lists_[v][level];
    return base_.neighbors(v, level);
  }

  std::vector<NodeId>& links(NodeId v, std::size_t level) {
    touch(v);
    return lists_[v][level];
  }

  NodeId add_node(std::uint8_t level) {
    const auto id = static_cast<NodeId>(size());
    levels_.push_back(level);
    patched_.push_back(1);
    lists_.emplace_back(static_cast<std::size_t>(level) + 1);
    deleted_.resize(size());
    if (id == 0 || level > max_level_) {
      entry_ = id;
      max_level_ = level;
    }
    return id;
  }

  bool is_deleted(NodeId v) const noexcept { return deleted_.test(v); }
  bool mark_deleted(NodeId v) {
    if (v >= size()) throw InvalidArgument("delete: id " + std::to_string(v) + " out of range");
    return deleted_.set(v);
  }
  std::size_t deleted_count() const { return deleted_.count(); }
  double deleted_fraction() const {
    return size() == 0 ? 0.0 : static_cast<double>(deleted_.count()) / static_cast<double>(size());
  }

  void begin() {
    txn_ = Txn{size(), entry_, max_level_, {}};
  }
  void commit() { txn_.reset(); }
  void rollback() {
    if (!txn_) return;
    for (auto& [v, saved] : txn_->saved) {
      patched_[v] = saved.patched;
      lists_[v] = std::move(saved.lists);
    }
    levels_.resize(txn_->size);
    patched_.resize(txn_->size);
    lists_.resize(txn_->size);
    deleted_.resize(txn_->size);
    entry_ = txn_->entry;
    max_level_ = txn_->max_level;
    txn_.reset();
  }

  // Refreezes into CSR, keeping delete flags.
  PrunedGraph compact() const {
    AdjacencyGraph g(max_degree_);
    for (std::size_t v = 0; v < size(); ++v) g.add_node(levels_[v]);
    for (std::size_t v = 0; v < size(); ++v) {
      for (std::size_t l = 0; l <= levels_[v]; ++l) {
        const auto nb = neighbors(static_cast<NodeId>(v), l);
        g.links(static_cast<NodeId>(v), l).assign(nb.begin(), nb.end());
      }
    }
    if (size() > 0) g.set_entry_point(entry_);
    PrunedGraph out = PrunedGraph::freeze(g);
    for (std::size_t v = 0; v < size(); ++v) {
      if (deleted_.test(static_cast<NodeId>(v))) out.mark_deleted(static_cast<NodeId>(v));
    }
    return out;
  }

 private:
  struct Saved {
    std::uint8_t patched = 0;
    std::vector<std::vector<NodeId>> lists;
  };
  struct Txn {
    std::size_t size = 0;
    NodeId entry = 0;
    std::size_t max_level = 0;
    std::unordered_map<NodeId, Saved> saved;
  };

  void touch(NodeId v) {
    if (txn_ && v < txn_->size && !txn_->saved.contains(v)) {
      txn_->saved.emplace(v, Saved{patched_[v], lists_[v]});
    }
    if (patched_[v] != 0) return;
    lists_[v].resize(static_cast<std::size_t>(levels_[v]) + 1);
    for (std::size_t l = 0; l <= levels_[v]; ++l) {
      const auto nb = base_.neighbors(v, l);
      lists_[v][l].assign(nb.begin(), nb.end());
    }
    patched_[v] = 1;
  }

  PrunedGraph base_;
  std::vector<std::uint8_t> levels_;
  std::vector<std::uint8_t> patched_;
  std::vector<std::vector<std::vector<NodeId>>> lists_;
  DeleteSet deleted_;
  NodeId entry_ = 0;
  std::size_t max_level_ = 0;
  std::size_t max_degree_ = 0;
  std::optional<Txn> txn_;
};

enum class AddVariant : std::uint8_t { naive, cached, simplified };

inline std::string to_string(AddVariant v) {
  switch (v) {
    case AddVariant::naive: return "naive";
    case AddVariant::cached: return "cached";
    case AddVariant::simplified: return "simplified";
  }
  return "?";
}

inline AddVariant parse_add_variant(std::string_view s) {
  if (s == "naive") return AddVariant::naive;
  if (s == "cached") return AddVariant::cached;
  if (s == "simplified") return AddVariant::simplified;
  throw InvalidArgument("unknown add variant '" + std::string(s) + "'");
}

struct AddCounters {
  std::size_t distance_computations = 0;
  std::size_t embedding_computations = 0;

  AddCounters& operator+=(const AddCounters& o) {
    distance_computations += o.distance_computations;
    embedding_computations += o.embedding_computations;
    return *this;
  }
};

// Pairwise distances kept across adds, with byte accounting.
class PairCache {
 public:
  static constexpr std::size_t kEntryBytes = 16;

  std::optional<float> find(NodeId a, NodeId b) const {
    const auto it = map_.find(key(a, b));
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  void put(NodeId a, NodeId b, float d) { map_.emplace(key(a, b), d); }
  void clear() { map_.clear(); }
  std::size_t size() const { return map_.size(); }
  std::size_t bytes() const { return map_.size() * kEntryBytes; }

 private:
  static std::uint64_t key(NodeId a, NodeId b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(a) << 32) | b;
  }
  std::unordered_map<std::uint64_t, float> map_;
};

// In-memory index state that mutations act on.
struct IndexData {
  ItemStore items;
  PqModel pq;
  PqCodes codes;
  OverlayGraph graph;
  Metric metric = Metric::cosine;
  std::size_t M = 16;
  std::size_t efc = 100;
  std::uint64_t seed = 0;
};

namespace detail {

// Distances for one add. Existing nodes' embeddings are recomputed through the
// provider at most once per add; the new node is addressed by its own id.
class AddPolicy {
 public:
  AddPolicy(const IndexData& index, EmbeddingProvider& provider, NodeId new_id,
            std::span<const float> new_vec, bool memoize, PairCache* global)
      : index_(&index), provider_(&provider), new_id_(new_id), memoize_(memoize),
        global_(global), new_vec_(new_vec.begin(), new_vec.end()) {}

  float pair(NodeId a, NodeId b) {
    if (in_shrink_) {
      if (const auto it = table_.find(a, b)) return *it;
    }
    if (memoize_) {
      if (const auto it = local_.find(a, b)) return *it;
      if (global_ != nullptr) {
        if (const auto it = global_->find(a, b)) return *it;
      }
    }
    const float* x = vec(a);
    const float* y = vec(b);
    const float d = distance_unchecked(x, y, new_vec_.size(), index_->metric);
    ++counters.distance_computations;
    if (memoize_) {
      local_.put(a, b, d);
      if (global_ != nullptr) global_->put(a, b, d);
    }
    return d;
  }

  // Without memoization every shrink starts from nothing: all pairwise
  // distances among its candidates are evaluated up front.
  void before_shrink(std::span<const Neighbor> cand) {
    if (memoize_) return;
    table_.clear();
    for (std::size_t i = 0; i < cand.size(); ++i) {
      for (std::size_t j = i + 1; j < cand.size(); ++j) {
        const float d = distance_unchecked(vec(cand[i].id), vec(cand[j].id), new_vec_.size(),
                                           index_->metric);
        ++counters.distance_computations;
        table_.put(cand[i].id, cand[j].id, d);
      }
    }
    in_shrink_ = true;
  }
  void after_shrink() {
    in_shrink_ = false;
    table_.clear();
  }

  AddCounters counters;

 private:
  const float* vec(NodeId v) {
    if (v == new_id_) return new_vec_.data();
    auto it = embeddings_.find(v);
    if (it == embeddings_.end()) {
      Vector x(new_vec_.size());
      const EmbeddingRequest req = index_->items.request(v);
      provider_->embed_batch(std::span<const EmbeddingRequest>(&req, 1), x);
      ++counters.embedding_computations;
      it = embeddings_.emplace(v, std::move(x)).first;
    }
    return it->second.data();
  }

  const IndexData* index_;
  EmbeddingProvider* provider_;
  NodeId new_id_;
  bool memoize_;
  PairCache* global_;
  Vector new_vec_;
  PairCache local_;
  PairCache table_;
  bool in_shrink_ = false;
  std::unordered_map<NodeId, Vector> embeddings_;
};

}  // namespace detail

struct AddResult {
  NodeId id = 0;
  AddCounters counters;
};

// Inserts an item into the overlay. Every new node is capped at M. When
// `embedding` is empty the item is embedded through the provider. On any
// failure the index is left exactly as before.
inline AddResult add_node(IndexData& index, std::string_view payload, AddVariant variant,
                          EmbeddingProvider& provider, std::span<const float> embedding = {},
                          PairCache* global_cache = nullptr) {
  const std::size_t n0 = index.items.size();
  if (index.graph.size() != n0) {
    throw Error("add: graph and item store disagree (pending buffered items?)");
  }
  if (provider.dim() != index.pq.dim) throw InvalidArgument("add: provider dim != index dim");
  AddResult res;
  res.id = static_cast<NodeId>(n0);
  index.graph.begin();
  try {
    index.items.append(payload);
    Vector x;
    if (embedding.empty()) {
      x = rcann::embed_batch(provider, std::vector<EmbeddingRequest>{index.items.request(res.id)}).front();
      ++res.counters.embedding_computations;
    } else {
      if (embedding.size() != provider.dim()) throw InvalidArgument("add: embedding dim mismatch");
      x.assign(embedding.begin(), embedding.end());
    }
    if (!all_finite(x)) throw BuildError("add: embedding is not finite");
    if (index.metric == Metric::cosine && squared_norm(x) == 0.0f) {
      throw BuildError("add: zero embedding is undefined under cosine");
    }
    index.codes.append(pq_encode(index.pq, x));

    const bool memo = variant != AddVariant::naive;
    detail::AddPolicy policy(index, provider, res.id, x, memo,
                             variant == AddVariant::naive ? nullptr : global_cache);
    InsertCaps caps{index.M, index.M, index.M};
    InsertScratch scratch;
    Xoshiro256 rng(mix_seed(index.seed, res.id));
    const SelectRule rule = variant == AddVariant::simplified ? SelectRule::random : SelectRule::rng;
    insert_node(index.graph, draw_level(index.seed, res.id, index.M), caps,
                std::max(index.efc, index.M), policy, rule, &rng, scratch);
    res.counters += policy.counters;
  } catch (...) {
    index.graph.rollback();
    index.items.truncate(n0);
    index.codes.truncate(n0);
    throw;
  }
  index.graph.commit();
  return res;
}

struct DeleteResult {
  bool newly_deleted = false;
  double deleted_fraction = 0.0;
  bool advisory = false;  // threshold crossed by this delete
};

inline constexpr double kRebuildAdvisoryThreshold = 0.05;

inline DeleteResult delete_node(IndexData& index, NodeId id,
                                double threshold = kRebuildAdvisoryThreshold) {
  const double before = index.graph.deleted_fraction();
  DeleteResult r;
  r.newly_deleted = index.graph.mark_deleted(id);
  r.deleted_fraction = index.graph.deleted_fraction();
  r.advisory = before < threshold && r.deleted_fraction >= threshold - 1e-12;
  return r;
}

// Delayed insertion: items are embedded once and held here; searches scan
// the buffer by brute force. drain() inserts them with the simplified add.
class AddBuffer {
 public:
  AddBuffer(std::size_t dim, std::size_t byte_budget) : dim_(dim), budget_(byte_budget) {}

  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t byte_budget() const noexcept { return budget_; }
  std::size_t embedding_bytes() const noexcept { return ids_.size() * dim_ * sizeof(float); }
  std::size_t bytes() const noexcept { return embedding_bytes() + cache_.bytes(); }
  const std::vector<NodeId>& ids() const noexcept { return ids_; }
  std::span<const float> vector(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
  PairCache& cache() noexcept { return cache_; }

  // Appends items to the store (ids continue the item sequence) and embeds
  // them. Flushes first when the new entries would not fit the budget.
  std::vector<NodeId> add(IndexData& index, std::span<const std::string> payloads,
                          EmbeddingProvider& provider, AddCounters* counters = nullptr) {
    std::vector<NodeId> out;
    if (payloads.empty()) return out;
    if (provider.dim() != dim_) throw InvalidArgument("buffer: provider dim mismatch");
    const std::size_t incoming = payloads.size() * dim_ * sizeof(float);
    if (!empty() && bytes() + incoming > budget_) drain(index, provider, counters);
    const std::size_t n0 = index.items.size();
    std::vector<EmbeddingRequest> reqs;
    for (const auto& p : payloads) index.items.append(p);
    for (std::size_t i = 0; i < payloads.size(); ++i) reqs.push_back(index.items.request(static_cast<NodeId>(n0 + i)));
    std::vector<float> emb(payloads.size() * dim_);
    try {
      embed_all(provider, reqs, emb);
    } catch (...) {
      index.items.truncate(n0);
      throw;
    }
    for (std::size_t i = 0; i < payloads.size(); ++i) {
      const auto id = static_cast<NodeId>(n0 + i);
      ids_.push_back(id);
      out.push_back(id);
    }
    vectors_.insert(vectors_.end(), emb.begin(), emb.end());
    if (counters != nullptr) counters->embedding_computations += payloads.size();
    return out;
  }

  // Inserts every pending item in order. The item rows already exist, so they
  // are re-attached around each add.
  void drain(IndexData& index, EmbeddingProvider& provider, AddCounters* counters = nullptr) {
    if (empty()) return;
    std::vector<std::string> payloads;
    for (NodeId id : ids_) payloads.emplace_back(index.items.get(id));
    index.items.truncate(ids_.front());
    std::size_t done = 0;
    try {
      for (; done < ids_.size(); ++done) {
        const AddResult r = add_node(index, payloads[done], AddVariant::simplified, provider,
                                     vector(done), &cache_);
        if (counters != nullptr) *counters += r.counters;
        if (cache_.bytes() + embedding_bytes() > budget_) cache_.clear();
      }
    } catch (...) {
      for (std::size_t i = done; i < payloads.size(); ++i) index.items.append(payloads[i]);
      ids_.erase(ids_.begin(), ids_.begin() + static_cast<std::ptrdiff_t>(done));
      vectors_.erase(vectors_.begin(), vectors_.begin() + static_cast<std::ptrdiff_t>(done * dim_));
      throw;
    }
    ids_.clear();
    vectors_.clear();
    cache_.clear();
  }

  // Brute-force top-k over buffered items (all are active).
  std::vector<Neighbor> scan(std::span<const float> q, std::size_t k, Metric metric,
                             const std::function<bool(NodeId)>& active = {}) const {
    std::vector<Neighbor> all;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (active && !active(ids_[i])) continue;
      all.push_back({distance_unchecked(q.data(), vectors_.data() + i * dim_, dim_, metric), ids_[i]});
    }
    const std::size_t take = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end());
    all.resize(take);
    return all;
  }

 private:
  std::size_t dim_;
  std::size_t budget_;
  std::vector<NodeId> ids_;
  std::vector<float> vectors_;
  PairCache cache_;
};

// Merges graph results with buffer results under the global (distance, id) order.
inline std::vector<Neighbor> merge_topk(std::span<const Neighbor> a, std::span<const Neighbor> b,
                                        std::size_t k) {
  std::vector<Neighbor> all(a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  if (all.size() > k) all.resize(k);
  return all;
}

// Append-only record of acknowledged mutations since the last compaction.
//
//   add <variant> <bytes>\n<payload>\n
//   buffer <bytes>\n<payload>\n
//   drain\n
//   delete <id>\n
struct Mutation {
  enum class Kind : std::uint8_t { add, buffer, drain, del } kind = Kind::add;
  AddVariant variant = AddVariant::cached;
  std::string payload;
  NodeId id = 0;

  friend bool operator==(const Mutation&, const Mutation&) = default;
};

class MutationLog {
 public:
  explicit MutationLog(std::filesystem::path path) : path_(std::move(path)) {}

  const std::filesystem::path& path() const noexcept { return path_; }

  void append(const Mutation& m) const {
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw Error("cannot append to " + path_.string());
    switch (m.kind) {
      case Mutation::Kind::add:
        out << "add " << to_string(m.variant) << ' ' << m.payload.size() << '\n' << m.payload << '\n';
        break;
      case Mutation::Kind::buffer:
        out << "buffer " << m.payload.size() << '\n' << m.payload << '\n';
        break;
      case Mutation::Kind::drain:
        out << "drain\n";
        break;
      case Mutation::Kind::del:
        out << "delete " << m.id << '\n';
        break;
    }
    out.flush();
    if (!out) throw Error("write failed on " + path_.string());
  }

  std::vector<Mutation> read() const {
    std::vector<Mutation> out;
    std::error_code ec;
    if (!std::filesystem::exists(path_, ec)) return out;
    const auto bytes = io::read_file(path_);
    const std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    std::size_t pos = 0;
    auto bad = [&](const std::string& why) {
      return FormatError("mutations.log", why + " at byte " + std::to_string(pos));
    };
    auto payload = [&](std::size_t len) {
      if (pos + len + 1 > text.size() || text[pos + len] != '\n') throw bad("truncated payload");
      std::string p(text.substr(pos, len));
      pos += len + 1;
      return p;
    };
    while (pos < text.size()) {
      const std::size_t eol = text.find('\n', pos);
      if (eol == std::string_view::npos) throw bad("unterminated record");
      const std::string line(text.substr(pos, eol - pos));
      pos = eol + 1;
      std::istringstream in(line);
      std::string word;
      in >> word;
      Mutation m;
      if (word == "add") {
        std::string variant;
        std::size_t len = 0;
        if (!(in >> variant >> len)) throw bad("malformed add");
        m.kind = Mutation::Kind::add;
        m.variant = parse_add_variant(variant);
        m.payload = payload(len);
      } else if (word == "buffer") {
        std::size_t len = 0;
        if (!(in >> len)) throw bad("malformed buffer");
        m.kind = Mutation::Kind::buffer;
        m.payload = payload(len);
      } else if (word == "drain") {
        m.kind = Mutation::Kind::drain;
      } else if (word == "delete") {
        std::uint64_t id = 0;
        if (!(in >> id)) throw bad("malformed delete");
        m.kind = Mutation::Kind::del;
        m.id = static_cast<NodeId>(id);
      } else {
        throw bad("unknown record '" + word + "'");
      }
      out.push_back(std::move(m));
    }
    return out;
  }

  void clear() const {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

 private:
  std::filesystem::path path_;
};

}  // namespace rcann
