#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "rcann/builder.hpp"
#include "rcann/error.hpp"
#include "rcann/graph.hpp"
#include "rcann/item_store.hpp"
#include "rcann/pq.hpp"
#include "rcann/provider.hpp"
#include "rcann/vectors.hpp"

namespace rcann {

enum class SearchMode : std::uint8_t {
  exact_bestfirst,  // every newly discovered neighbor is recomputed
  two_level,        // PQ distances filter which neighbors get recomputed
};

inline std::string to_string(SearchMode m) {
  return m == SearchMode::exact_bestfirst ? "exact" : "two_level";
}

inline SearchMode parse_search_mode(std::string_view s) {
  if (s == "exact" || s == "exact_bestfirst" || s == "bestfirst") return SearchMode::exact_bestfirst;
  if (s == "two_level" || s == "two-level") return SearchMode::two_level;
  throw InvalidArgument("unknown search mode '" + std::string(s) + "' (expected exact or two_level)");
}

// What alpha is a percentage of.
enum class AlphaBase : std::uint8_t {
  whole_queue,  // every AQ entry; selected entries already evaluated are skipped
  unevaluated,  // only the AQ entries not yet scheduled for recomputation
};

inline std::string to_string(AlphaBase b) {
  return b == AlphaBase::whole_queue ? "whole_queue" : "unevaluated";
}

inline AlphaBase parse_alpha_base(std::string_view s) {
  if (s == "whole_queue" || s == "all") return AlphaBase::whole_queue;
  if (s == "unevaluated") return AlphaBase::unevaluated;
  throw InvalidArgument("unknown alpha base '" + std::string(s) + "'");
}

struct SearchParams {
  std::size_t k = 3;
  std::size_t ef = 50;
  double alpha = 30.0;  // re-ranking ratio, percent
  std::size_t batch_threshold = 64;
  SearchMode mode = SearchMode::two_level;
  AlphaBase alpha_base = AlphaBase::whole_queue;

  void validate() const {
    if (k < 1) throw InvalidArgument("k must be >= 1");
    if (ef < k) throw InvalidArgument("ef must be >= k");
    if (!(alpha > 0.0 && alpha <= 100.0)) throw InvalidArgument("alpha must be in (0, 100]");
    if (batch_threshold < 1) throw InvalidArgument("batch threshold must be >= 1");
  }
};

// Seconds spent per stage. `traversal` is queue and graph bookkeeping.
struct StageTimes {
  double pq_lookup = 0.0;
  double payload_fetch = 0.0;
  double embed = 0.0;
  double distance = 0.0;
  double traversal = 0.0;

  double total() const { return pq_lookup + payload_fetch + embed + distance + traversal; }
  StageTimes& operator+=(const StageTimes& o) {
    pq_lookup += o.pq_lookup;
    payload_fetch += o.payload_fetch;
    embed += o.embed;
    distance += o.distance;
    traversal += o.traversal;
    return *this;
  }
};

struct SearchReport {
  std::vector<Neighbor> results;  // ascending (distance, id), active nodes only
  std::size_t recomputations = 0;
  std::size_t approx_lookups = 0;
  std::size_t cache_hits = 0;
  std::vector<std::size_t> batches;  // recomputed nodes per provider round trip
  std::vector<bool> forced_flush;    // batch emitted because the exact queue ran dry
  std::vector<NodeId> visit_order;   // base-level exploration order
  StageTimes stage_times;
  double wall_seconds = 0.0;

  double cache_hit_rate() const {
    const std::size_t total = cache_hits + recomputations;
    return total == 0 ? 0.0 : static_cast<double>(cache_hits) / static_cast<double>(total);
  }
  std::vector<NodeId> ids() const {
    std::vector<NodeId> out;
    for (const auto& r : results) out.push_back(r.id);
    return out;
  }
};

class SearchError : public Error {
 public:
  SearchError(const std::string& what, SearchReport partial, ExitCode code)
      : Error(what, code), partial_(std::move(partial)) {}
  const SearchReport& partial() const noexcept { return partial_; }

 private:
  SearchReport partial_;
};

namespace detail {
using Clock = std::chrono::steady_clock;
inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Back-to-back stage timing: each mark charges the time since the previous
// mark to one stage.
class StageClock {
 public:
  void start(Clock::time_point t) { last_ = t; }
  Clock::time_point last() const { return last_; }
  void mark(double& stage) {
    const auto now = Clock::now();
    stage += std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }

 private:
  Clock::time_point last_{};
};
}  // namespace detail

// Where exact embeddings come from at query time.
class ExactSource {
 public:
  virtual ~ExactSource() = default;
  virtual std::size_t dim() const = 0;
  // Writes ids.size() rows into out and charges time to payload_fetch / embed.
  virtual void fetch(std::span<const NodeId> ids, std::span<float> out, StageTimes& times) = 0;
};

// Recomputes embeddings from item payloads through the provider.
class RecomputeSource final : public ExactSource {
 public:
  RecomputeSource(const ItemStore& items, EmbeddingProvider& provider)
      : items_(&items), provider_(&provider) {}

  std::size_t dim() const override { return provider_->dim(); }

  void fetch(std::span<const NodeId> ids, std::span<float> out, StageTimes& times) override {
    auto t0 = detail::Clock::now();
    requests_.clear();
    for (NodeId id : ids) requests_.push_back(items_->request(id));
    times.payload_fetch += detail::seconds_since(t0);
    t0 = detail::Clock::now();
    embed_all(*provider_, requests_, out);
    times.embed += detail::seconds_since(t0);
  }

 private:
  const ItemStore* items_;
  EmbeddingProvider* provider_;
  std::vector<EmbeddingRequest> requests_;
};

// Serves precomputed vectors; used by oracles and tests.
class StoredSource final : public ExactSource {
 public:
  explicit StoredSource(const Matrix& vectors) : vectors_(&vectors) {}
  std::size_t dim() const override { return vectors_->dim(); }
  void fetch(std::span<const NodeId> ids, std::span<float> out, StageTimes& times) override {
    const auto t0 = detail::Clock::now();
    const std::size_t d = vectors_->dim();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto r = vectors_->row(ids[i]);
      std::copy(r.begin(), r.end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    times.payload_fetch += detail::seconds_since(t0);
  }

 private:
  const Matrix* vectors_;
};

// Pinned exact embeddings for the highest-degree nodes.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;

  template <GraphView G>
  static EmbeddingCache build(const G& g, double fraction_percent, ExactSource& source) {
    if (!(fraction_percent > 0.0 && fraction_percent <= 100.0)) {
      throw InvalidArgument("cache fraction must be in (0, 100]");
    }
    const std::size_t n = g.size();
    const auto degrees = base_degrees(g);
    const std::size_t count = std::min(n, hub_count(fraction_percent, n));
    std::vector<NodeId> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<NodeId>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](NodeId a, NodeId b) { return degrees[a] > degrees[b]; });
    order.resize(count);
    std::sort(order.begin(), order.end());

    EmbeddingCache c;
    c.slot_.assign(n, -1);
    c.vectors_ = Matrix(count, source.dim());
    StageTimes ignored;
    source.fetch(order, c.vectors_.flat(), ignored);
    for (std::size_t i = 0; i < count; ++i) c.slot_[order[i]] = static_cast<std::int32_t>(i);
    c.ids_ = std::move(order);
    return c;
  }

  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<NodeId>& ids() const noexcept { return ids_; }
  const float* find(NodeId v) const noexcept {
    if (v >= slot_.size() || slot_[v] < 0) return nullptr;
    return vectors_.row(static_cast<std::size_t>(slot_[v])).data();
  }

 private:
  std::vector<std::int32_t> slot_;
  std::vector<NodeId> ids_;
  Matrix vectors_;
};

// Query engine over any GraphView. One Searcher per thread; the graph, PQ
// artifacts and cache are shared read-only.
//
// Both modes walk the hierarchy the same way: a width-1 search on each upper
// level, then a width-ef search on the base level. Within a level:
//
//   exact_bestfirst  the closest unvisited node of the exact queue (EQ) is
//                    visited and all its unseen neighbors are recomputed as
//                    one batch.
//   two_level        unseen neighbors get a PQ distance and join the
//                    approximate queue (AQ). After each visit the top alpha%
//                    of AQ entries not yet scheduled are appended to the
//                    pending set C; C is recomputed in batches of exactly
//                    batch_threshold. When EQ has no unvisited node left, C
//                    is flushed whatever its size.
template <GraphView G>
class Searcher {
 public:
  Searcher(const G& graph, ExactSource& source, Metric metric, const PqModel* pq = nullptr,
           const PqCodes* codes = nullptr, const EmbeddingCache* cache = nullptr)
      : g_(&graph), source_(&source), metric_(metric), pq_(pq), codes_(codes), cache_(cache) {}

  void set_cache(const EmbeddingCache* cache) { cache_ = cache; }

  SearchReport search(std::span<const float> query, const SearchParams& params) {
    params.validate();
    if (query.size() != source_->dim()) {
      throw InvalidArgument("query dim " + std::to_string(query.size()) + " != index dim " +
                            std::to_string(source_->dim()));
    }
    if (params.mode == SearchMode::two_level && (pq_ == nullptr || codes_ == nullptr)) {
      throw InvalidArgument("two-level search needs PQ artifacts");
    }
    const auto t_start = detail::Clock::now();
    clock_.start(t_start);
    report_ = SearchReport{};
    params_ = &params;
    query_ = query;
    const std::size_t n = g_->size();
    exact_seen_.reset(n);
    computed_.clear();
    approx_seen_.reset(n);
    exact_dist_.resize(n);
    approx_dist_.resize(n);
    if (n == 0) return std::move(report_);

    try {
      if (params.mode == SearchMode::two_level) {
        clock_.mark(report_.stage_times.traversal);
        adc_ = AdcTable(*pq_, query);
        clock_.mark(report_.stage_times.pq_lookup);
      }
      const NodeId entry = g_->entry_point();
      pending_.assign(1, entry);
      in_level_ = false;
      flush(1, false);
      std::vector<Neighbor> eps{{exact_dist_[entry], entry}};
      for (std::size_t l = g_->max_level(); l > 0; --l) {
        auto best = search_level(l, eps, 1);
        eps.assign(best.begin(), best.begin() + 1);
      }
      search_level(0, eps, std::max(params.ef, params.k));
      // Rank every node with an exact distance, then drop deleted ones.
      std::vector<Neighbor> ranked;
      ranked.reserve(computed_.size());
      for (NodeId v : computed_) {
        if (!g_->is_deleted(v)) ranked.push_back({exact_dist_[v], v});
      }
      const std::size_t take = std::min(params.k, ranked.size());
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take),
                        ranked.end());
      ranked.resize(take);
      report_.results = std::move(ranked);
      clock_.mark(report_.stage_times.traversal);
    } catch (const ProviderError& e) {
      report_.wall_seconds = detail::seconds_since(t_start);
      throw SearchError(std::string("search aborted: ") + e.what(), std::move(report_),
                        e.code());
    }
    report_.wall_seconds = detail::seconds_since(t_start);
    return std::move(report_);
  }

 private:
  // One level. Entries carry exact distances. Returns EQ ascending.
  std::vector<Neighbor> search_level(std::size_t level, std::span<const Neighbor> entries,
                                     std::size_t ef) {
    const std::size_t n = g_->size();
    layer_seen_.reset(n);
    in_eq_.reset(n);
    scheduled_.reset(n);
    eq_ = {};
    candidates_ = {};
    aq_eligible_ = {};
    aq_low_ = {};
    in_low_.reset(n);
    pending_.clear();
    ef_ = ef;
    in_level_ = true;
    for (const Neighbor& e : entries) {
      if (layer_seen_.insert(e.id)) try_insert(e);
    }
    const bool two_level = params_->mode == SearchMode::two_level;
    const bool whole = params_->alpha_base == AlphaBase::whole_queue;
    std::vector<NodeId> step;
    clock_.mark(report_.stage_times.traversal);

    while (true) {
      NodeId u = 0;
      bool have = false;
      while (!candidates_.empty()) {
        const Neighbor c = candidates_.top();
        candidates_.pop();
        if (in_eq_.test(c.id)) {
          u = c.id;
          have = true;
          break;
        }
      }
      if (!have) {
        clock_.mark(report_.stage_times.traversal);
        if (pending_.empty()) break;
        flush(pending_.size(), true);
        continue;
      }
      if (level == 0) report_.visit_order.push_back(u);
      clock_.mark(report_.stage_times.traversal);

      step.clear();
      for (NodeId v : g_->neighbors(u, level)) {
        if (!layer_seen_.insert(v)) continue;
        if (two_level && whole) {
          // aq_eligible_ holds the part of AQ above the alpha cut.
          aq_eligible_.push({approx(v), v});
          if (exact_seen_.test(v)) try_insert({exact_dist_[v], v});
        } else if (exact_seen_.test(v)) {
          try_insert({exact_dist_[v], v});
        } else if (two_level) {
          aq_eligible_.push({approx(v), v});
        } else {
          step.push_back(v);
        }
      }
      if (two_level) {
        clock_.mark(report_.stage_times.pq_lookup);
        if (whole) {
          select_from_whole_queue();
        } else {
          select_candidates();
        }
        clock_.mark(report_.stage_times.traversal);
        while (pending_.size() >= params_->batch_threshold) {
          flush(params_->batch_threshold, false);
        }
      } else {
        pending_ = step;
        clock_.mark(report_.stage_times.traversal);
        if (!pending_.empty()) flush(pending_.size(), false);
      }
    }

    std::vector<Neighbor> out;
    out.reserve(eq_.size());
    while (!eq_.empty()) {
      out.push_back(eq_.top());
      eq_.pop();
    }
    std::reverse(out.begin(), out.end());
    clock_.mark(report_.stage_times.traversal);
    return out;
  }

  float approx(NodeId v) {
    if (!approx_seen_.test(v)) {
      approx_seen_.insert(v);
      approx_dist_[v] = adc_.distance(codes_->code(v));
      ++report_.approx_lookups;
    }
    return approx_dist_[v];
  }

  // Moves the best ceil(alpha% of eligible) AQ entries into the pending set.
  void select_candidates() {
    if (aq_eligible_.empty()) return;
    const double frac = params_->alpha / 100.0;
    auto take = static_cast<std::size_t>(
        std::ceil(frac * static_cast<double>(aq_eligible_.size()) - 1e-9));
    take = std::clamp<std::size_t>(take, 1, aq_eligible_.size());
    for (std::size_t i = 0; i < take; ++i) {
      const NodeId v = aq_eligible_.top().id;
      aq_eligible_.pop();
      scheduled_.insert(v);
      pending_.push_back(v);
    }
  }

  // AQ is split at the alpha cut: aq_low_ holds the best ceil(alpha% of |AQ|)
  // entries, aq_eligible_ the rest. Entries crossing into aq_low_ that have
  // no exact distance yet are scheduled, in (approx, id) order.
  void select_from_whole_queue() {
    const std::size_t total = aq_low_.size() + aq_eligible_.size();
    if (total == 0) return;
    const double frac = params_->alpha / 100.0;
    auto want = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(total) - 1e-9));
    want = std::clamp<std::size_t>(want, 1, total);
    entered_.clear();
    while (aq_low_.size() < want) {
      const Neighbor x = aq_eligible_.top();
      aq_eligible_.pop();
      aq_low_.push(x);
      in_low_.insert(x.id);
      entered_.push_back(x);
    }
    while (!aq_eligible_.empty() && aq_eligible_.top() < aq_low_.top()) {
      const Neighbor in = aq_eligible_.top();
      aq_eligible_.pop();
      const Neighbor out = aq_low_.top();
      aq_low_.pop();
      aq_low_.push(in);
      in_low_.insert(in.id);
      entered_.push_back(in);
      aq_eligible_.push(out);
      in_low_.erase(out.id);
    }
    std::sort(entered_.begin(), entered_.end());
    entered_.erase(std::unique(entered_.begin(), entered_.end(),
                               [](const Neighbor& a, const Neighbor& b) { return a.id == b.id; }),
                   entered_.end());
    for (const Neighbor& x : entered_) {
      if (!in_low_.test(x.id) || exact_seen_.test(x.id) || scheduled_.test(x.id)) continue;
      scheduled_.insert(x.id);
      pending_.push_back(x.id);
    }
  }

  void try_insert(Neighbor nb) {
    if (in_eq_.test(nb.id)) return;
    if (eq_.size() < ef_ || nb < eq_.top()) {
      eq_.push(nb);
      in_eq_.insert(nb.id);
      candidates_.push(nb);
      if (eq_.size() > ef_) {
        in_eq_.erase(eq_.top().id);
        eq_.pop();
      }
    }
  }

  // Recomputes the first `count` pending nodes as one batch and inserts them
  // into EQ in pending order.
  void flush(std::size_t count, bool forced) {
    count = std::min(count, pending_.size());
    if (count == 0) return;
    const std::size_t dim = source_->dim();
    misses_.clear();
    for (std::size_t i = 0; i < count; ++i) {
      const NodeId v = pending_[i];
      if (cache_ == nullptr || cache_->find(v) == nullptr) misses_.push_back(v);
    }
    buffer_.resize(misses_.size() * dim);
    if (!misses_.empty()) {
      clock_.mark(report_.stage_times.traversal);
      StageTimes& st = report_.stage_times;
      const double charged = st.payload_fetch + st.embed;
      source_->fetch(misses_, buffer_, st);
      // Source overhead outside its own timers counts as payload fetch.
      const auto now = detail::Clock::now();
      const double window = std::chrono::duration<double>(now - clock_.last()).count();
      st.payload_fetch += std::max(0.0, window - (st.payload_fetch + st.embed - charged));
      clock_.start(now);
      report_.recomputations += misses_.size();
      report_.batches.push_back(misses_.size());
      report_.forced_flush.push_back(forced);
    }
    report_.cache_hits += count - misses_.size();

    std::size_t mi = 0;
    for (std::size_t i = 0; i < count; ++i) {
      const NodeId v = pending_[i];
      const float* x = nullptr;
      if (mi < misses_.size() && misses_[mi] == v) {
        x = buffer_.data() + mi * dim;
        ++mi;
      } else {
        x = cache_->find(v);
      }
      exact_dist_[v] = distance_unchecked(query_.data(), x, dim, metric_);
      if (exact_seen_.insert(v)) computed_.push_back(v);
    }
    clock_.mark(report_.stage_times.distance);

    for (std::size_t i = 0; i < count; ++i) {
      const NodeId v = pending_[i];
      if (in_level_) try_insert({exact_dist_[v], v});
    }
    pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(count));
    clock_.mark(report_.stage_times.traversal);
  }

  const G* g_;
  ExactSource* source_;
  Metric metric_;
  const PqModel* pq_;
  const PqCodes* codes_;
  const EmbeddingCache* cache_;

  detail::StageClock clock_;
  const SearchParams* params_ = nullptr;
  std::span<const float> query_;
  SearchReport report_;
  AdcTable adc_;
  std::size_t ef_ = 0;
  bool in_level_ = false;

  VisitedSet exact_seen_;
  VisitedSet approx_seen_;
  VisitedSet layer_seen_;
  VisitedSet in_eq_;
  VisitedSet scheduled_;
  std::vector<float> exact_dist_;
  std::vector<float> approx_dist_;
  std::priority_queue<Neighbor> eq_;
  std::priority_queue<Neighbor, std::vector<Neighbor>, std::greater<>> candidates_;
  std::priority_queue<Neighbor, std::vector<Neighbor>, std::greater<>> aq_eligible_;
  std::priority_queue<Neighbor> aq_low_;
  VisitedSet in_low_;
  std::vector<Neighbor> entered_;
  std::vector<NodeId> pending_;
  std::vector<NodeId> computed_;
  std::vector<NodeId> misses_;
  std::vector<float> buffer_;
};

// Convenience wrapper for a single query.
template <GraphView G>
SearchReport search_once(const G& graph, ExactSource& source, Metric metric,
                         std::span<const float> query, const SearchParams& params,
                         const PqModel* pq = nullptr, const PqCodes* codes = nullptr,
                         const EmbeddingCache* cache = nullptr) {
  Searcher<G> s(graph, source, metric, pq, codes, cache);
  return s.search(query, params);
}

}  // namespace rcann
