#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rcann/error.hpp"
#include "rcann/graph.hpp"
#include "rcann/item_store.hpp"
#include "rcann/pq.hpp"
#include "rcann/provider.hpp"
#include "rcann/vectors.hpp"

namespace rcann {

struct BuildParams {
  std::size_t efc = 100;
  std::size_t M = 16;           // cap for hubs, upper levels and every reverse-edge shrink
  std::size_t m = 0;            // base-level cap for non-hubs at insertion; 0 selects max(1, M/5)
  double beta = 2.0;            // percent of nodes treated as hubs
  std::optional<std::size_t> budget_bytes;
  std::optional<double> tau;    // recall floor, checked by acceptance runs
  Metric metric = Metric::cosine;
  std::uint64_t seed = 0;
  std::size_t pq_subspaces = 0;  // 0 selects default_pq_subspaces(dim)
  std::size_t pq_iters = 15;
  std::size_t pq_sample = 100000;
  // When false, M comes from profile_M() if a budget is set.
  bool explicit_M = true;
  bool keep_reference = false;  // keep the pass-1 graph in BuildReport

  std::size_t low_degree() const { return m == 0 ? std::max<std::size_t>(1, M / 5) : m; }

  void validate() const {
    if (M < 2) throw InvalidArgument("M must be >= 2");
    if (low_degree() < 1 || low_degree() >= M) throw InvalidArgument("need 0 < m < M");
    if (!(beta > 0.0 && beta <= 100.0)) throw InvalidArgument("beta must be in (0, 100]");
    if (efc < M) throw InvalidArgument("efC must be >= M");
    if (M > 65535) throw InvalidArgument("M must fit in 16 bits");
  }
};

// Epoch-stamped membership over node ids; clear() is O(1).
class VisitedSet {
 public:
  void reset(std::size_t n) {
    if (marks_.size() < n) marks_.resize(n, 0);
    if (++epoch_ == 0) {
      std::fill(marks_.begin(), marks_.end(), 0);
      epoch_ = 1;
    }
  }
  bool test(NodeId v) const { return v < marks_.size() && marks_[v] == epoch_; }
  // Returns true if v was not yet marked.
  bool insert(NodeId v) {
    if (v >= marks_.size()) marks_.resize(static_cast<std::size_t>(v) + 1, 0);
    if (marks_[v] == epoch_) return false;
    marks_[v] = epoch_;
    return true;
  }
  void erase(NodeId v) {
    if (v < marks_.size() && marks_[v] == epoch_) marks_[v] = 0;
  }

 private:
  std::vector<std::uint32_t> marks_;
  std::uint32_t epoch_ = 0;
};

// Best-first search on one level with exact distances (the construction-time
// search). `dist(u)` is the distance from the target to node u. Returns up to
// ef nodes in ascending (distance, id) order.
template <GraphView G, class DistFn>
std::vector<Neighbor> search_layer(const G& g, DistFn&& dist, std::span<const Neighbor> entries,
                                   std::size_t ef, std::size_t level, VisitedSet& seen,
                                   VisitedSet& in_queue) {
  seen.reset(g.size());
  in_queue.reset(g.size());
  std::priority_queue<Neighbor, std::vector<Neighbor>, std::greater<>> candidates;
  std::priority_queue<Neighbor> top;
  auto try_insert = [&](Neighbor nb) {
    if (top.size() < ef || nb < top.top()) {
      top.push(nb);
      in_queue.insert(nb.id);
      candidates.push(nb);
      if (top.size() > ef) {
        in_queue.erase(top.top().id);
        top.pop();
      }
    }
  };
  for (const Neighbor& e : entries) {
    if (seen.insert(e.id)) try_insert(e);
  }
  while (!candidates.empty()) {
    const Neighbor c = candidates.top();
    candidates.pop();
    if (!in_queue.test(c.id)) continue;  // evicted before being visited
    for (NodeId u : g.neighbors(c.id, level)) {
      if (!seen.insert(u)) continue;
      try_insert({dist(u), u});
    }
  }
  std::vector<Neighbor> out;
  out.reserve(top.size());
  while (!top.empty()) {
    out.push_back(top.top());
    top.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

// Relative-neighborhood selection. `candidates` must be sorted ascending by
// distance to the target; candidate x is kept iff no already-kept y has
// pair(x, y) < x.distance. Stops once `cap` are kept.
template <class PairDist>
std::vector<Neighbor> rng_shrink(std::span<const Neighbor> candidates, std::size_t cap,
                                 PairDist&& pair) {
  std::vector<Neighbor> kept;
  if (cap == 0) return kept;
  for (const Neighbor& x : candidates) {
    bool keep = true;
    for (const Neighbor& y : kept) {
      if (pair(x.id, y.id) < x.distance) {
        keep = false;
        break;
      }
    }
    if (keep) {
      kept.push_back(x);
      if (kept.size() == cap) break;
    }
  }
  return kept;
}

inline std::vector<Neighbor> random_subset(std::span<const Neighbor> candidates, std::size_t cap,
                                           Xoshiro256& rng) {
  std::vector<Neighbor> pool(candidates.begin(), candidates.end());
  if (pool.size() <= cap) return pool;
  // Partial Fisher-Yates: the first `cap` slots form a uniform sample.
  for (std::size_t i = 0; i < cap; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(cap);
  std::sort(pool.begin(), pool.end());
  return pool;
}

enum class SelectRule : std::uint8_t { rng, random };

// Distances needed while inserting. `pair(a, b)` is the distance between two
// nodes, where the node being inserted is addressed by its own id.
template <class P>
concept InsertPolicy = requires(P& p, NodeId a, NodeId b) {
  { p.pair(a, b) } -> std::convertible_to<float>;
};

// Mutable graphs that insertion can grow.
template <class G>
concept MutableGraph = GraphView<G> && requires(G& g, NodeId v, std::size_t level, std::uint8_t l) {
  { g.links(v, level) } -> std::same_as<std::vector<NodeId>&>;
  { g.add_node(l) } -> std::convertible_to<NodeId>;
};

namespace detail {

// Policies may precompute distances for a whole candidate list before an RNG
// shrink runs over it.
template <class P>
void before_shrink(P& policy, std::span<const Neighbor> cand) {
  if constexpr (requires { policy.before_shrink(cand); }) policy.before_shrink(cand);
}

template <class P>
void after_shrink(P& policy) {
  if constexpr (requires { policy.after_shrink(); }) policy.after_shrink();
}

}  // namespace detail

struct InsertCaps {
  std::size_t base = 16;   // cap on the new node's own base-level list
  std::size_t upper = 16;  // cap on the new node's upper-level lists
  std::size_t M = 16;      // reverse-edge shrink threshold, every level
};

struct InsertScratch {
  VisitedSet seen;
  VisitedSet in_queue;
};

// Inserts a fresh node at `level` (HNSW-style descent, then per-level neighbor
// selection, bidirectional links and reverse-edge shrinking).
template <MutableGraph G, InsertPolicy P>
NodeId insert_node(G& g, std::uint8_t level, const InsertCaps& caps, std::size_t efc, P& policy,
                   SelectRule rule, Xoshiro256* rng, InsertScratch& scratch) {
  const bool empty = g.size() == 0;
  const NodeId prev_entry = empty ? 0 : g.entry_point();
  const std::size_t prev_top = empty ? 0 : g.max_level();
  const NodeId v = g.add_node(level);
  if (empty) return v;

  auto to_new = [&](NodeId u) { return static_cast<float>(policy.pair(v, u)); };
  std::vector<Neighbor> eps{{to_new(prev_entry), prev_entry}};
  for (std::size_t l = prev_top; l > level; --l) {
    auto w = search_layer(g, to_new, eps, 1, l, scratch.seen, scratch.in_queue);
    eps.assign(w.begin(), w.begin() + 1);
  }
  for (std::size_t l = std::min<std::size_t>(level, prev_top) + 1; l-- > 0;) {
    auto w = search_layer(g, to_new, eps, efc, l, scratch.seen, scratch.in_queue);
    const std::size_t cap = l == 0 ? caps.base : caps.upper;
    std::vector<Neighbor> selected;
    if (rule == SelectRule::rng) {
      // Distances to the new node are evaluated again by the shrink step.
      std::vector<Neighbor> cand;
      cand.reserve(w.size());
      for (const Neighbor& x : w) cand.push_back({to_new(x.id), x.id});
      std::sort(cand.begin(), cand.end());
      detail::before_shrink(policy, cand);
      selected = rng_shrink(cand, cap, [&](NodeId a, NodeId b) { return policy.pair(a, b); });
      detail::after_shrink(policy);
    } else {
      selected = random_subset(w, cap, *rng);
    }
    auto& own = g.links(v, l);
    own.clear();
    for (const Neighbor& s : selected) own.push_back(s.id);

    for (const Neighbor& s : selected) {
      const NodeId u = s.id;
      auto& lst = g.links(u, l);
      lst.push_back(v);
      if (lst.size() <= caps.M) continue;
      if (rule == SelectRule::rng) {
        std::vector<Neighbor> cand;
        cand.reserve(lst.size());
        for (NodeId x : lst) cand.push_back({static_cast<float>(policy.pair(u, x)), x});
        std::sort(cand.begin(), cand.end());
        detail::before_shrink(policy, cand);
        const auto kept =
            rng_shrink(cand, caps.M, [&](NodeId a, NodeId b) { return policy.pair(a, b); });
        detail::after_shrink(policy);
        auto& again = g.links(u, l);
        again.clear();
        for (const Neighbor& k : kept) again.push_back(k.id);
      } else {
        auto& again = g.links(u, l);
        again.erase(again.begin() + static_cast<std::ptrdiff_t>(rng->below(again.size())));
      }
    }
    eps = std::move(w);
  }
  return v;
}

// Distances over a block of resident embeddings (local row == node id).
struct ResidentPolicy {
  const Matrix* vectors;
  Metric metric;
  float pair(NodeId a, NodeId b) const {
    return distance_unchecked(vectors->row(a).data(), vectors->row(b).data(), vectors->dim(),
                              metric);
  }
};

struct HubSet {
  std::vector<NodeId> ids;            // ascending
  std::vector<std::uint8_t> member;   // size n

  bool contains(NodeId v) const { return v < member.size() && member[v] != 0; }
  std::size_t size() const { return ids.size(); }
};

inline std::size_t hub_count(double beta, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(beta * static_cast<double>(n) / 100.0 - 1e-9));
}

// Top ceil(beta*n/100) nodes by degree, ties to the lower id.
inline HubSet select_hubs(std::span<const std::size_t> degrees, double beta, std::size_t n) {
  if (degrees.size() != n) throw InvalidArgument("select_hubs: need one degree per node");
  const std::size_t count = std::min(n, hub_count(beta, n));
  std::vector<NodeId> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<NodeId>(i);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(),
                    [&](NodeId a, NodeId b) {
                      return degrees[a] > degrees[b] || (degrees[a] == degrees[b] && a < b);
                    });
  HubSet h;
  h.ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(h.ids.begin(), h.ids.end());
  h.member.assign(n, 0);
  for (NodeId v : h.ids) h.member[v] = 1;
  return h;
}

template <GraphView G>
std::vector<std::size_t> base_degrees(const G& g) {
  std::vector<std::size_t> d(g.size());
  for (std::size_t v = 0; v < g.size(); ++v) d[v] = g.neighbors(static_cast<NodeId>(v), 0).size();
  return d;
}

// Builds a graph over rows 0..n-1 of `vectors` in row order. `hubs == nullptr`
// gives every node the hub cap M (the unpruned reference build).
// `level_of(local)` supplies each node's hierarchy level.
inline AdjacencyGraph build_graph(const Matrix& vectors, const BuildParams& params,
                                  const HubSet* hubs,
                                  const std::function<std::uint8_t(NodeId)>& level_of) {
  params.validate();
  AdjacencyGraph g(params.M);
  ResidentPolicy policy{&vectors, params.metric};
  InsertScratch scratch;
  const std::size_t m = params.low_degree();
  for (std::size_t i = 0; i < vectors.rows(); ++i) {
    const auto v = static_cast<NodeId>(i);
    InsertCaps caps;
    caps.M = params.M;
    caps.upper = params.M;
    caps.base = (hubs == nullptr || hubs->contains(v)) ? params.M : m;
    insert_node(g, level_of(v), caps, params.efc, policy, SelectRule::rng, nullptr, scratch);
  }
  return g;
}

// Calibrated ratio of realized to initial degree for non-hubs: reverse links
// admitted up to M roughly double the m edges chosen at insertion.
inline constexpr double kBackfillFactor = 2.0;

struct DegreeProfile {
  std::size_t M = 0;
  std::size_t m = 0;
  double predicted_avg_degree = 0.0;
  std::size_t predicted_bytes = 0;
};

inline double predicted_avg_degree(std::size_t M, std::size_t m, double beta) {
  const double b = beta / 100.0;
  return b * static_cast<double>(M) + (1.0 - b) * kBackfillFactor * static_cast<double>(m);
}

// Largest M whose predicted base-level metadata fits the byte budget, with m = max(1, M/5).
inline DegreeProfile profile_M(std::size_t n, std::size_t budget_bytes, double beta) {
  if (n == 0) throw InvalidArgument("profile_M: empty dataset");
  if (!(beta > 0.0 && beta <= 100.0)) throw InvalidArgument("beta must be in (0, 100]");
  const std::size_t minimal = 8 * n;
  if (budget_bytes < minimal) {
    throw BuildError("storage budget of " + std::to_string(budget_bytes) +
                     " bytes is infeasible; the minimum for " + std::to_string(n) +
                     " nodes is " + std::to_string(minimal) + " bytes (average degree 2)");
  }
  DegreeProfile best;
  const std::size_t limit = std::max<std::size_t>(2, std::min<std::size_t>(65535, n > 1 ? n - 1 : 2));
  for (std::size_t M = 2; M <= limit; ++M) {
    const std::size_t m = std::max<std::size_t>(1, M / 5);
    const double avg = predicted_avg_degree(M, m, beta);
    const auto bytes = static_cast<std::size_t>(std::ceil(avg * static_cast<double>(n) * 4.0 - 1e-9));
    if (bytes > budget_bytes) {
      if (best.M == 0) {
        best = {M, m, avg, bytes};
      }
      break;
    }
    best = {M, m, avg, bytes};
  }
  return best;
}

// Shrinks lists until the graph's total metadata (all levels) fits the budget:
// every list longer than cap is RNG-shrunk to cap, starting at cap = M-1 and
// lowering the cap until the budget holds. Returns the number of rounds.
template <InsertPolicy P>
std::size_t trim_to_budget(AdjacencyGraph& g, std::size_t budget_bytes, P& policy) {
  auto bytes = [&] {
    std::size_t e = 0;
    for (std::size_t l = 0; l <= g.max_level() && g.size() > 0; ++l) e += g.edge_count(l);
    return e * 4;
  };
  std::size_t rounds = 0;
  std::size_t cap = g.max_degree();
  while (bytes() > budget_bytes) {
    if (cap <= 1) {
      throw BuildError("cannot trim graph to " + std::to_string(budget_bytes) + " bytes");
    }
    --cap;
    ++rounds;
    for (std::size_t v = 0; v < g.size(); ++v) {
      const auto id = static_cast<NodeId>(v);
      for (std::size_t l = 0; l <= g.level(id); ++l) {
        auto& lst = g.links(id, l);
        if (lst.size() <= cap) continue;
        std::vector<Neighbor> cand;
        for (NodeId x : lst) cand.push_back({static_cast<float>(policy.pair(id, x)), x});
        std::sort(cand.begin(), cand.end());
        const auto kept =
            rng_shrink(cand, cap, [&](NodeId a, NodeId b) { return policy.pair(a, b); });
        lst.clear();
        for (const Neighbor& k : kept) lst.push_back(k.id);
      }
    }
  }
  return rounds;
}

inline void check_embeddings(const Matrix& vectors, Metric metric, std::size_t first_id = 0) {
  for (std::size_t i = 0; i < vectors.rows(); ++i) {
    const auto row = vectors.row(i);
    if (!all_finite(row)) {
      throw BuildError("embedding for item " + std::to_string(first_id + i) + " is not finite");
    }
    if (metric == Metric::cosine && squared_norm(row) == 0.0f) {
      throw BuildError("item " + std::to_string(first_id + i) +
                       " has a zero embedding, which is undefined under cosine");
    }
  }
}

// Embeds rows [0, n) of the item store into `out` (resized to n rows).
inline void embed_items(EmbeddingProvider& provider, const ItemStore& items,
                        std::span<const NodeId> ids, ResidentEmbeddings& out) {
  out.resize(ids.size());
  std::vector<EmbeddingRequest> reqs;
  reqs.reserve(ids.size());
  for (NodeId id : ids) reqs.push_back(items.request(id));
  try {
    embed_all(provider, reqs, out.matrix().flat());
  } catch (const ProviderError& e) {
    throw BuildError(std::string("embedding provider failed during build: ") + e.what());
  }
}

// Evenly strided subset of [0, n) with at most `limit` members.
inline std::vector<NodeId> strided_sample(std::size_t n, std::size_t limit) {
  std::vector<NodeId> out;
  if (n == 0 || limit == 0) return out;
  const std::size_t take = std::min(n, limit);
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(static_cast<NodeId>(i * n / take));
  return out;
}

struct BuildReport {
  GraphStats unpruned;     // pass 1
  GraphStats pruned;       // final graph
  HubSet hubs;
  DegreeProfile profile;   // filled when M came from the budget
  std::size_t trim_rounds = 0;
  std::int64_t peak_resident = 0;
  std::optional<PrunedGraph> reference;  // pass-1 graph, when requested
};

struct BuiltIndex {
  PrunedGraph graph;
  PqModel pq;
  PqCodes codes;
  BuildReport report;
};

inline PqModel train_pq_on(const Matrix& sample, const BuildParams& p) {
  PqTrainOptions opt;
  opt.m_pq = p.pq_subspaces;
  opt.iters = p.pq_iters;
  opt.seed = mix_seed(p.seed, 0x7071ULL);
  opt.metric = p.metric;
  opt.allow_small_sample = true;
  return pq_train(sample, opt);
}

// Applies the budget to the parameters before any embedding work.
inline BuildParams resolve_budget(BuildParams params, std::size_t n, DegreeProfile* profile) {
  if (params.budget_bytes && !params.explicit_M) {
    const DegreeProfile prof = profile_M(n, *params.budget_bytes, params.beta);
    params.M = prof.M;
    params.m = prof.m;
    params.efc = std::max(params.efc, params.M);
    if (profile != nullptr) *profile = prof;
  } else if (params.budget_bytes && *params.budget_bytes < 8 * n) {
    (void)profile_M(n, *params.budget_bytes, params.beta);  // throws the infeasibility error
  }
  return params;
}

// Monolithic two-pass build: an unpruned reference graph supplies node degrees,
// hubs are the top beta% of them, and the final graph is rebuilt with the
// hub-aware caps. Exact embeddings are held for the duration and then dropped.
inline BuiltIndex build_index(const ItemStore& items, BuildParams params, EmbeddingProvider& provider,
                              ResidentCounter* counter = nullptr) {
  const std::size_t n = items.size();
  if (n == 0) throw BuildError("build_index: no items");
  BuiltIndex out;
  params = resolve_budget(params, n, &out.report.profile);
  params.validate();

  ResidentEmbeddings emb(provider.dim(), counter);
  std::vector<NodeId> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<NodeId>(i);
  embed_items(provider, items, all, emb);
  check_embeddings(emb.matrix(), params.metric);

  const auto level_of = [&](NodeId v) { return draw_level(params.seed, v, params.M); };
  std::vector<std::size_t> degrees;
  {
    const AdjacencyGraph reference = build_graph(emb.matrix(), params, nullptr, level_of);
    out.report.unpruned = degree_stats(reference);
    degrees = base_degrees(reference);
    if (params.keep_reference) out.report.reference = PrunedGraph::freeze(reference);
  }
  out.report.hubs = select_hubs(degrees, params.beta, n);
  AdjacencyGraph g = build_graph(emb.matrix(), params, &out.report.hubs, level_of);
  if (params.budget_bytes) {
    ResidentPolicy policy{&emb.matrix(), params.metric};
    out.report.trim_rounds = trim_to_budget(g, *params.budget_bytes, policy);
  }

  Matrix sample(0, provider.dim());
  for (NodeId i : strided_sample(n, params.pq_sample)) sample.append(emb.row(i));
  out.pq = train_pq_on(sample, params);
  out.codes = pq_encode_all(out.pq, emb.matrix());

  out.graph = PrunedGraph::freeze(g);
  out.report.pruned = degree_stats(out.graph);
  if (counter != nullptr) out.report.peak_resident = counter->peak();
  return out;
}

}  // namespace rcann
