#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rcann/builder.hpp"
#include "rcann/error.hpp"
#include "rcann/graph.hpp"
#include "rcann/search.hpp"
#include "rcann/vectors.hpp"

namespace rcann {

// Exact top-k by linear scan, (distance, id) order. `active(v)` filters ids.
inline std::vector<Neighbor> brute_force_topk(const Matrix& data, std::span<const float> q,
                                              std::size_t k, Metric metric,
                                              const std::function<bool(NodeId)>& active = {}) {
  if (q.size() != data.dim()) throw InvalidArgument("brute_force_topk: query dim mismatch");
  std::vector<Neighbor> all;
  all.reserve(data.rows());
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto v = static_cast<NodeId>(i);
    if (active && !active(v)) continue;
    all.push_back({distance_unchecked(q.data(), data.row(i).data(), data.dim(), metric), v});
  }
  const std::size_t take = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end());
  all.resize(take);
  return all;
}

// Same scan with embeddings streamed from the provider, `batch` rows at a time.
inline std::vector<Neighbor> brute_force_topk(const ItemStore& items, EmbeddingProvider& provider,
                                              std::span<const float> q, std::size_t k,
                                              Metric metric,
                                              const std::function<bool(NodeId)>& active = {},
                                              std::size_t batch = 1024) {
  const std::size_t dim = provider.dim();
  if (q.size() != dim) throw InvalidArgument("brute_force_topk: query dim mismatch");
  std::vector<Neighbor> best;
  std::vector<EmbeddingRequest> reqs;
  std::vector<float> buf;
  for (std::size_t b = 0; b < items.size(); b += batch) {
    const std::size_t e = std::min(items.size(), b + batch);
    reqs.clear();
    for (std::size_t i = b; i < e; ++i) {
      if (!active || active(static_cast<NodeId>(i))) reqs.push_back(items.request(static_cast<NodeId>(i)));
    }
    buf.resize(reqs.size() * dim);
    if (!reqs.empty()) embed_all(provider, reqs, buf);
    for (std::size_t j = 0; j < reqs.size(); ++j) {
      best.push_back({distance_unchecked(q.data(), buf.data() + j * dim, dim, metric), reqs[j].item_id});
    }
    std::sort(best.begin(), best.end());
    if (best.size() > k) best.resize(k);
  }
  return best;
}

inline std::vector<NodeId> ids_of(std::span<const Neighbor> xs) {
  std::vector<NodeId> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(x.id);
  return out;
}

struct GroundTruth {
  std::size_t k = 0;
  Metric metric = Metric::cosine;
  std::vector<std::vector<NodeId>> ids;
};

inline GroundTruth ground_truth(const Matrix& data, const Matrix& queries, std::size_t k,
                                Metric metric, const std::function<bool(NodeId)>& active = {}) {
  GroundTruth gt{k, metric, {}};
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    gt.ids.push_back(ids_of(brute_force_topk(data, queries.row(i), k, metric, active)));
  }
  return gt;
}

// |returned ∩ truth| / k with k = |truth|.
inline double recall_at_k(std::span<const NodeId> returned, std::span<const NodeId> truth) {
  if (truth.empty()) throw InvalidArgument("recall_at_k: k must be >= 1");
  std::vector<NodeId> a(returned.begin(), returned.end());
  std::vector<NodeId> b(truth.begin(), truth.end());
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  std::sort(b.begin(), b.end());
  std::vector<NodeId> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / static_cast<double>(truth.size());
}

// Mean recall and mean counters of one parameter setting over a query set.
struct TradeoffRow {
  std::size_t ef = 0;
  double alpha = 100.0;
  SearchMode mode = SearchMode::exact_bestfirst;
  double recall = 0.0;
  double recomputations = 0.0;
  double approx_lookups = 0.0;
};

template <GraphView G>
TradeoffRow evaluate(Searcher<G>& searcher, const Matrix& queries, const GroundTruth& gt,
                     const SearchParams& params, std::vector<SearchReport>* reports = nullptr) {
  TradeoffRow row{params.ef, params.alpha, params.mode, 0.0, 0.0, 0.0};
  const std::size_t nq = queries.rows();
  if (nq == 0) return row;
  for (std::size_t i = 0; i < nq; ++i) {
    SearchReport r = searcher.search(queries.row(i), params);
    row.recall += recall_at_k(r.ids(), gt.ids[i]);
    row.recomputations += static_cast<double>(r.recomputations);
    row.approx_lookups += static_cast<double>(r.approx_lookups);
    if (reports != nullptr) reports->push_back(std::move(r));
  }
  const auto q = static_cast<double>(nq);
  row.recall /= q;
  row.recomputations /= q;
  row.approx_lookups /= q;
  return row;
}

struct TuneResult {
  bool feasible = false;
  std::size_t ef = 0;
  double recall = 0.0;       // at ef (or at the upper bound when infeasible)
  std::vector<std::string> warnings;
};

// Smallest ef in [lo, hi] whose mean recall reaches `target`, by binary
// search. `recall_at(ef)` must be deterministic.
inline TuneResult tune_ef(const std::function<double(std::size_t)>& recall_at, std::size_t lo,
                          std::size_t hi, double target) {
  if (lo < 1 || hi < lo) throw InvalidArgument("tune_ef: need 1 <= lo <= hi");
  TuneResult res;
  const double top = recall_at(hi);
  if (top < target) {
    res.ef = hi;
    res.recall = top;
    return res;
  }
  std::size_t a = lo;
  std::size_t b = hi;  // recall_at(b) >= target
  double rb = top;
  while (a < b) {
    const std::size_t mid = a + (b - a) / 2;
    const double r = recall_at(mid);
    if (r >= target) {
      b = mid;
      rb = r;
    } else {
      a = mid + 1;
    }
  }
  res.feasible = true;
  res.ef = b;
  res.recall = rb;
  if (b > lo) {
    const double below = recall_at(b - 1);
    if (below >= target) {
      // Non-monotone step: walk down while the target still holds.
      std::size_t e = b - 1;
      double re = below;
      while (e > lo && recall_at(e - 1) >= target) --e;
      re = recall_at(e);
      res.warnings.push_back("recall not monotone in ef near " + std::to_string(b) +
                             "; lowered to " + std::to_string(e));
      res.ef = e;
      res.recall = re;
    }
  }
  return res;
}

template <GraphView G>
TuneResult tune_ef(Searcher<G>& searcher, const Matrix& queries, const GroundTruth& gt,
                   SearchParams params, double target, std::size_t hi) {
  return tune_ef(
      [&](std::size_t ef) {
        params.ef = ef;
        return evaluate(searcher, queries, gt, params).recall;
      },
      params.k, hi, target);
}

// Removes round(fraction * E) base-level edges chosen uniformly without
// replacement. Upper levels are kept.
inline PrunedGraph baseline_random_prune(const PrunedGraph& g, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw InvalidArgument("random prune fraction must be in (0, 1)");
  }
  AdjacencyGraph a = g.thaw();
  const std::size_t edges = a.edge_count(0);
  const auto drop = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(edges)));
  std::vector<std::uint64_t> idx(edges);
  for (std::size_t i = 0; i < edges; ++i) idx[i] = i;
  Xoshiro256 rng(mix_seed(seed, 0x72616e64ULL));
  // Partial Fisher-Yates: the first `drop` slots are the sample.
  for (std::size_t i = 0; i < drop; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(edges - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<std::uint8_t> dead(edges, 0);
  for (std::size_t i = 0; i < drop; ++i) dead[idx[i]] = 1;
  std::size_t e = 0;
  for (std::size_t v = 0; v < a.size(); ++v) {
    auto& lst = a.links(static_cast<NodeId>(v), 0);
    std::vector<NodeId> kept;
    for (NodeId u : lst) {
      if (dead[e++] == 0) kept.push_back(u);
    }
    lst = std::move(kept);
  }
  PrunedGraph out = PrunedGraph::freeze(a);
  for (std::size_t v = 0; v < g.size(); ++v) {
    if (g.is_deleted(static_cast<NodeId>(v))) out.mark_deleted(static_cast<NodeId>(v));
  }
  return out;
}

// Uniform cap M/2 for every node, one construction pass.
inline PrunedGraph baseline_small_m(const Matrix& vectors, BuildParams params) {
  params.M = std::max<std::size_t>(2, params.M / 2);
  params.m = std::max<std::size_t>(1, params.M / 5);
  params.efc = std::max(params.efc, params.M);
  const auto level_of = [&](NodeId v) { return draw_level(params.seed, v, params.M); };
  return PrunedGraph::freeze(build_graph(vectors, params, nullptr, level_of));
}

inline PrunedGraph baseline_small_m(const ItemStore& items, const BuildParams& params,
                                    EmbeddingProvider& provider) {
  ResidentEmbeddings emb(provider.dim(), nullptr);
  std::vector<NodeId> all(items.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<NodeId>(i);
  embed_items(provider, items, all, emb);
  return baseline_small_m(emb.matrix(), params);
}

}  // namespace rcann
