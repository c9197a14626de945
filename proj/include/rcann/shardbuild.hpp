#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rcann/builder.hpp"
#include "rcann/error.hpp"
#include "rcann/graph.hpp"
#include "rcann/io.hpp"
#include "rcann/item_store.hpp"
#include "rcann/pq.hpp"
#include "rcann/provider.hpp"

namespace rcann {

struct ShardPlan {
  std::size_t k_shards = 1;
  Matrix centroids;
  std::vector<std::array<std::uint32_t, 2>> assignment;  // (primary, secondary) per item

  // Global ids of shard s, ascending. An item whose two shards coincide is listed once.
  std::vector<NodeId> members(std::size_t s) const {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (assignment[i][0] == s || assignment[i][1] == s) out.push_back(static_cast<NodeId>(i));
    }
    return out;
  }
  std::size_t max_shard_size() const {
    std::size_t best = 0;
    for (std::size_t s = 0; s < k_shards; ++s) best = std::max(best, members(s).size());
    return best;
  }
};

struct ShardOptions {
  std::size_t k_shards = 4;
  std::size_t sample_size = 0;  // 0 selects min(20000, ceil(n / k))
  std::size_t kmeans_iters = 25;
  std::uint64_t seed = 0;
  bool keep_closest = false;    // merge never drops a node's PQ-nearest neighbor
  std::optional<std::filesystem::path> work_dir;  // shard graphs persisted here during the build
  bool keep_shards = false;

  std::size_t resolved_sample(std::size_t n) const {
    if (sample_size != 0) return std::min(sample_size, n);
    const std::size_t per_shard = (n + k_shards - 1) / k_shards;
    return std::min<std::size_t>({n, 20000, per_shard});
  }
};

// Planning output plus the PQ artifacts trained on the planning sample and
// filled in during the assignment pass.
struct PlanResult {
  ShardPlan plan;
  PqModel pq;
  PqCodes codes;
};

namespace detail {

inline std::array<std::uint32_t, 2> two_nearest(std::span<const float> x, const Matrix& centroids) {
  std::array<std::uint32_t, 2> best{0, 0};
  float d0 = std::numeric_limits<float>::infinity();
  float d1 = d0;
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const float d = sum_sq_diff(x.data(), centroids.row(c).data(), x.size());
    if (d < d0) {
      d1 = d0;
      best[1] = best[0];
      d0 = d;
      best[0] = static_cast<std::uint32_t>(c);
    } else if (d < d1) {
      d1 = d;
      best[1] = static_cast<std::uint32_t>(c);
    }
  }
  if (centroids.rows() == 1) best[1] = best[0];
  return best;
}

}  // namespace detail

// k-means on an embedded sample, then one sequential pass that assigns each
// item to its two nearest centroids and PQ-encodes it. Embeddings are dropped
// as soon as they are used.
inline PlanResult plan_shards(const ItemStore& items, const ShardOptions& opt,
                              const BuildParams& params, EmbeddingProvider& provider,
                              ResidentCounter* counter = nullptr) {
  const std::size_t n = items.size();
  if (opt.k_shards < 1) throw InvalidArgument("shard count must be >= 1");
  if (n == 0) throw BuildError("plan_shards: no items");
  const std::size_t sample_n = opt.resolved_sample(n);
  if (sample_n < opt.k_shards) throw InvalidArgument("shard sample must be >= shard count");
  const std::size_t dim = provider.dim();

  PlanResult out;
  out.plan.k_shards = opt.k_shards;
  {
    ResidentEmbeddings sample(dim, counter);
    const auto ids = strided_sample(n, sample_n);
    embed_items(provider, items, ids, sample);
    check_embeddings(sample.matrix(), params.metric);
    if (params.metric == Metric::cosine) {
      for (std::size_t i = 0; i < sample.matrix().rows(); ++i) normalize(sample.matrix().row(i));
    }
    out.plan.centroids = Matrix(opt.k_shards, dim);
    Xoshiro256 rng(mix_seed(opt.seed, 0x6b6d65616e73ULL));
    detail::kmeans(sample.matrix().flat(), sample_n, dim, opt.k_shards, opt.kmeans_iters, rng,
                   out.plan.centroids.flat().data());
    out.pq = train_pq_on(sample.matrix(), params);
  }

  out.plan.assignment.resize(n);
  out.codes.m_pq = out.pq.m_pq;
  const std::size_t step = std::max<std::size_t>(1, provider.config().max_batch);
  ResidentEmbeddings batch(dim, counter);
  std::vector<NodeId> ids;
  for (std::size_t b = 0; b < n; b += step) {
    const std::size_t e = std::min(n, b + step);
    ids.clear();
    for (std::size_t i = b; i < e; ++i) ids.push_back(static_cast<NodeId>(i));
    embed_items(provider, items, ids, batch);
    check_embeddings(batch.matrix(), params.metric, b);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      out.codes.append(pq_encode(out.pq, batch.row(j)));
      Vector x(batch.row(j).begin(), batch.row(j).end());
      if (params.metric == Metric::cosine) normalize(x);
      out.plan.assignment[b + j] = detail::two_nearest(x, out.plan.centroids);
    }
    batch.clear();
  }
  return out;
}

// A shard's graph over local ids; members[local] is the global id.
struct ShardGraph {
  std::vector<NodeId> members;
  PrunedGraph graph;
  std::size_t dim = 0;
  Metric metric = Metric::cosine;
};

// One construction pass over a shard. `global_hubs == nullptr` gives the
// unpruned reference pass.
inline ShardGraph build_shard(const ItemStore& items, std::vector<NodeId> members,
                              const BuildParams& params, const HubSet* global_hubs,
                              EmbeddingProvider& provider, ResidentCounter* counter = nullptr) {
  if (members.empty()) throw BuildError("build_shard: empty shard");
  ResidentEmbeddings emb(provider.dim(), counter);
  embed_items(provider, items, members, emb);
  check_embeddings(emb.matrix(), params.metric);
  std::optional<HubSet> local;
  if (global_hubs != nullptr) {
    local.emplace();
    local->member.assign(members.size(), 0);
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (global_hubs->contains(members[i])) {
        local->member[i] = 1;
        local->ids.push_back(static_cast<NodeId>(i));
      }
    }
  }
  const auto level_of = [&](NodeId v) { return draw_level(params.seed, members[v], params.M); };
  ShardGraph out;
  out.graph = PrunedGraph::freeze(
      build_graph(emb.matrix(), params, local ? &*local : nullptr, level_of));
  out.members = std::move(members);
  out.dim = provider.dim();
  out.metric = params.metric;
  return out;
}

struct MergeOptions {
  std::size_t M = 16;
  std::uint64_t seed = 0;
  bool keep_closest = false;
  const PqModel* pq = nullptr;      // needed by keep_closest
  const PqCodes* codes = nullptr;
};

// Union of shard graphs over global ids. Level = max over shards; each list
// is the de-duplicated union, randomly thinned to M. Entry = lowest id on the
// top level.
inline PrunedGraph merge_shards(std::span<const ShardGraph> shards, std::size_t n,
                                const MergeOptions& opt) {
  if (shards.empty()) throw BuildError("merge: no shards");
  for (const auto& s : shards) {
    if (s.dim != shards.front().dim || s.metric != shards.front().metric) {
      throw BuildError("merge: shards disagree on dim or metric");
    }
  }
  if (opt.keep_closest && (opt.pq == nullptr || opt.codes == nullptr)) {
    throw InvalidArgument("merge: keep_closest needs PQ artifacts");
  }
  std::vector<std::uint8_t> level(n, 0);
  std::vector<std::uint8_t> seen(n, 0);
  for (const auto& s : shards) {
    for (std::size_t i = 0; i < s.members.size(); ++i) {
      const NodeId g = s.members[i];
      if (g >= n) throw BuildError("merge: global id out of range");
      level[g] = std::max<std::uint8_t>(level[g], static_cast<std::uint8_t>(s.graph.level(static_cast<NodeId>(i))));
      seen[g] = 1;
    }
  }
  for (std::size_t v = 0; v < n; ++v) {
    if (seen[v] == 0) throw BuildError("merge: item " + std::to_string(v) + " is in no shard");
  }

  AdjacencyGraph g(opt.M);
  for (std::size_t v = 0; v < n; ++v) g.add_node(level[v]);
  for (const auto& s : shards) {
    for (std::size_t i = 0; i < s.members.size(); ++i) {
      const NodeId gv = s.members[i];
      const auto lv = static_cast<NodeId>(i);
      for (std::size_t l = 0; l <= s.graph.level(lv); ++l) {
        auto& lst = g.links(gv, l);
        for (NodeId u : s.graph.neighbors(lv, l)) {
          const NodeId gu = s.members[u];
          if (std::find(lst.begin(), lst.end(), gu) == lst.end()) lst.push_back(gu);
        }
      }
    }
  }

  for (std::size_t v = 0; v < n; ++v) {
    Xoshiro256 rng(mix_seed(opt.seed ^ 0x6d65726765ULL, v));
    for (std::size_t l = 0; l <= level[v]; ++l) {
      auto& lst = g.links(static_cast<NodeId>(v), l);
      if (lst.size() <= opt.M) continue;
      std::optional<NodeId> pinned;
      if (opt.keep_closest) {
        const Vector x = pq_decode(*opt.pq, opt.codes->code(v));
        float best = std::numeric_limits<float>::infinity();
        for (NodeId u : lst) {
          const Vector y = pq_decode(*opt.pq, opt.codes->code(u));
          const float d = detail::sum_sq_diff(x.data(), y.data(), x.size());
          if (d < best || (d == best && u < *pinned)) {
            best = d;
            pinned = u;
          }
        }
      }
      while (lst.size() > opt.M) {
        const auto i = static_cast<std::size_t>(rng.below(lst.size()));
        if (pinned && lst[i] == *pinned) continue;
        lst.erase(lst.begin() + static_cast<std::ptrdiff_t>(i));
      }
    }
  }

  std::size_t top = 0;
  for (std::size_t v = 0; v < n; ++v) top = std::max<std::size_t>(top, level[v]);
  for (std::size_t v = 0; v < n; ++v) {
    if (level[v] == top) {
      g.set_entry_point(static_cast<NodeId>(v));
      break;
    }
  }
  return PrunedGraph::freeze(g);
}

namespace detail {

inline std::filesystem::path shard_path(const std::filesystem::path& dir, std::size_t s,
                                        const char* ext) {
  return dir / ("shard-" + std::to_string(s) + ext);
}

inline void save_shard(const std::filesystem::path& dir, std::size_t s, const ShardGraph& sg) {
  sg.graph.save(shard_path(dir, s, ".graph"));
  io::Writer w;
  w.magic("LSH1");
  w.u32(static_cast<std::uint32_t>(sg.dim));
  w.u8(static_cast<std::uint8_t>(sg.metric));
  w.u64(sg.members.size());
  for (NodeId v : sg.members) w.u32(v);
  w.save(shard_path(dir, s, ".ids"));
}

inline ShardGraph load_shard(const std::filesystem::path& dir, std::size_t s) {
  ShardGraph sg;
  sg.graph = PrunedGraph::load(shard_path(dir, s, ".graph"));
  const auto bytes = io::read_file(shard_path(dir, s, ".ids"));
  io::Reader r(bytes);
  r.expect_magic("LSH1", "shard ids");
  sg.dim = r.u32("shard ids");
  sg.metric = static_cast<Metric>(r.u8("shard ids"));
  const std::uint64_t count = r.u64("shard ids");
  r.need(count * 4, "shard ids");
  sg.members.resize(count);
  for (auto& v : sg.members) v = r.u32("shard ids");
  r.expect_end("shard ids");
  return sg;
}

}  // namespace detail

struct ShardBuildReport {
  std::vector<std::size_t> shard_sizes;
  GraphStats pruned;
  HubSet hubs;
  std::int64_t peak_resident = 0;
};

struct ShardedIndex {
  PrunedGraph graph;
  PqModel pq;
  PqCodes codes;
  ShardPlan plan;
  ShardBuildReport report;
};

// Plan, per-shard reference builds (degrees summed per global id), global hub
// selection, per-shard pruned builds, merge. Exact embeddings are resident for
// at most one shard (or the planning sample) at a time.
inline ShardedIndex build_sharded(const ItemStore& items, BuildParams params,
                                  const ShardOptions& opt, EmbeddingProvider& provider,
                                  ResidentCounter* counter = nullptr) {
  const std::size_t n = items.size();
  if (n == 0) throw BuildError("build_sharded: no items");
  params = resolve_budget(params, n, nullptr);
  params.validate();
  ShardedIndex out;
  PlanResult planned = plan_shards(items, opt, params, provider, counter);
  out.plan = std::move(planned.plan);
  out.pq = std::move(planned.pq);
  out.codes = std::move(planned.codes);

  std::vector<std::vector<NodeId>> members(out.plan.k_shards);
  for (std::size_t s = 0; s < out.plan.k_shards; ++s) {
    members[s] = out.plan.members(s);
    out.report.shard_sizes.push_back(members[s].size());
  }

  std::vector<std::size_t> degrees(n, 0);
  for (std::size_t s = 0; s < out.plan.k_shards; ++s) {
    if (members[s].empty()) continue;
    const ShardGraph ref = build_shard(items, members[s], params, nullptr, provider, counter);
    for (std::size_t i = 0; i < ref.members.size(); ++i) {
      degrees[ref.members[i]] += ref.graph.neighbors(static_cast<NodeId>(i), 0).size();
    }
  }
  out.report.hubs = select_hubs(degrees, params.beta, n);

  std::vector<ShardGraph> shards;
  std::vector<std::size_t> saved;
  if (opt.work_dir) std::filesystem::create_directories(*opt.work_dir);
  for (std::size_t s = 0; s < out.plan.k_shards; ++s) {
    if (members[s].empty()) continue;
    ShardGraph sg = build_shard(items, members[s], params, &out.report.hubs, provider, counter);
    sg.graph.validate();
    if (opt.work_dir) {
      detail::save_shard(*opt.work_dir, s, sg);
      saved.push_back(s);
    } else {
      shards.push_back(std::move(sg));
    }
  }
  for (std::size_t s : saved) shards.push_back(detail::load_shard(*opt.work_dir, s));

  MergeOptions mo;
  mo.M = params.M;
  mo.seed = params.seed;
  mo.keep_closest = opt.keep_closest;
  mo.pq = &out.pq;
  mo.codes = &out.codes;
  out.graph = merge_shards(shards, n, mo);
  if (opt.work_dir && !opt.keep_shards) {
    for (std::size_t s : saved) {
      std::filesystem::remove(detail::shard_path(*opt.work_dir, s, ".graph"));
      std::filesystem::remove(detail::shard_path(*opt.work_dir, s, ".ids"));
    }
    std::error_code ec;
    std::filesystem::remove(*opt.work_dir, ec);  // only succeeds when empty
  }
  out.report.pruned = degree_stats(out.graph);
  if (counter != nullptr) out.report.peak_resident = counter->peak();
  return out;
}

}  // namespace rcann
