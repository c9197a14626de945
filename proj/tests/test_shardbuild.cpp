#include <gtest/gtest.h>

#include "common.hpp"

using namespace testing_support;

namespace {

// Two tight blobs at +-3 on the first axis; items 0..n/2-1 belong to the first.
Matrix two_blobs(std::size_t n, std::size_t dim) {
  Matrix m(n, dim);
  Xoshiro256 rng(99);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = m.row(i);
    for (float& x : r) x = static_cast<float>((rng.uniform() - 0.5) * 0.5);
    r[0] += i < n / 2 ? 3.0f : -3.0f;
  }
  return m;
}

ItemStore numbered_items(std::size_t n) {
  ItemStore s;
  for (std::size_t i = 0; i < n; ++i) s.append("blob " + std::to_string(i));
  return s;
}

PrunedGraph star(std::size_t n, NodeId center, std::span<const NodeId> leaves) {
  AdjacencyGraph g(32);
  for (std::size_t i = 0; i < n; ++i) g.add_node(0);
  g.links(center, 0).assign(leaves.begin(), leaves.end());
  for (NodeId v : leaves) g.links(v, 0).push_back(center);
  return PrunedGraph::freeze(g);
}

void expect_same_lists(const PrunedGraph& a, const PrunedGraph& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t v = 0; v < a.size(); ++v) {
    const auto id = static_cast<NodeId>(v);
    ASSERT_EQ(a.level(id), b.level(id)) << v;
    for (std::size_t l = 0; l <= a.level(id); ++l) {
      const auto x = a.neighbors(id, l), y = b.neighbors(id, l);
      ASSERT_EQ(std::vector<NodeId>(x.begin(), x.end()), std::vector<NodeId>(y.begin(), y.end()))
          << "node " << v << " level " << l;
    }
  }
}

}  // namespace

TEST(PlanShards, SingleShardTakesEverything) {
  SyntheticProvider p(kDim, kProviderSeed);
  ShardOptions opt;
  opt.k_shards = 1;
  const PlanResult r = plan_shards(fixture_items(300), opt, fixture_params(), p);
  ASSERT_EQ(r.plan.assignment.size(), 300u);
  for (const auto& a : r.plan.assignment) EXPECT_EQ(a, (std::array<std::uint32_t, 2>{0, 0}));
  EXPECT_EQ(r.plan.members(0).size(), 300u);
  EXPECT_EQ(r.codes.size(), 300u);
}

TEST(PlanShards, SeparatedClustersStayTogether) {
  const Matrix rows = two_blobs(400, 8);
  TableProvider p(rows);
  BuildParams params = fixture_params();
  params.metric = Metric::l2;
  params.pq_subspaces = 2;
  ShardOptions opt;
  opt.k_shards = 2;
  opt.sample_size = 100;
  const PlanResult r = plan_shards(numbered_items(400), opt, params, p);
  for (std::size_t half = 0; half < 2; ++half) {
    std::array<std::size_t, 2> votes{};
    for (std::size_t i = half * 200; i < (half + 1) * 200; ++i) ++votes[r.plan.assignment[i][0]];
    EXPECT_GE(std::max(votes[0], votes[1]), 190u) << "cluster " << half;
  }
  // The two clusters end up with different primaries.
  EXPECT_NE(r.plan.assignment[0][0], r.plan.assignment[399][0]);
}

TEST(PlanShards, ResidentEmbeddingsStayBounded) {
  ProviderConfig cfg;
  cfg.dim = kDim;
  cfg.seed = kProviderSeed;
  cfg.max_batch = 64;
  SyntheticProvider p(cfg);
  ShardOptions opt;
  opt.k_shards = 4;
  ResidentCounter counter;
  const std::size_t n = 2000;
  plan_shards(fixture_items(n), opt, fixture_params(), p, &counter);
  const std::size_t sample = std::min<std::size_t>({n, 20000, (n + 3) / 4});
  EXPECT_LE(counter.peak(), static_cast<std::int64_t>(sample + 64));
  EXPECT_EQ(counter.current(), 0);
}

TEST(PlanShards, Errors) {
  SyntheticProvider p(kDim, kProviderSeed);
  ShardOptions opt;
  opt.k_shards = 0;
  EXPECT_THROW(plan_shards(fixture_items(10), opt, fixture_params(), p), InvalidArgument);
  opt.k_shards = 2;
  EXPECT_THROW(plan_shards(ItemStore{}, opt, fixture_params(), p), BuildError);
  FailingProvider bad(p, 5);
  EXPECT_THROW(plan_shards(fixture_items(100), opt, fixture_params(), bad), BuildError);
}

TEST(MergeShards, GraphMergedWithItselfIsUnchanged) {
  SyntheticProvider p(kDim, kProviderSeed);
  const ItemStore items = fixture_items(500);
  std::vector<NodeId> all(500);
  for (NodeId i = 0; i < 500; ++i) all[i] = i;
  const ShardGraph sg = build_shard(items, all, fixture_params(), nullptr, p);
  const std::vector<ShardGraph> twice{sg, sg};
  MergeOptions mo;
  mo.M = 16;
  expect_same_lists(merge_shards(twice, 500, mo), sg.graph);
}

TEST(MergeShards, DisjointListsAreThinnedToM) {
  // Node 0 sees 1..10 in shard A and 11..20 in shard B.
  std::vector<NodeId> leaves_a, leaves_b;
  for (NodeId i = 1; i <= 10; ++i) leaves_a.push_back(i);
  for (NodeId i = 1; i <= 10; ++i) leaves_b.push_back(i);
  ShardGraph a{{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, star(11, 0, leaves_a), 4, Metric::l2};
  ShardGraph b{{0, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20}, star(11, 0, leaves_b), 4, Metric::l2};
  MergeOptions mo;
  mo.M = 16;
  mo.seed = 3;
  const std::vector<ShardGraph> shards{a, b};
  const PrunedGraph g = merge_shards(shards, 21, mo);
  const auto nb = g.neighbors(0, 0);
  EXPECT_EQ(nb.size(), 16u);
  std::vector<NodeId> sorted(nb.begin(), nb.end());
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (NodeId u : sorted) {
    EXPECT_GE(u, 1u);
    EXPECT_LE(u, 20u);
  }
  for (NodeId v = 1; v <= 20; ++v) EXPECT_EQ(g.neighbors(v, 0).size(), 1u);
  // Same seed, same drops.
  EXPECT_EQ(merge_shards(shards, 21, mo), g);
}

TEST(MergeShards, Errors) {
  ShardGraph a{{0, 1}, star(2, 0, std::vector<NodeId>{1}), 4, Metric::l2};
  ShardGraph b = a;
  b.dim = 8;
  MergeOptions mo;
  EXPECT_THROW(merge_shards(std::vector<ShardGraph>{a, b}, 2, mo), BuildError);
  EXPECT_THROW(merge_shards(std::vector<ShardGraph>{a}, 3, mo), BuildError);  // item 2 uncovered
  EXPECT_THROW(merge_shards(std::vector<ShardGraph>{}, 2, mo), BuildError);
}

TEST(BuildShard, WholeDatasetShardMatchesMonolithic) {
  SyntheticProvider p(kDim, kProviderSeed);
  const ItemStore items = fixture_items(1000);
  const BuiltIndex mono = build_index(items, fixture_params(), p);
  std::vector<NodeId> all(1000);
  for (NodeId i = 0; i < 1000; ++i) all[i] = i;
  const ShardGraph sg = build_shard(items, all, fixture_params(), &mono.report.hubs, p);
  EXPECT_EQ(sg.graph, mono.graph);
}

TEST(BuildSharded, CoverageDegreeCapAndResidency) {
  SyntheticProvider p(kDim, kProviderSeed);
  ShardOptions opt;
  opt.k_shards = 4;
  opt.seed = 1;
  ResidentCounter counter;
  const std::size_t n = 2000;
  const ShardedIndex s = build_sharded(fixture_items(n), fixture_params(), opt, p, &counter);
  EXPECT_NO_THROW(s.graph.validate());
  EXPECT_EQ(s.graph.size(), n);
  EXPECT_LE(s.report.pruned.max_degree, 16u);
  std::size_t total = 0;
  for (std::size_t sz : s.report.shard_sizes) total += sz;
  EXPECT_GE(total, n);
  EXPECT_LE(total, 2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = s.plan.assignment[i];
    EXPECT_LT(a[0], 4u);
    EXPECT_LT(a[1], 4u);
  }
  EXPECT_EQ(s.report.hubs.size(), hub_count(2.0, n));
  EXPECT_LE(s.report.peak_resident, static_cast<std::int64_t>(0.6 * n));
  EXPECT_EQ(s.codes.size(), n);
}

TEST(BuildSharded, WorkDirIsCleanedUp) {
  TempDir dir;
  SyntheticProvider p(kDim, kProviderSeed);
  ShardOptions opt;
  opt.k_shards = 2;
  opt.work_dir = dir / "shards";
  const ShardedIndex with_dir = build_sharded(fixture_items(400), fixture_params(), opt, p);
  EXPECT_FALSE(fs::exists(dir / "shards"));
  opt.work_dir.reset();
  const ShardedIndex in_memory = build_sharded(fixture_items(400), fixture_params(), opt, p);
  EXPECT_EQ(with_dir.graph, in_memory.graph);
}
