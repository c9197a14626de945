#include <gtest/gtest.h>

#include <fstream>

#include "common.hpp"

using namespace testing_support;

namespace {

struct Small {
  ItemStore items;
  Matrix data;
  Matrix queries;
  BuiltIndex built;
};

const Small& small() {
  static const Small s = [] {
    Small x;
    x.items = fixture_items(1000);
    x.data = embed_rows(x.items);
    x.queries = fixture_queries(20);
    SyntheticProvider p(kDim, kProviderSeed);
    x.built = build_index(x.items, fixture_params(), p);
    return x;
  }();
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(BruteForce, LineExample) {
  Matrix data(0, 1);
  for (float x : {0.0f, 1.0f, 2.0f, 3.0f, 4.0f}) data.append(std::vector<float>{x});
  const std::vector<float> q{2.4f};
  EXPECT_EQ(ids_of(brute_force_topk(data, q, 2, Metric::l2)), (std::vector<NodeId>{2, 3}));
  // k == n returns everything in order; ties break on id.
  const std::vector<float> mid{1.5f};
  EXPECT_EQ(ids_of(brute_force_topk(data, mid, 5, Metric::l2)), (std::vector<NodeId>{1, 2, 0, 3, 4}));
  EXPECT_EQ(brute_force_topk(data, mid, 9, Metric::l2).size(), 5u);
  const auto odd = [](NodeId v) { return v % 2 == 1; };
  EXPECT_EQ(ids_of(brute_force_topk(data, q, 2, Metric::l2, odd)), (std::vector<NodeId>{3, 1}));
}

TEST(BruteForce, AgreesWithOracleAndStreamingScan) {
  const auto& s = small();
  SyntheticProvider p(kDim, kProviderSeed);
  for (std::size_t q = 0; q < s.queries.rows(); ++q) {
    const auto a = brute_force_topk(s.data, s.queries.row(q), 10, Metric::cosine);
    const auto b = brute_force_topk(s.items, p, s.queries.row(q), 10, Metric::cosine, {}, 97);
    EXPECT_EQ(a, b);
    EXPECT_EQ(ids_of(a), oracle_topk(s.data, s.queries.row(q), 10, Metric::cosine));
  }
}

TEST(RecallAtK, Examples) {
  const std::vector<NodeId> truth{1, 2, 3};
  EXPECT_NEAR(recall_at_k(std::vector<NodeId>{1, 2, 9}, truth), 2.0 / 3.0, 1e-12);
  EXPECT_EQ(recall_at_k(std::vector<NodeId>{3, 2, 1}, truth), 1.0);
  EXPECT_EQ(recall_at_k(std::vector<NodeId>{7, 8, 9}, truth), 0.0);
  EXPECT_EQ(recall_at_k(std::vector<NodeId>{1, 1, 1}, truth), 1.0 / 3.0);
  EXPECT_THROW(recall_at_k(std::vector<NodeId>{1}, std::vector<NodeId>{}), InvalidArgument);
}

TEST(Evaluate, MatchesPerQueryRecall) {
  const auto& s = small();
  StoredSource src(s.data);
  Searcher<PrunedGraph> searcher(s.built.graph, src, Metric::cosine, &s.built.pq, &s.built.codes);
  const GroundTruth gt = ground_truth(s.data, s.queries, 3, Metric::cosine);
  SearchParams p;
  p.ef = 20;
  p.mode = SearchMode::two_level;
  std::vector<SearchReport> reports;
  const TradeoffRow row = evaluate(searcher, s.queries, gt, p, &reports);
  ASSERT_EQ(reports.size(), s.queries.rows());
  double recall = 0, recomp = 0;
  for (std::size_t q = 0; q < reports.size(); ++q) {
    recall += oracle_recall(reports[q].ids(), oracle_topk(s.data, s.queries.row(q), 3, Metric::cosine));
    recomp += static_cast<double>(reports[q].recomputations);
  }
  EXPECT_NEAR(row.recall, recall / 20.0, 1e-12);
  EXPECT_NEAR(row.recomputations, recomp / 20.0, 1e-12);
}

TEST(TuneEf, SyntheticCurves) {
  const auto linear = [](std::size_t ef) { return std::min(1.0, static_cast<double>(ef) / 100.0); };
  TuneResult r = tune_ef(linear, 3, 512, 0.0);
  EXPECT_TRUE(r.feasible);
  EXPECT_EQ(r.ef, 3u);
  r = tune_ef(linear, 3, 512, 0.9);
  EXPECT_EQ(r.ef, 90u);
  r = tune_ef(linear, 3, 50, 0.9);
  EXPECT_FALSE(r.feasible);
  EXPECT_EQ(r.ef, 50u);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
  // A bump at 10..11 is invisible to the bisection, which settles on 100.
  const auto bumpy = [](std::size_t ef) { return ef >= 100 || (ef >= 10 && ef < 12) ? 1.0 : 0.0; };
  r = tune_ef(bumpy, 3, 512, 1.0);
  EXPECT_TRUE(r.feasible);
  EXPECT_EQ(r.ef, 100u);
  const auto step = [](std::size_t ef) { return ef >= 20 ? 1.0 : 0.0; };
  r = tune_ef(step, 3, 512, 1.0);
  EXPECT_EQ(r.ef, 20u);
  EXPECT_TRUE(r.warnings.empty());
  EXPECT_THROW(tune_ef(step, 0, 10, 1.0), InvalidArgument);
}

TEST(TuneEf, FullRecallOnSmallSet) {
  ItemStore items = fixture_items(100);
  const Matrix data = embed_rows(items);
  SyntheticProvider p(kDim, kProviderSeed);
  BuildParams bp = fixture_params();
  bp.pq_subspaces = 4;
  const BuiltIndex b = build_index(items, bp, p);
  StoredSource src(data);
  Searcher<PrunedGraph> searcher(b.graph, src, Metric::cosine, &b.pq, &b.codes);
  const Matrix qs = fixture_queries(10);
  const GroundTruth gt = ground_truth(data, qs, 3, Metric::cosine);
  SearchParams sp;
  sp.mode = SearchMode::exact_bestfirst;
  const TuneResult r = tune_ef(searcher, qs, gt, sp, 1.0, 100);
  EXPECT_TRUE(r.feasible);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_LE(r.ef, 100u);
  EXPECT_GE(r.ef, 3u);
}

TEST(Baselines, RandomPruneRemovesExactlyHalf) {
  AdjacencyGraph a(10);
  for (int i = 0; i < 100; ++i) a.add_node(i == 0 ? 1 : 0);
  for (NodeId v = 0; v < 100; ++v) {
    for (NodeId j = 1; j <= 10; ++j) a.links(v, 0).push_back((v + j) % 100);
  }
  const PrunedGraph g = PrunedGraph::freeze(a);
  ASSERT_EQ(degree_stats(g).base_edges, 1000u);
  const PrunedGraph r = baseline_random_prune(g, 0.5, 4);
  EXPECT_EQ(degree_stats(r).base_edges, 500u);
  EXPECT_EQ(r, baseline_random_prune(g, 0.5, 4));
  EXPECT_NE(r, baseline_random_prune(g, 0.5, 5));
  // Every surviving edge was in the original.
  for (NodeId v = 0; v < 100; ++v) {
    const auto orig = g.neighbors(v, 0);
    for (NodeId u : r.neighbors(v, 0)) EXPECT_NE(std::find(orig.begin(), orig.end(), u), orig.end());
  }
  EXPECT_THROW(baseline_random_prune(g, 1.0, 4), InvalidArgument);
}

TEST(Baselines, SmallMHalvesTheDegree) {
  const auto& s = small();
  const GraphStats full = s.built.report.unpruned;
  const PrunedGraph half = baseline_small_m(s.data, fixture_params());
  const GraphStats hs = degree_stats(half);
  EXPECT_LE(hs.max_degree, 8u);
  EXPECT_GE(hs.avg_degree, 0.4 * full.avg_degree);
  EXPECT_LE(hs.avg_degree, 0.6 * full.avg_degree);
  SyntheticProvider p(kDim, kProviderSeed);
  EXPECT_EQ(baseline_small_m(s.items, fixture_params(), p), half);
}

TEST(Ablation, CurvesStagesAndFiles) {
  const auto& s = small();
  AblationConfig cfg;
  cfg.efs = {10, 40};
  cfg.alphas = {30, 100};
  cfg.batch = 1;
  cfg.tune_hi = 200;
  StoredSource stage_src(s.data);
  const AblationResult r =
      run_ablation(s.data, s.queries, s.built.graph, s.built.pq, s.built.codes, fixture_params(), cfg, &stage_src);
  EXPECT_EQ(r.curves.size(), 4u * 3u);
  EXPECT_EQ(r.graphs.size(), 4u);
  for (const char* g : {"ours", "unpruned", "random", "small_m"}) {
    const AblationCurve* exact = r.find(g, SearchMode::exact_bestfirst, 100.0);
    const AblationCurve* full = r.find(g, SearchMode::two_level, 100.0);
    ASSERT_NE(exact, nullptr);
    ASSERT_NE(full, nullptr);
    // Full alpha with unit batches is best-first search.
    for (std::size_t i = 0; i < cfg.efs.size(); ++i) {
      EXPECT_EQ(exact->rows[i].recall, full->rows[i].recall) << g;
      EXPECT_EQ(exact->rows[i].recomputations, full->rows[i].recomputations) << g;
    }
  }
  ASSERT_EQ(r.stages.size(), 1u);
  EXPECT_GE(r.stages[0].mean.total(), 0.95 * r.stages[0].wall);
  EXPECT_LE(r.stages[0].mean.total(), r.stages[0].wall * 1.0001);

  TempDir dir;
  write_ablation(r, dir / "out");
  for (const char* f : {"curves.tsv", "targets.tsv", "degrees.tsv", "graphs.tsv", "stages.tsv"}) {
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  }
  const std::string curves = slurp(dir / "out" / "curves.tsv");
  EXPECT_EQ(std::count(curves.begin(), curves.end(), '\n'), 1 + 12 * 2);
  // Everything except timings is reproducible.
  const AblationResult again =
      run_ablation(s.data, s.queries, s.built.graph, s.built.pq, s.built.codes, fixture_params(), cfg);
  write_ablation(again, dir / "again");
  EXPECT_EQ(slurp(dir / "again" / "curves.tsv"), curves);
  EXPECT_EQ(slurp(dir / "again" / "targets.tsv"), slurp(dir / "out" / "targets.tsv"));
}
