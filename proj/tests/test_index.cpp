#include <gtest/gtest.h>

#include "common.hpp"

using namespace testing_support;

namespace {

// An index directory over the first n fixture items.
fs::path make_dir(const TempDir& tmp, std::size_t n, std::size_t shards = 1) {
  const fs::path dir = tmp / "ix";
  fs::create_directories(dir);
  fixture_items(n).save(dir);
  SyntheticProvider p(kDim, kProviderSeed);
  build_directory(dir, fixture_params(), p, shards);
  return dir;
}

SearchParams exact_params(std::size_t ef, std::size_t k = 3) {
  SearchParams sp;
  sp.k = k;
  sp.ef = ef;
  sp.mode = SearchMode::exact_bestfirst;
  return sp;
}

std::map<std::string, std::vector<std::uint8_t>> snapshot(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != ".lock") {
      out[e.path().filename().string()] = file_bytes(e.path());
    }
  }
  return out;
}

}  // namespace

TEST(IndexDir, BuildWritesArtifactsAndMeta) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 500);
  for (const char* f : {kGraphFile, kDeletedFile, kPqFile, kMetaFile, "items.idx", "items.dat"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_FALSE(fs::exists(dir / kLogFile));
  const IndexMeta m = IndexMeta::load(dir);
  EXPECT_EQ(m.n, 500u);
  EXPECT_EQ(m.dim, kDim);
  EXPECT_EQ(m.pq_subspaces, 8u);
  EXPECT_EQ(IndexMeta::parse(m.to_text()).to_text(), m.to_text());
}

TEST(IndexDir, BuildWithoutItemsIsAnError) {
  TempDir tmp;
  SyntheticProvider p(kDim, kProviderSeed);
  EXPECT_THROW(build_directory(tmp.path(), fixture_params(), p), Error);
}

TEST(IndexDir, SearchMatchesOracle) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 500);
  SyntheticProvider p(kDim, kProviderSeed);
  Index ix = Index::open(dir, p);
  const Matrix data = embed_rows(fixture_items(500));
  const Matrix qs = fixture_queries(10);
  for (std::size_t q = 0; q < qs.rows(); ++q) {
    EXPECT_EQ(ix.search(qs.row(q), exact_params(500)).ids(), oracle_topk(data, qs.row(q), 3, Metric::cosine));
  }
  // Text queries embed through the provider, vector literals are parsed.
  EXPECT_EQ(ix.embed_query(query_text(0)), Vector(qs.row(0).begin(), qs.row(0).end()));
  EXPECT_THROW(ix.embed_query("[1, 2]"), InvalidArgument);
  std::string lit = "[";
  for (std::size_t i = 0; i < kDim; ++i) lit += i == 0 ? "0.5" : ", 0";
  EXPECT_EQ(ix.embed_query(lit + "]").front(), 0.5f);
}

TEST(IndexDir, ShardedBuildOpens) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 600, 3);
  EXPECT_FALSE(fs::exists(dir / "shards.tmp"));
  SyntheticProvider p(kDim, kProviderSeed);
  Index ix = Index::open(dir, p);
  EXPECT_EQ(ix.meta().shards, 3u);
  EXPECT_EQ(ix.size(), 600u);
  EXPECT_EQ(ix.search(fixture_queries(1).row(0), exact_params(50)).results.size(), 3u);
}

TEST(IndexDir, ProviderMismatchIsRejected) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 300);
  SyntheticProvider other_seed(kDim, kProviderSeed + 1);
  try {
    Index::open(dir, other_seed);
    FAIL();
  } catch (const ProviderError& e) {
    EXPECT_EQ(e.code(), ExitCode::provider);
  }
  SyntheticProvider other_dim(16, kProviderSeed);
  EXPECT_THROW(Index::open(dir, other_dim), ProviderError);
}

TEST(IndexDir, WritersAreExclusive) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 300);
  SyntheticProvider p(kDim, kProviderSeed);
  {
    Index writer = Index::open(dir, p);
    EXPECT_THROW(Index::open(dir, p), Error);
    IndexOptions ro;
    ro.read_only = true;
    EXPECT_THROW(Index::open(dir, p, ro), Error);
  }
  IndexOptions ro;
  ro.read_only = true;
  Index r1 = Index::open(dir, p, ro);
  Index r2 = Index::open(dir, p, ro);
  EXPECT_THROW(r1.add("x"), InvalidArgument);
  EXPECT_THROW(Index::open(dir, p), Error);
}

TEST(IndexDir, MutationsReplayAfterReopen) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 500);
  SyntheticProvider p(kDim, kProviderSeed);
  PrunedGraph live;
  std::vector<NodeId> after;
  const Vector q = embed_batch(p, std::vector<EmbeddingRequest>{{0, item_text(9001)}}).front();
  {
    Index ix = Index::open(dir, p);
    EXPECT_EQ(ix.add(item_text(9000)).id, 500u);
    const std::vector<std::string> more{item_text(9001), item_text(9002)};
    EXPECT_EQ(ix.buffer_add(more), (std::vector<NodeId>{501, 502}));
    // Buffered items are searchable before they enter the graph.
    EXPECT_EQ(ix.search(q, exact_params(50, 1)).results.front().id, 501u);
    EXPECT_TRUE(ix.remove(3).newly_deleted);
    EXPECT_FALSE(ix.remove(3).newly_deleted);
    EXPECT_TRUE(ix.remove(502).newly_deleted);  // drains first
    EXPECT_TRUE(ix.buffer().empty());
    live = ix.data().graph.compact();
    after = ix.search(q, exact_params(100)).ids();
  }
  Index again = Index::open(dir, p);
  EXPECT_EQ(again.size(), 503u);
  EXPECT_EQ(again.data().graph.compact(), live);
  EXPECT_EQ(again.search(q, exact_params(100)).ids(), after);
}

TEST(IndexDir, UndrainedBufferSurvivesReopen) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 300);
  SyntheticProvider p(kDim, kProviderSeed);
  {
    Index ix = Index::open(dir, p);
    const std::vector<std::string> more{item_text(7000)};
    ix.buffer_add(more);
  }
  Index ix = Index::open(dir, p);
  EXPECT_EQ(ix.buffer().size(), 1u);
  EXPECT_EQ(ix.size(), 301u);
  EXPECT_EQ(ix.data().graph.size(), 300u);
}

TEST(IndexDir, CompactIsIdempotent) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 400);
  SyntheticProvider p(kDim, kProviderSeed);
  {
    Index ix = Index::open(dir, p);
    ix.add(item_text(8000));
    const std::vector<std::string> more{item_text(8001)};
    ix.buffer_add(more);
    ix.remove(10);
    ix.compact();
    EXPECT_FALSE(fs::exists(dir / kLogFile));
    EXPECT_EQ(ix.meta().n, 402u);
  }
  const auto once = snapshot(dir);
  {
    Index ix = Index::open(dir, p);
    EXPECT_TRUE(ix.data().graph.is_deleted(10));
    ix.compact();
  }
  EXPECT_EQ(snapshot(dir), once);
}

TEST(IndexDir, CacheCutsRecomputation) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 500);
  SyntheticProvider p(kDim, kProviderSeed);
  IndexOptions opt;
  opt.cache_percent = 100.0;
  opt.read_only = true;
  Index ix = Index::open(dir, p, opt);
  ASSERT_NE(ix.cache(), nullptr);
  EXPECT_EQ(ix.search(fixture_queries(1).row(0), exact_params(50)).recomputations, 0u);
}

TEST(IndexDir, MissingArtifactsAndCorruption) {
  TempDir tmp;
  const fs::path dir = make_dir(tmp, 300);
  SyntheticProvider p(kDim, kProviderSeed);
  fs::resize_file(dir / kGraphFile, 20);
  EXPECT_THROW(Index::open(dir, p), FormatError);
  fs::remove(dir / kGraphFile);
  EXPECT_THROW(Index::open(dir, p), Error);
}
