#include <gtest/gtest.h>

#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "common.hpp"

using namespace testing_support;

namespace {

struct CliRun {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CliRun cli(const TempDir& tmp, const std::string& args) {
  const fs::path out = tmp / "stdout.txt", err = tmp / "stderr.txt";
  const std::string cmd = "'" + tool_path("rcann") + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int raw = std::system(cmd.c_str());
  CliRun r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split_tabs(const std::string& l) {
  std::vector<std::string> out;
  std::istringstream in(l);
  for (std::string f; std::getline(in, f, '\t');) out.push_back(f);
  return out;
}

void write_items(const fs::path& p, std::size_t n) {
  std::ofstream out(p);
  for (std::size_t i = 0; i < n; ++i) out << item_text(i) << "\n";
}

const std::string kProv = " --dim 32 --provider-seed 7";

// Ingests and builds n fixture items into tmp/ix.
std::string built_index(const TempDir& tmp, std::size_t n) {
  write_items(tmp / "items.txt", n);
  const std::string dir = (tmp / "ix").string();
  EXPECT_EQ(cli(tmp, "ingest " + (tmp / "items.txt").string() + " " + dir).status, 0);
  const CliRun b = cli(tmp, "build " + dir + kProv + " --seed 1 --M 16 --m 3 --pq-subspaces 8");
  EXPECT_EQ(b.status, 0) << b.err;
  return dir;
}

}  // namespace

TEST(Cli, IngestCountsLinesAndIsReproducible) {
  TempDir tmp;
  {
    std::ofstream f(tmp / "three.txt");
    f << "alpha\n\nbeta\r\ngamma\n";
  }
  const std::string dir = (tmp / "ix").string();
  CliRun r = cli(tmp, "ingest " + (tmp / "three.txt").string() + " " + dir);
  EXPECT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("ingested 3 items"), std::string::npos) << r.out;
  const ItemStore s = ItemStore::load(dir);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.get(1), "beta");
  const auto dat = file_bytes(fs::path(dir) / "items.dat");
  const auto idx = file_bytes(fs::path(dir) / "items.idx");
  EXPECT_EQ(cli(tmp, "ingest " + (tmp / "three.txt").string() + " " + dir).status, 0);
  EXPECT_EQ(file_bytes(fs::path(dir) / "items.dat"), dat);
  EXPECT_EQ(file_bytes(fs::path(dir) / "items.idx"), idx);
}

TEST(Cli, IngestErrors) {
  TempDir tmp;
  { std::ofstream f(tmp / "empty.txt"); }
  EXPECT_EQ(cli(tmp, "ingest " + (tmp / "empty.txt").string() + " " + (tmp / "ix").string()).status, 3);
  EXPECT_EQ(cli(tmp, "ingest " + (tmp / "missing.txt").string() + " " + (tmp / "ix").string()).status, 3);
}

TEST(Cli, UsageErrorsExitTwo) {
  TempDir tmp;
  EXPECT_EQ(cli(tmp, "").status, 2);
  EXPECT_EQ(cli(tmp, "frobnicate").status, 2);
  EXPECT_EQ(cli(tmp, "search").status, 2);
  EXPECT_EQ(cli(tmp, "build x --ef notanumber").status, 2);
  EXPECT_EQ(cli(tmp, "--help").status, 0);
}

TEST(Cli, BuildSearchDelete) {
  TempDir tmp;
  const std::string dir = built_index(tmp, 400);
  const Matrix data = embed_rows(fixture_items(400));
  const Matrix qs = fixture_queries(3);

  CliRun r = cli(tmp, "search " + dir + " --query '" + query_text(0) + "' --k 5");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(lines(r.out).size(), 5u);

  // Exhaustive best-first agrees with the oracle.
  const auto truth = oracle_topk(data, qs.row(0), 3, Metric::cosine);
  r = cli(tmp, "search " + dir + " --query '" + query_text(0) + "' --mode exact --ef 400");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto ls = lines(r.out);
  ASSERT_EQ(ls.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto f = split_tabs(ls[i]);
    ASSERT_GE(f.size(), 4u);
    EXPECT_EQ(f[0], std::to_string(i + 1));
    EXPECT_EQ(f[1], std::to_string(truth[i]));
    EXPECT_EQ(f[3], item_text(truth[i]));
  }

  r = cli(tmp, "delete " + dir + " " + std::to_string(truth[0]));
  EXPECT_EQ(r.status, 0) << r.err;
  r = cli(tmp, "search " + dir + " --query '" + query_text(0) + "' --mode exact --ef 400");
  ASSERT_EQ(r.status, 0);
  EXPECT_EQ(split_tabs(lines(r.out)[0])[1], std::to_string(truth[1]));
  for (const auto& l : lines(r.out)) EXPECT_NE(split_tabs(l)[1], std::to_string(truth[0]));
}

TEST(Cli, ReportIsJson) {
  TempDir tmp;
  const std::string dir = built_index(tmp, 300);
  {
    std::ofstream f(tmp / "queries.txt");
    f << query_text(0) << "\n" << query_text(1) << "\n";
  }
  const CliRun r = cli(tmp, "search " + dir + " --queries " + (tmp / "queries.txt").string() +
                               " --report --threads 2");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto ls = lines(r.out);
  ASSERT_EQ(ls.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto j = nlohmann::json::parse(ls[i]);
    EXPECT_EQ(j.at("query").get<std::size_t>(), i);
    EXPECT_EQ(j.at("results").size(), 3u);
    std::size_t sum = 0;
    for (const auto& b : j.at("batches")) sum += b.get<std::size_t>();
    EXPECT_EQ(sum, j.at("recomputations").get<std::size_t>());
    EXPECT_FALSE(j.contains("wall_seconds"));
  }
}

TEST(Cli, AddBufferDrainCompact) {
  TempDir tmp;
  const std::string dir = built_index(tmp, 300);
  CliRun r = cli(tmp, "add " + dir + " --text '" + item_text(5000) + "'");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(r.out.rfind("added 300", 0), 0u) << r.out;
  r = cli(tmp, "add " + dir + " --buffer --text '" + item_text(5001) + "'");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(r.out, "buffered 301\n");
  r = cli(tmp, "search " + dir + " --query '" + item_text(5001) + "' --k 1");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(split_tabs(lines(r.out)[0])[1], "301");
  r = cli(tmp, "drain " + dir);
  EXPECT_EQ(r.out, "drained 1 items\n");
  r = cli(tmp, "compact " + dir);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(r.out, "compacted 302 nodes\n");
  EXPECT_FALSE(fs::exists(fs::path(dir) / "mutations.log"));
  EXPECT_EQ(cli(tmp, "add " + dir + " --variant bogus --text x").status, 2);
  EXPECT_EQ(cli(tmp, "delete " + dir + " 99999").status, 2);
}

TEST(Cli, ProviderMismatchExitsFour) {
  TempDir tmp;
  const std::string dir = built_index(tmp, 300);
  const CliRun r = cli(tmp, "search " + dir + " --query hello --provider-seed 8");
  EXPECT_EQ(r.status, 4);
  EXPECT_NE(r.err.find("different embedding"), std::string::npos) << r.err;
}

TEST(Cli, ExternalProviderEndToEnd) {
  TempDir tmp;
  write_items(tmp / "items.txt", 300);
  const std::string dir = (tmp / "ix").string();
  ASSERT_EQ(cli(tmp, "ingest " + (tmp / "items.txt").string() + " " + dir).status, 0);
  const std::string ext = " --provider external --dim 32 --model synth --endpoint '" +
                          tool_path("rcann_embed_server") + " --dim 32 --seed 7'";
  CliRun r = cli(tmp, "build " + dir + ext + " --pq-subspaces 8");
  ASSERT_EQ(r.status, 0) << r.err;
  r = cli(tmp, "search " + dir + " --query '" + item_text(12) + "' --k 1");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(split_tabs(lines(r.out)[0])[1], "12");
  // A dead endpoint is a provider failure.
  r = cli(tmp, "search " + dir + " --query x --endpoint unix:" + (tmp / "nope.sock").string());
  EXPECT_EQ(r.status, 4) << r.err;
}

TEST(Cli, EvalWritesTables) {
  TempDir tmp;
  const std::string dir = built_index(tmp, 300);
  {
    std::ofstream f(tmp / "queries.txt");
    for (std::size_t i = 0; i < 5; ++i) f << query_text(i) << "\n";
  }
  const CliRun r = cli(tmp, "eval " + dir + " --queries " + (tmp / "queries.txt").string() + " --out " +
                               (tmp / "eval").string() + " --efs 10,50 --alphas 30");
  ASSERT_EQ(r.status, 0) << r.err;
  for (const char* f : {"curves.tsv", "targets.tsv", "degrees.tsv", "graphs.tsv", "stages.tsv"}) {
    EXPECT_TRUE(fs::exists(tmp / "eval" / f)) << f;
  }
  // 4 graphs x 2 settings x 2 ef values, plus the header.
  EXPECT_EQ(lines(slurp(tmp / "eval" / "curves.tsv")).size(), 17u);
}
