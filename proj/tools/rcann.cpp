// rcann: ingest, build, search, update and evaluate an index directory.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rcann/rcann.hpp"

using namespace rcann;
namespace fs = std::filesystem;

namespace {

struct ProviderFlags {
  std::optional<std::string> kind;
  std::optional<std::size_t> dim;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> endpoint;
  std::optional<std::string> model;
  std::optional<int> timeout_ms;
  std::optional<std::size_t> max_batch;

  void add_to(CLI::App* app) {
    app->add_option("--provider", kind, "embedding provider: synthetic or external");
    app->add_option("--dim", dim, "embedding dimension");
    app->add_option("--provider-seed", seed, "synthetic provider seed");
    app->add_option("--endpoint", endpoint, "external provider: shell command or unix:<path>");
    app->add_option("--model", model, "external provider: name of the embedding function");
    app->add_option("--timeout-ms", timeout_ms, "external provider request timeout");
    app->add_option("--provider-batch", max_batch, "max requests per provider call");
  }

  // Flags over `base`, then environment overrides.
  ProviderConfig resolve(ProviderConfig base) const {
    if (kind) base.kind = parse_provider_kind(*kind);
    if (dim) base.dim = *dim;
    if (seed) base.seed = *seed;
    if (endpoint) base.endpoint = *endpoint;
    if (model) base.model = *model;
    if (timeout_ms) base.timeout_ms = *timeout_ms;
    if (max_batch) base.max_batch = *max_batch;
    apply_env_overrides(base);
    base.validate();
    return base;
  }
};

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::string snippet(std::string_view s, std::size_t width = 60) {
  std::string out(s.substr(0, width));
  for (char& c : out) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  if (s.size() > width) out += "...";
  return out;
}

nlohmann::json report_json(const SearchReport& r, bool timings) {
  nlohmann::json j;
  j["results"] = nlohmann::json::array();
  for (const auto& n : r.results) j["results"].push_back({{"id", n.id}, {"distance", n.distance}});
  j["recomputations"] = r.recomputations;
  j["approx_lookups"] = r.approx_lookups;
  j["cache_hits"] = r.cache_hits;
  j["cache_hit_rate"] = r.cache_hit_rate();
  j["batches"] = r.batches;
  j["forced_flush"] = r.forced_flush;
  j["visit_order"] = r.visit_order;
  if (timings) {
    j["stage_times"] = {{"pq_lookup", r.stage_times.pq_lookup},
                        {"payload_fetch", r.stage_times.payload_fetch},
                        {"embed", r.stage_times.embed},
                        {"distance", r.stage_times.distance},
                        {"traversal", r.stage_times.traversal}};
    j["wall_seconds"] = r.wall_seconds;
  }
  return j;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::size_t b = 0;
  while (b <= s.size()) {
    const std::size_t e = std::min(s.find(',', b), s.size());
    if (e > b) out.push_back(std::stod(s.substr(b, e - b)));
    b = e + 1;
  }
  return out;
}

struct Opened {
  std::unique_ptr<EmbeddingProvider> provider;
  std::optional<Index> index;
};

Opened open_index(const fs::path& dir, const ProviderFlags& pf, IndexOptions opt) {
  if (!fs::exists(dir / kMetaFile)) {
    throw Error("no index in " + dir.string() + "; run `rcann build " + dir.string() + "` first");
  }
  const IndexMeta meta = IndexMeta::load(dir);
  Opened o;
  o.provider = make_provider(pf.resolve(meta.provider));
  o.index.emplace(Index::open(dir, *o.provider, opt));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rcann: graph index with embedding recomputation"};
  app.set_config("--config", "", "TOML/INI file supplying any option");
  app.require_subcommand(1);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "store items from a records file or a directory of text files");
  std::string in_path, dir;
  ChunkOptions chunk;
  ingest->add_option("input", in_path, "records file (one item per line) or directory")->required();
  ingest->add_option("index_dir", dir, "index directory")->required();
  ingest->add_option("--chunk-bytes", chunk.chunk_bytes, "chunk window for directory input");
  ingest->add_option("--overlap-bytes", chunk.overlap_bytes, "overlap between chunks");

  // build
  auto* build = app.add_subcommand("build", "build the index over ingested items");
  BuildParams bp;
  ProviderFlags pf;
  std::size_t shards = 1;
  std::optional<std::size_t> budget;
  std::string metric = "cosine";
  build->add_option("index_dir", dir)->required();
  build->add_option("--M", bp.M, "degree cap for hubs and upper levels");
  build->add_option("--m", bp.m, "base-level cap for non-hub nodes (0: M/5)");
  build->add_option("--beta", bp.beta, "percent of nodes kept as hubs");
  build->add_option("--efc", bp.efc, "construction queue length");
  build->add_option("--budget-bytes", budget, "graph metadata budget in bytes");
  build->add_option("--shards", shards, "number of shards (1: monolithic)");
  build->add_option("--seed", bp.seed, "seed for every random choice");
  build->add_option("--metric", metric, "l2, ip or cosine");
  build->add_option("--pq-subspaces", bp.pq_subspaces, "PQ subspaces (0: dim/25.6)");
  pf.add_to(build);

  // search
  auto* search = app.add_subcommand("search", "query the index");
  SearchParams sp;
  std::vector<std::string> query_texts;
  std::string query_file, mode = "two_level", alpha_base = "whole_queue";
  double cache_frac = 0.0;
  bool report = false, timings = false;
  std::size_t threads = 1;
  search->add_option("index_dir", dir)->required();
  search->add_option("--query", query_texts, "query text or bracketed vector");
  search->add_option("--queries", query_file, "file with one query per line");
  search->add_option("--k", sp.k, "results per query");
  search->add_option("--ef", sp.ef, "search queue length");
  search->add_option("--alpha", sp.alpha, "percent of approximate candidates re-ranked exactly");
  search->add_option("--batch", sp.batch_threshold, "recomputation batch size");
  search->add_option("--mode", mode, "exact or two_level");
  search->add_option("--alpha-base", alpha_base, "whole_queue or unevaluated");
  search->add_option("--cache-frac", cache_frac, "percent of highest-degree nodes with cached embeddings");
  search->add_flag("--report", report, "print the full search report as JSON");
  search->add_flag("--timings", timings, "include wall-clock timings in the report");
  search->add_option("--threads", threads, "queries searched concurrently");
  pf.add_to(search);

  // add
  auto* add = app.add_subcommand("add", "insert items");
  std::vector<std::string> add_texts;
  std::string add_file, variant = "cached";
  bool buffered = false;
  std::size_t buffer_bytes = IndexOptions{}.buffer_budget_bytes;
  add->add_option("index_dir", dir)->required();
  add->add_option("--text", add_texts, "item payload");
  add->add_option("--file", add_file, "file with one item per line");
  add->add_option("--variant", variant, "naive, cached or simplified");
  add->add_flag("--buffer", buffered, "delay insertion; items are searchable immediately");
  add->add_option("--buffer-bytes", buffer_bytes, "buffer budget before a forced drain");
  pf.add_to(add);

  auto* drain = app.add_subcommand("drain", "insert all buffered items");
  drain->add_option("index_dir", dir)->required();
  pf.add_to(drain);

  // delete
  auto* del = app.add_subcommand("delete", "soft-delete items by id");
  std::vector<NodeId> del_ids;
  del->add_option("index_dir", dir)->required();
  del->add_option("ids", del_ids, "node ids")->required();
  pf.add_to(del);

  // eval
  auto* eval = app.add_subcommand("eval", "recall/recomputation sweeps with baselines");
  std::string out_dir, efs_s, alphas_s;
  AblationConfig ac;
  bool no_baselines = false;
  eval->add_option("index_dir", dir)->required();
  eval->add_option("--queries", query_file, "file with one query per line")->required();
  eval->add_option("--out", out_dir, "output directory for TSV tables")->required();
  eval->add_option("--efs", efs_s, "comma-separated ef values");
  eval->add_option("--alphas", alphas_s, "comma-separated two-level alpha values");
  eval->add_option("--k", ac.k, "recall@k");
  eval->add_option("--batch", ac.batch, "recomputation batch size");
  eval->add_option("--target", ac.target, "recall target for the tuned ef");
  eval->add_flag("--no-baselines", no_baselines, "skip unpruned, random and small-M graphs");
  pf.add_to(eval);

  auto* compact = app.add_subcommand("compact", "drain, refreeze the graph and clear the mutation log");
  compact->add_option("index_dir", dir)->required();
  pf.add_to(compact);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::usage);
  }

  try {
    if (*ingest) {
      IngestReport rep;
      const ItemStore items = ingest_path(in_path, chunk, &rep);
      for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
      fs::create_directories(dir);
      DirLock lock(dir, true);
      items.save(dir);
      std::cout << "ingested " << rep.items << " items, " << rep.bytes << " bytes\n";
    } else if (*build) {
      bp.metric = parse_metric(metric);
      bp.budget_bytes = budget;
      bp.explicit_M = build->count("--M") > 0 || !budget;
      ProviderConfig base;
      const ProviderConfig cfg = pf.resolve(base);
      auto provider = make_provider(cfg);
      ResidentCounter counter;
      const BuildSummary s = build_directory(dir, bp, *provider, shards, &counter);
      std::cout << "built " << s.meta.n << " nodes: avg degree " << s.pruned.avg_degree
                << ", metadata " << s.pruned.metadata_bytes << " bytes, hubs " << s.hubs
                << ", pq subspaces " << s.meta.pq_subspaces << ", peak resident embeddings "
                << s.peak_resident << "\n";
    } else if (*search) {
      sp.mode = parse_search_mode(mode);
      sp.alpha_base = parse_alpha_base(alpha_base);
      sp.validate();
      IndexOptions opt;
      opt.read_only = true;
      opt.cache_percent = cache_frac;
      Opened o = open_index(dir, pf, opt);
      Index& ix = *o.index;
      std::vector<std::string> qs = query_texts;
      if (!query_file.empty()) {
        const auto more = read_lines(query_file);
        qs.insert(qs.end(), more.begin(), more.end());
      }
      if (qs.empty()) throw InvalidArgument("search: give --query or --queries");
      std::vector<Vector> vecs;
      for (const auto& q : qs) vecs.push_back(ix.embed_query(q));
      std::vector<SearchReport> reports(qs.size());
      if (threads <= 1) {
        for (std::size_t i = 0; i < qs.size(); ++i) reports[i] = ix.search(vecs[i], sp);
      } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
          pool.emplace_back([&, t] {
            try {
              for (std::size_t i; (i = next++) < qs.size();) reports[i] = ix.search(vecs[i], sp);
            } catch (...) {
              errors[t] = std::current_exception();
            }
          });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
          if (e) std::rethrow_exception(e);
        }
      }
      const bool many = qs.size() > 1;
      for (std::size_t i = 0; i < qs.size(); ++i) {
        if (report) {
          auto j = report_json(reports[i], timings);
          if (many) j["query"] = i;
          std::cout << j.dump() << "\n";
          continue;
        }
        std::size_t rank = 1;
        for (const auto& r : reports[i].results) {
          if (many) std::cout << i << '\t';
          char dist[32];
          std::snprintf(dist, sizeof dist, "%.6f", static_cast<double>(r.distance));
          std::cout << rank++ << '\t' << r.id << '\t' << dist << '\t'
                    << snippet(ix.data().items.get(r.id)) << "\n";
        }
      }
    } else if (*add) {
      std::vector<std::string> items = add_texts;
      if (!add_file.empty()) {
        const auto more = read_lines(add_file);
        items.insert(items.end(), more.begin(), more.end());
      }
      if (items.empty()) throw InvalidArgument("add: give --text or --file");
      IndexOptions opt;
      opt.buffer_budget_bytes = buffer_bytes;
      Opened o = open_index(dir, pf, opt);
      Index& ix = *o.index;
      if (buffered) {
        for (NodeId id : ix.buffer_add(items)) std::cout << "buffered " << id << "\n";
      } else {
        const AddVariant v = parse_add_variant(variant);
        for (const auto& it : items) {
          const AddResult r = ix.add(it, v);
          std::cout << "added " << r.id << "\tdistances " << r.counters.distance_computations
                    << "\tembeddings " << r.counters.embedding_computations << "\n";
        }
      }
    } else if (*drain) {
      Opened o = open_index(dir, pf, {});
      const std::size_t pending = o.index->buffer().size();
      o.index->drain();
      std::cout << "drained " << pending << " items\n";
    } else if (*del) {
      Opened o = open_index(dir, pf, {});
      for (NodeId id : del_ids) {
        const DeleteResult r = o.index->remove(id);
        std::cout << (r.newly_deleted ? "deleted " : "already deleted ") << id << "\n";
        if (r.advisory) {
          std::cerr << "advisory: " << r.deleted_fraction * 100.0
                    << "% of nodes are deleted; consider rebuilding\n";
        }
      }
    } else if (*eval) {
      if (!efs_s.empty()) {
        ac.efs.clear();
        for (double e : parse_list(efs_s)) ac.efs.push_back(static_cast<std::size_t>(e));
      }
      if (!alphas_s.empty()) ac.alphas = parse_list(alphas_s);
      ac.baselines = !no_baselines;
      IndexOptions opt;
      opt.read_only = true;
      Opened o = open_index(dir, pf, opt);
      Index& ix = *o.index;
      if (!ix.buffer().empty()) throw Error("eval: buffered items pending; run `rcann drain` first");
      const PrunedGraph ours = ix.data().graph.compact();
      ResidentEmbeddings emb(ix.meta().dim, nullptr);
      std::vector<NodeId> all(ours.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<NodeId>(i);
      embed_items(*o.provider, ix.data().items, all, emb);
      Matrix queries(0, ix.meta().dim);
      for (const auto& q : read_lines(query_file)) queries.append(ix.embed_query(q));
      RecomputeSource recompute(ix.data().items, *o.provider);
      const AblationResult r = run_ablation(emb.matrix(), queries, ours, ix.data().pq, ix.data().codes,
                                            ix.meta().build, ac, &recompute);
      write_ablation(r, out_dir);
      for (const auto& c : r.curves) {
        std::cout << c.graph << "\t" << to_string(c.mode) << "\talpha " << c.alpha << "\t";
        if (c.at_target.feasible) {
          std::cout << "ef " << c.at_target.ef << "\trecomputations " << c.recomputations_at_target << "\n";
        } else {
          std::cout << "target not reached (max recall " << c.max_recall << ")\n";
        }
      }
    } else if (*compact) {
      Opened o = open_index(dir, pf, {});
      o.index->compact();
      std::cout << "compacted " << o.index->size() << " nodes\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::data);
  }
  return 0;
}
