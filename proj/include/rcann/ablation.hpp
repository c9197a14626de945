#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rcann/builder.hpp"
#include "rcann/eval.hpp"
#include "rcann/graph.hpp"
#include "rcann/search.hpp"

namespace rcann {

struct AblationConfig {
  std::vector<std::size_t> efs{10, 20, 30, 50, 75, 100, 150, 200, 300, 400, 512};
  std::vector<double> alphas{50, 30, 10};  // two-level settings; best-first is always swept
  std::size_t k = 3;
  std::size_t batch = 64;
  double target = 0.90;
  double random_fraction = 0.5;
  std::size_t tune_hi = 512;
  bool baselines = true;
};

struct AblationCurve {
  std::string graph;
  SearchMode mode = SearchMode::exact_bestfirst;
  double alpha = 100.0;
  std::vector<TradeoffRow> rows;
  TuneResult at_target;
  double recomputations_at_target = 0.0;  // meaningful when at_target.feasible
  double max_recall = 0.0;                // recall at tune_hi
};

struct StageRow {
  std::string graph;
  StageTimes mean;
  double wall = 0.0;  // mean per query
};

struct AblationResult {
  std::vector<AblationCurve> curves;
  std::vector<std::pair<std::string, GraphStats>> graphs;
  std::vector<StageRow> stages;

  const AblationCurve* find(const std::string& graph, SearchMode mode, double alpha) const {
    for (const auto& c : curves) {
      if (c.graph == graph && c.mode == mode && c.alpha == alpha) return &c;
    }
    return nullptr;
  }
};

// Sweeps {mode, alpha, ef} over our graph and, when enabled, the unpruned
// reference, a random 50% edge prune of it, and a uniform M/2 build. Nodes
// deleted in `ours` are deleted in every graph and in the truth. Counters
// come from `data`; `stage_source` (if given) is used for one extra pass over
// our graph whose per-stage timings are reported.
inline AblationResult run_ablation(const Matrix& data, const Matrix& queries, const PrunedGraph& ours,
                                   const PqModel& pq, const PqCodes& codes, const BuildParams& params,
                                   const AblationConfig& cfg, ExactSource* stage_source = nullptr) {
  AblationResult out;
  const auto active = [&](NodeId v) { return !ours.is_deleted(v); };
  const GroundTruth gt = ground_truth(data, queries, cfg.k, params.metric, active);
  std::vector<std::pair<std::string, PrunedGraph>> owned;
  if (cfg.baselines) {
    const auto level_of = [&](NodeId v) { return draw_level(params.seed, v, params.M); };
    PrunedGraph reference = PrunedGraph::freeze(build_graph(data, params, nullptr, level_of));
    PrunedGraph random = baseline_random_prune(reference, cfg.random_fraction, params.seed);
    owned.emplace_back("unpruned", std::move(reference));
    owned.emplace_back("random", std::move(random));
    owned.emplace_back("small_m", baseline_small_m(data, params));
    for (auto& [name, g] : owned) {
      for (std::size_t v = 0; v < g.size(); ++v) {
        if (ours.is_deleted(static_cast<NodeId>(v))) g.mark_deleted(static_cast<NodeId>(v));
      }
    }
  }
  std::vector<std::pair<std::string, const PrunedGraph*>> graphs{{"ours", &ours}};
  for (const auto& [name, g] : owned) graphs.emplace_back(name, &g);

  StoredSource stored(data);
  for (const auto& [name, g] : graphs) {
    out.graphs.emplace_back(name, degree_stats(*g));
    Searcher<PrunedGraph> searcher(*g, stored, params.metric, &pq, &codes);
    std::vector<std::pair<SearchMode, double>> settings{{SearchMode::exact_bestfirst, 100.0}};
    for (double a : cfg.alphas) settings.emplace_back(SearchMode::two_level, a);
    for (const auto& [mode, alpha] : settings) {
      AblationCurve c;
      c.graph = name;
      c.mode = mode;
      c.alpha = alpha;
      SearchParams p;
      p.k = cfg.k;
      p.mode = mode;
      p.alpha = alpha;
      p.batch_threshold = cfg.batch;
      for (std::size_t ef : cfg.efs) {
        p.ef = ef;
        c.rows.push_back(evaluate(searcher, queries, gt, p));
      }
      c.at_target = tune_ef(searcher, queries, gt, p, cfg.target, cfg.tune_hi);
      p.ef = c.at_target.ef;
      const TradeoffRow r = evaluate(searcher, queries, gt, p);
      c.recomputations_at_target = r.recomputations;
      p.ef = cfg.tune_hi;
      c.max_recall = c.at_target.feasible ? evaluate(searcher, queries, gt, p).recall : c.at_target.recall;
      out.curves.push_back(std::move(c));
    }
  }

  if (stage_source != nullptr) {
    Searcher<PrunedGraph> searcher(ours, *stage_source, params.metric, &pq, &codes);
    SearchParams p;
    p.k = cfg.k;
    p.alpha = cfg.alphas.empty() ? 100.0 : cfg.alphas.front();
    p.mode = cfg.alphas.empty() ? SearchMode::exact_bestfirst : SearchMode::two_level;
    p.batch_threshold = cfg.batch;
    const AblationCurve* c = out.find("ours", p.mode, p.alpha);
    p.ef = c != nullptr && c->at_target.feasible ? c->at_target.ef : 50;
    StageRow row{"ours", {}, 0.0};
    for (std::size_t i = 0; i < queries.rows(); ++i) {
      const SearchReport r = searcher.search(queries.row(i), p);
      row.mean += r.stage_times;
      row.wall += r.wall_seconds;
    }
    const double q = queries.rows() == 0 ? 1.0 : static_cast<double>(queries.rows());
    row.mean.pq_lookup /= q;
    row.mean.payload_fetch /= q;
    row.mean.embed /= q;
    row.mean.distance /= q;
    row.mean.traversal /= q;
    row.wall /= q;
    out.stages.push_back(row);
  }
  return out;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline void write_tsv(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace detail

// curves.tsv, targets.tsv, degrees.tsv and graphs.tsv are deterministic;
// stages.tsv holds wall-clock timings.
inline void write_ablation(const AblationResult& r, const std::filesystem::path& dir) {
  using detail::fmt;
  std::filesystem::create_directories(dir);
  std::ostringstream curves;
  curves << "graph\tmode\talpha\tef\trecall\trecomputations\tapprox_lookups\n";
  std::ostringstream targets;
  targets << "graph\tmode\talpha\tfeasible\tef\trecall\trecomputations\tmax_recall\n";
  for (const auto& c : r.curves) {
    for (const auto& row : c.rows) {
      curves << c.graph << '\t' << to_string(c.mode) << '\t' << fmt(c.alpha) << '\t' << row.ef << '\t'
             << fmt(row.recall) << '\t' << fmt(row.recomputations) << '\t' << fmt(row.approx_lookups)
             << '\n';
    }
    targets << c.graph << '\t' << to_string(c.mode) << '\t' << fmt(c.alpha) << '\t'
            << (c.at_target.feasible ? "yes" : "no") << '\t' << c.at_target.ef << '\t'
            << fmt(c.at_target.recall) << '\t'
            << (c.at_target.feasible ? fmt(c.recomputations_at_target) : "") << '\t'
            << fmt(c.max_recall) << '\n';
  }
  std::ostringstream degrees;
  degrees << "graph\tdegree\tcount\n";
  std::ostringstream graphs;
  graphs << "graph\tn\tavg_degree\tmax_degree\tbase_edges\tmetadata_bytes\n";
  for (const auto& [name, s] : r.graphs) {
    for (const auto& [d, cnt] : s.degree_histogram) degrees << name << '\t' << d << '\t' << cnt << '\n';
    graphs << name << '\t' << s.n << '\t' << fmt(s.avg_degree) << '\t' << s.max_degree << '\t'
           << s.base_edges << '\t' << s.metadata_bytes << '\n';
  }
  std::ostringstream stages;
  stages << "graph\tpq_lookup\tpayload_fetch\tembed\tdistance\ttraversal\tstage_total\twall\n";
  for (const auto& s : r.stages) {
    stages << s.graph << '\t' << fmt(s.mean.pq_lookup) << '\t' << fmt(s.mean.payload_fetch) << '\t'
           << fmt(s.mean.embed) << '\t' << fmt(s.mean.distance) << '\t' << fmt(s.mean.traversal)
           << '\t' << fmt(s.mean.total()) << '\t' << fmt(s.wall) << '\n';
  }
  detail::write_tsv(dir / "curves.tsv", curves.str());
  detail::write_tsv(dir / "targets.tsv", targets.str());
  detail::write_tsv(dir / "degrees.tsv", degrees.str());
  detail::write_tsv(dir / "graphs.tsv", graphs.str());
  if (!r.stages.empty()) detail::write_tsv(dir / "stages.tsv", stages.str());
}

}  // namespace rcann
