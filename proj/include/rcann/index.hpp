#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rcann/builder.hpp"
#include "rcann/error.hpp"
#include "rcann/graph.hpp"
#include "rcann/item_store.hpp"
#include "rcann/pq.hpp"
#include "rcann/provider.hpp"
#include "rcann/search.hpp"
#include "rcann/shardbuild.hpp"
#include "rcann/update.hpp"

namespace rcann {

namespace fs = std::filesystem;

// Index directory file names.
inline constexpr const char* kGraphFile = "graph.bin";
inline constexpr const char* kDeletedFile = "deleted.bin";
inline constexpr const char* kPqFile = "pq.bin";
inline constexpr const char* kMetaFile = "meta.txt";
inline constexpr const char* kLogFile = "mutations.log";
inline constexpr const char* kLockFile = ".lock";

// meta.txt: one key=value per line, fixed key order.
struct IndexMeta {
  std::size_t n = 0;
  std::size_t dim = 0;
  ProviderConfig provider;
  std::uint64_t provider_hash = 0;
  BuildParams build;
  std::size_t shards = 1;
  std::size_t pq_subspaces = 0;

  std::string to_text() const {
    std::ostringstream o;
    o << "format=rcann-index-1\n";
    o << "n=" << n << "\n";
    o << "dim=" << dim << "\n";
    o << "metric=" << to_string(build.metric) << "\n";
    o << "provider.kind=" << to_string(provider.kind) << "\n";
    o << "provider.dim=" << provider.dim << "\n";
    o << "provider.seed=" << provider.seed << "\n";
    o << "provider.model=" << provider.model << "\n";
    o << "provider.endpoint=" << provider.endpoint << "\n";
    o << "provider.hash=" << provider_hash << "\n";
    o << "seed=" << build.seed << "\n";
    o << "M=" << build.M << "\n";
    o << "m=" << build.low_degree() << "\n";
    o << "efc=" << build.efc << "\n";
    o << "beta=" << build.beta << "\n";
    o << "budget_bytes=" << (build.budget_bytes ? std::to_string(*build.budget_bytes) : "") << "\n";
    o << "pq_subspaces=" << pq_subspaces << "\n";
    o << "pq_iters=" << build.pq_iters << "\n";
    o << "pq_sample=" << build.pq_sample << "\n";
    o << "shards=" << shards << "\n";
    return o.str();
  }

  static IndexMeta parse(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError(kMetaFile, "line without '=': " + line);
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end()) throw FormatError(kMetaFile, "missing key " + k);
      return it->second;
    };
    auto num = [&](const std::string& k) -> std::uint64_t {
      try {
        std::size_t pos = 0;
        const auto v = std::stoull(get(k), &pos);
        if (pos != get(k).size()) throw std::invalid_argument(k);
        return v;
      } catch (const std::logic_error&) {
        throw FormatError(kMetaFile, "bad integer for " + k);
      }
    };
    if (get("format") != "rcann-index-1") throw FormatError(kMetaFile, "unknown format " + get("format"));
    IndexMeta m;
    try {
      m.n = num("n");
      m.dim = num("dim");
      m.build.metric = parse_metric(get("metric"));
      m.provider.kind = parse_provider_kind(get("provider.kind"));
      m.provider.dim = num("provider.dim");
      m.provider.seed = num("provider.seed");
      m.provider.model = get("provider.model");
      m.provider.endpoint = get("provider.endpoint");
      m.provider_hash = num("provider.hash");
      m.build.seed = num("seed");
      m.build.M = num("M");
      m.build.m = num("m");
      m.build.efc = num("efc");
      m.build.beta = std::stod(get("beta"));
      if (!get("budget_bytes").empty()) m.build.budget_bytes = num("budget_bytes");
      m.pq_subspaces = num("pq_subspaces");
      m.build.pq_subspaces = m.pq_subspaces;
      m.build.pq_iters = num("pq_iters");
      m.build.pq_sample = num("pq_sample");
      m.shards = num("shards");
    } catch (const InvalidArgument& e) {
      throw FormatError(kMetaFile, e.what());
    } catch (const std::invalid_argument&) {
      throw FormatError(kMetaFile, "bad number");
    }
    return m;
  }

  void save(const fs::path& dir) const {
    io::write_text_atomic(dir / kMetaFile, to_text());
  }

  static IndexMeta load(const fs::path& dir) {
    const auto bytes = io::read_file(dir / kMetaFile);
    return parse(std::string(bytes.begin(), bytes.end()));
  }
};

// Throws unless `cfg` embeds exactly like the provider the index was built with.
inline void check_provider(const IndexMeta& meta, const ProviderConfig& cfg) {
  if (cfg.hash() != meta.provider_hash || cfg.dim != meta.dim) {
    throw ProviderError("index built with a different embedding configuration");
  }
}

// Advisory lock on <dir>/.lock held for the object's lifetime. Readers share,
// writers are exclusive; a conflicting holder fails fast.
class DirLock {
 public:
  DirLock(const fs::path& dir, bool exclusive) {
    const auto path = (dir / kLockFile).string();
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error("cannot open lock file " + path + ": " + std::strerror(errno));
    if (::flock(fd_, (exclusive ? LOCK_EX : LOCK_SH) | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw Error("index directory " + dir.string() + " is in use by another process");
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  DirLock(DirLock&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  ~DirLock() {
    if (fd_ >= 0) ::close(fd_);
  }

 private:
  int fd_ = -1;
};

struct IndexOptions {
  std::size_t buffer_budget_bytes = 64u << 20;
  double cache_percent = 0.0;  // 0 disables the embedding cache
  bool read_only = false;
};

// Build into `dir`, whose items.dat/items.idx were written by ingest. Any
// previous artifacts and the mutation log are replaced.
struct BuildSummary {
  IndexMeta meta;
  GraphStats pruned;
  GraphStats unpruned;  // empty for sharded builds
  std::size_t hubs = 0;
  std::int64_t peak_resident = 0;
  std::size_t trim_rounds = 0;
};

inline BuildSummary build_directory(const fs::path& dir, BuildParams params, EmbeddingProvider& provider,
                                    std::size_t shards = 1, ResidentCounter* counter = nullptr) {
  if (!fs::exists(dir / "items.idx")) {
    throw Error("no item store in " + dir.string() + "; run `rcann ingest <input> " + dir.string() + "` first");
  }
  DirLock lock(dir, true);
  const ItemStore items = ItemStore::load(dir);
  if (shards == 0) throw InvalidArgument("shards must be >= 1");
  BuildSummary s;
  PrunedGraph graph;
  PqModel pq;
  PqCodes codes;
  if (shards == 1) {
    BuiltIndex b = build_index(items, params, provider, counter);
    s.pruned = b.report.pruned;
    s.unpruned = b.report.unpruned;
    s.hubs = b.report.hubs.ids.size();
    s.peak_resident = b.report.peak_resident;
    s.trim_rounds = b.report.trim_rounds;
    params = resolve_budget(params, items.size(), nullptr);
    graph = std::move(b.graph);
    pq = std::move(b.pq);
    codes = std::move(b.codes);
  } else {
    ShardOptions opt;
    opt.k_shards = shards;
    opt.seed = params.seed;
    opt.work_dir = dir / "shards.tmp";
    ShardedIndex b = build_sharded(items, params, opt, provider, counter);
    s.pruned = b.report.pruned;
    s.hubs = b.report.hubs.ids.size();
    s.peak_resident = b.report.peak_resident;
    params = resolve_budget(params, items.size(), nullptr);
    graph = std::move(b.graph);
    pq = std::move(b.pq);
    codes = std::move(b.codes);
  }
  graph.save(dir / kGraphFile);
  graph.deleted().save(dir / kDeletedFile);
  save_pq(dir / kPqFile, pq, codes);
  MutationLog(dir / kLogFile).clear();

  s.meta.n = items.size();
  s.meta.dim = provider.dim();
  s.meta.provider = provider.config();
  s.meta.provider_hash = provider.config().hash();
  s.meta.build = params;
  s.meta.shards = shards;
  s.meta.pq_subspaces = pq.m_pq;
  s.meta.save(dir);
  return s;
}

// An opened index directory: the persisted snapshot plus the replayed
// mutation log, a delayed-insertion buffer, and an optional embedding cache.
class Index {
 public:
  static Index open(const fs::path& dir, EmbeddingProvider& provider, IndexOptions opt = {}) {
    for (const char* f : {kMetaFile, kGraphFile, kPqFile, "items.idx"}) {
      if (!fs::exists(dir / f)) {
        throw Error("missing " + std::string(f) + " in " + dir.string() +
                    "; run `rcann build " + dir.string() + "` first");
      }
    }
    Index ix;
    ix.s_ = std::make_unique<State>(dir, opt, provider);
    State& s = *ix.s_;
    check_provider(s.meta, provider.config());
    PrunedGraph g = PrunedGraph::load(dir / kGraphFile);
    if (fs::exists(dir / kDeletedFile)) {
      DeleteSet del = DeleteSet::load(dir / kDeletedFile);
      if (del.size() != g.size()) throw FormatError(kDeletedFile, "length differs from graph");
      for (std::size_t v = 0; v < g.size(); ++v) {
        if (del.test(static_cast<NodeId>(v))) g.mark_deleted(static_cast<NodeId>(v));
      }
    }
    s.data.items = ItemStore::load(dir);
    load_pq(dir / kPqFile, s.data.pq, s.data.codes);
    if (g.size() != s.meta.n || s.data.items.size() != s.meta.n || s.data.codes.size() != s.meta.n) {
      throw FormatError(kMetaFile, "node count disagrees with graph, items or pq codes");
    }
    if (s.data.pq.dim != s.meta.dim) throw FormatError(kPqFile, "dim disagrees with meta.txt");
    s.data.graph = OverlayGraph(std::move(g));
    s.data.metric = s.meta.build.metric;
    s.data.M = s.meta.build.M;
    s.data.efc = s.meta.build.efc;
    s.data.seed = s.meta.build.seed;
    for (const Mutation& m : s.log.read()) ix.apply(m);
    ix.refresh_cache();
    return ix;
  }

  const IndexMeta& meta() const { return s_->meta; }
  const IndexData& data() const { return s_->data; }
  const AddBuffer& buffer() const { return s_->buffer; }
  const EmbeddingCache* cache() const { return s_->cache ? &*s_->cache : nullptr; }
  std::size_t size() const { return s_->data.items.size(); }

  Vector embed_query(std::string_view text) {
    if (text.find('[') != std::string_view::npos && text.find(']') != std::string_view::npos) {
      Vector v = parse_vector_literal(text);
      if (v.size() != s_->meta.dim) throw InvalidArgument("query vector has the wrong dimension");
      return v;
    }
    EmbeddingRequest r{0, text};
    return rcann::embed_batch(*s_->provider, std::span<const EmbeddingRequest>(&r, 1)).front();
  }

  // Graph search merged with a scan of the buffer.
  SearchReport search(std::span<const float> q, const SearchParams& params) {
    State& s = *s_;
    Searcher<OverlayGraph> searcher(s.data.graph, s.source, s.data.metric, &s.data.pq, &s.data.codes,
                                    cache());
    SearchReport r = searcher.search(q, params);
    if (!s.buffer.empty()) {
      const auto extra = s.buffer.scan(q, params.k, s.data.metric);
      r.results = merge_topk(r.results, extra, params.k);
    }
    return r;
  }

  AddResult add(std::string_view payload, AddVariant variant = AddVariant::cached) {
    writable();
    drain();
    Mutation m{Mutation::Kind::add, variant, std::string(payload), 0};
    AddResult r = add_node(s_->data, payload, variant, *s_->provider);
    s_->log.append(m);
    return r;
  }

  std::vector<NodeId> buffer_add(std::span<const std::string> payloads) {
    writable();
    std::vector<NodeId> ids;
    for (const auto& p : payloads) {
      const bool will_drain = !s_->buffer.empty() &&
                              s_->buffer.bytes() + s_->meta.dim * sizeof(float) > s_->buffer.byte_budget();
      if (will_drain) drain();
      const auto got = s_->buffer.add(s_->data, std::span<const std::string>(&p, 1), *s_->provider);
      s_->log.append({Mutation::Kind::buffer, AddVariant::simplified, p, 0});
      ids.insert(ids.end(), got.begin(), got.end());
    }
    return ids;
  }

  void drain() {
    writable();
    if (s_->buffer.empty()) return;
    s_->buffer.drain(s_->data, *s_->provider);
    s_->log.append({Mutation::Kind::drain, AddVariant::simplified, {}, 0});
  }

  DeleteResult remove(NodeId id) {
    writable();
    if (id >= size()) throw InvalidArgument("delete: id " + std::to_string(id) + " out of range");
    if (id >= s_->data.graph.size()) drain();
    DeleteResult r = delete_node(s_->data, id);
    if (r.newly_deleted) s_->log.append({Mutation::Kind::del, AddVariant::cached, {}, id});
    return r;
  }

  // Drains the buffer, refreezes the overlay into the persisted format, and
  // empties the log. Running it twice leaves the directory unchanged.
  void compact() {
    writable();
    drain();
    State& s = *s_;
    const PrunedGraph g = s.data.graph.compact();
    const fs::path& dir = s.dir;
    g.save(dir / kGraphFile);
    g.deleted().save(dir / kDeletedFile);
    save_pq(dir / kPqFile, s.data.pq, s.data.codes);
    s.data.items.save(dir);
    s.meta.n = g.size();
    s.meta.save(dir);
    s.log.clear();
    s.data.graph = OverlayGraph(g);
    refresh_cache();
  }

 private:
  struct State {
    State(const fs::path& d, const IndexOptions& o, EmbeddingProvider& p)
        : dir(d),
          lock(d, !o.read_only),
          opt(o),
          meta(IndexMeta::load(d)),
          provider(&p),
          source(data.items, p),
          log(d / kLogFile),
          buffer(meta.dim, o.buffer_budget_bytes) {}
    fs::path dir;
    DirLock lock;
    IndexOptions opt;
    IndexMeta meta;
    EmbeddingProvider* provider;
    IndexData data;
    RecomputeSource source;
    MutationLog log;
    AddBuffer buffer;
    std::optional<EmbeddingCache> cache;
  };

  void writable() const {
    if (s_->opt.read_only) throw InvalidArgument("index opened read-only");
  }

  void apply(const Mutation& m) {
    State& s = *s_;
    switch (m.kind) {
      case Mutation::Kind::add:
        add_node(s.data, m.payload, m.variant, *s.provider);
        break;
      case Mutation::Kind::buffer:
        s.buffer.add(s.data, std::span<const std::string>(&m.payload, 1), *s.provider);
        break;
      case Mutation::Kind::drain:
        s.buffer.drain(s.data, *s.provider);
        break;
      case Mutation::Kind::del:
        if (m.id >= s.data.graph.size()) throw FormatError(kLogFile, "delete of unknown id");
        delete_node(s.data, m.id);
        break;
    }
  }

  void refresh_cache() {
    State& s = *s_;
    s.cache.reset();
    if (s.opt.cache_percent > 0.0) s.cache = EmbeddingCache::build(s.data.graph, s.opt.cache_percent, s.source);
  }

  std::unique_ptr<State> s_;
};

}  // namespace rcann
