#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include "rcann/error.hpp"
#include "rcann/vectors.hpp"

namespace rcann {

struct EmbeddingRequest {
  NodeId item_id = 0;
  std::string_view content;
};

enum class ProviderKind : std::uint8_t { synthetic = 0, external = 1 };

struct ProviderConfig {
  ProviderKind kind = ProviderKind::synthetic;
  std::size_t dim = 32;
  std::uint64_t seed = 0;
  // external only: a shell command speaking the line protocol on stdin/stdout,
  // or "unix:<path>" for a listening unix-domain socket.
  std::string endpoint;
  std::string model;  // external only: names the embedding function behind the endpoint
  std::size_t max_batch = 256;
  int timeout_ms = 30000;
  int retries = 2;

  void validate() const {
    if (dim < 2) throw InvalidArgument("provider dim must be >= 2");
    if (max_batch < 1) throw InvalidArgument("provider max_batch must be >= 1");
    if (kind == ProviderKind::external && endpoint.empty()) {
      throw InvalidArgument("external provider requires an endpoint");
    }
  }

  // Identity of the embedding function. Transport settings (endpoint,
  // timeouts, batch size) do not change vectors and are excluded.
  std::uint64_t hash() const {
    std::string key = kind == ProviderKind::synthetic ? "synthetic" : "external:" + model;
    key += "|dim=" + std::to_string(dim);
    if (kind == ProviderKind::synthetic) key += "|seed=" + std::to_string(seed);
    return fnv1a64(key);
  }
};

inline std::string to_string(ProviderKind k) {
  return k == ProviderKind::synthetic ? "synthetic" : "external";
}

inline ProviderKind parse_provider_kind(std::string_view s) {
  if (s == "synthetic") return ProviderKind::synthetic;
  if (s == "external") return ProviderKind::external;
  throw InvalidArgument("unknown provider kind '" + std::string(s) + "'");
}

// Environment overrides for the external endpoint and its transport settings.
inline void apply_env_overrides(ProviderConfig& cfg) {
  if (const char* e = std::getenv("RCANN_PROVIDER_ENDPOINT"); e != nullptr && *e != '\0') {
    cfg.endpoint = e;
  }
  if (const char* t = std::getenv("RCANN_PROVIDER_TIMEOUT_MS"); t != nullptr && *t != '\0') {
    cfg.timeout_ms = std::atoi(t);
  }
  if (const char* r = std::getenv("RCANN_PROVIDER_RETRIES"); r != nullptr && *r != '\0') {
    cfg.retries = std::atoi(r);
  }
}

// Live count of exact embeddings held in memory, with a high-water mark.
class ResidentCounter {
 public:
  void acquire(std::size_t n) {
    const auto now = current_.fetch_add(static_cast<std::int64_t>(n)) + static_cast<std::int64_t>(n);
    auto peak = peak_.load();
    while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
    }
  }
  void release(std::size_t n) { current_.fetch_sub(static_cast<std::int64_t>(n)); }

  std::int64_t current() const { return current_.load(); }
  std::int64_t peak() const { return peak_.load(); }
  void reset() {
    current_ = 0;
    peak_ = 0;
  }

 private:
  std::atomic<std::int64_t> current_{0};
  std::atomic<std::int64_t> peak_{0};
};

// A Matrix of exact embeddings whose row count is reported to a ResidentCounter
// for as long as it is alive.
class ResidentEmbeddings {
 public:
  ResidentEmbeddings(std::size_t dim, ResidentCounter* counter) : m_(0, dim), counter_(counter) {}
  ResidentEmbeddings(const ResidentEmbeddings&) = delete;
  ResidentEmbeddings& operator=(const ResidentEmbeddings&) = delete;
  ResidentEmbeddings(ResidentEmbeddings&& o) noexcept
      : m_(std::move(o.m_)), counter_(o.counter_), held_(o.held_) {
    o.held_ = 0;
  }
  ~ResidentEmbeddings() { clear(); }

  void resize(std::size_t rows) {
    if (counter_ != nullptr) {
      if (rows > held_) counter_->acquire(rows - held_);
      if (rows < held_) counter_->release(held_ - rows);
    }
    held_ = rows;
    m_.resize(rows);
  }
  void clear() {
    if (counter_ != nullptr && held_ > 0) counter_->release(held_);
    held_ = 0;
    m_ = Matrix(0, m_.dim());
  }

  Matrix& matrix() noexcept { return m_; }
  const Matrix& matrix() const noexcept { return m_; }
  std::size_t rows() const noexcept { return m_.rows(); }
  std::span<const float> row(std::size_t i) const noexcept { return m_.row(i); }

 private:
  Matrix m_;
  ResidentCounter* counter_;
  std::size_t held_ = 0;
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;

  virtual const ProviderConfig& config() const = 0;

  // Writes requests.size() rows of config().dim floats into out. Callers keep
  // requests.size() <= config().max_batch; embed_all() does the splitting.
  virtual void embed_batch(std::span<const EmbeddingRequest> requests, std::span<float> out) = 0;

  std::size_t dim() const { return config().dim; }
};

class SyntheticProvider final : public EmbeddingProvider {
 public:
  explicit SyntheticProvider(ProviderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.kind = ProviderKind::synthetic;
    cfg_.validate();
  }
  SyntheticProvider(std::size_t dim, std::uint64_t seed) {
    cfg_.dim = dim;
    cfg_.seed = seed;
    cfg_.validate();
  }

  const ProviderConfig& config() const override { return cfg_; }

  void embed_batch(std::span<const EmbeddingRequest> requests, std::span<float> out) override {
    if (out.size() != requests.size() * cfg_.dim) {
      throw InvalidArgument("embed_batch: output buffer has the wrong size");
    }
    for (std::size_t i = 0; i < requests.size(); ++i) {
      synthetic_embed_into(requests[i].content, cfg_.seed, out.subspan(i * cfg_.dim, cfg_.dim));
    }
  }

 private:
  ProviderConfig cfg_;
};

namespace detail {

class LineChannel {
 public:
  LineChannel() = default;
  LineChannel(const LineChannel&) = delete;
  LineChannel& operator=(const LineChannel&) = delete;
  ~LineChannel() { close(); }

  void open(const std::string& endpoint) {
    close();
    if (endpoint.rfind("unix:", 0) == 0) {
      open_socket(endpoint.substr(5));
    } else {
      spawn(endpoint);
    }
  }

  bool is_open() const { return read_fd_ >= 0; }

  void close() {
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    read_fd_ = write_fd_ = -1;
    if (pid_ > 0) {
      ::kill(pid_, SIGTERM);
      ::waitpid(pid_, nullptr, 0);
      pid_ = -1;
    }
    buffer_.clear();
  }

  // Returns false on timeout or a closed peer.
  bool write_line(const std::string& line, int timeout_ms) {
    std::string data = line + "\n";
    std::size_t sent = 0;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    while (sent < data.size()) {
      if (!wait_fd(write_fd_, POLLOUT, deadline)) return false;
      const ssize_t w = ::write(write_fd_, data.data() + sent, data.size() - sent);
      if (w <= 0) return false;
      sent += static_cast<std::size_t>(w);
    }
    return true;
  }

  bool read_line(std::string& line, int timeout_ms) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    while (true) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return true;
      }
      if (!wait_fd(read_fd_, POLLIN, deadline)) return false;
      char chunk[65536];
      const ssize_t r = ::read(read_fd_, chunk, sizeof(chunk));
      if (r <= 0) return false;
      buffer_.append(chunk, static_cast<std::size_t>(r));
    }
  }

 private:
  static bool wait_fd(int fd, short events, std::chrono::steady_clock::time_point deadline) {
    while (true) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                            deadline - std::chrono::steady_clock::now())
                            .count();
      if (left <= 0) return false;
      pollfd p{fd, events, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(left));
      if (rc > 0) return (p.revents & (events | POLLHUP)) != 0;
      if (rc == 0) return false;
      if (errno != EINTR) return false;
    }
  }

  void spawn(const std::string& command) {
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw ProviderError("pipe() failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw ProviderError("pipe() failed");
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw ProviderError("fork() failed");
    if (pid == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::signal(SIGPIPE, SIG_IGN);
    pid_ = pid;
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
  }

  void open_socket(const std::string& path) {
    const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd < 0) throw ProviderError("socket() failed");
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      return;  // left closed; caller retries
    }
    ::signal(SIGPIPE, SIG_IGN);
    read_fd_ = write_fd_ = fd;
  }

  int read_fd_ = -1;
  int write_fd_ = -1;
  pid_t pid_ = -1;
  std::string buffer_;
};

}  // namespace detail

// Client for an out-of-process embedding service.
//
// Wire protocol, one JSON object per line:
//   request  {"ids":[3,7],"texts":["...","..."]}
//   reply    {"vectors":[[...],[...]]}      exactly len(ids) rows of dim floats
//
// A timeout or a dead peer restarts the connection; after `retries` failed
// restarts a TransportError is raised. A malformed reply is a ProtocolError
// and is not retried.
class ExternalProvider final : public EmbeddingProvider {
 public:
  explicit ExternalProvider(ProviderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.kind = ProviderKind::external;
    cfg_.validate();
  }

  const ProviderConfig& config() const override { return cfg_; }

  void embed_batch(std::span<const EmbeddingRequest> requests, std::span<float> out) override {
    if (out.size() != requests.size() * cfg_.dim) {
      throw InvalidArgument("embed_batch: output buffer has the wrong size");
    }
    nlohmann::json req;
    req["ids"] = nlohmann::json::array();
    req["texts"] = nlohmann::json::array();
    for (const auto& r : requests) {
      req["ids"].push_back(r.item_id);
      req["texts"].push_back(std::string(r.content));
    }
    const std::string line = req.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);

    std::lock_guard<std::mutex> lock(mu_);
    std::string reply;
    int attempt = 0;
    for (;; ++attempt) {
      if (!channel_.is_open()) channel_.open(cfg_.endpoint);
      if (channel_.is_open() && channel_.write_line(line, cfg_.timeout_ms) &&
          channel_.read_line(reply, cfg_.timeout_ms)) {
        break;
      }
      channel_.close();
      if (attempt >= cfg_.retries) {
        throw TransportError("embedding provider '" + cfg_.endpoint + "' unreachable", attempt);
      }
    }
    decode(reply, requests.size(), out);
  }

 private:
  void decode(const std::string& reply, std::size_t rows, std::span<float> out) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(reply);
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("unparseable reply: ") + e.what());
    }
    if (!j.is_object() || !j.contains("vectors") || !j["vectors"].is_array()) {
      throw ProtocolError("reply lacks a 'vectors' array");
    }
    const auto& vs = j["vectors"];
    if (vs.size() != rows) {
      throw ProtocolError("expected " + std::to_string(rows) + " vectors, got " +
                          std::to_string(vs.size()));
    }
    for (std::size_t i = 0; i < rows; ++i) {
      if (!vs[i].is_array() || vs[i].size() != cfg_.dim) {
        throw ProtocolError("vector " + std::to_string(i) + " does not have dim " +
                            std::to_string(cfg_.dim));
      }
      for (std::size_t d = 0; d < cfg_.dim; ++d) {
        if (!vs[i][d].is_number()) throw ProtocolError("non-numeric vector entry");
        out[i * cfg_.dim + d] = vs[i][d].get<float>();
      }
    }
  }

  ProviderConfig cfg_;
  std::mutex mu_;
  detail::LineChannel channel_;
};

inline std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& cfg) {
  if (cfg.kind == ProviderKind::synthetic) return std::make_unique<SyntheticProvider>(cfg);
  return std::make_unique<ExternalProvider>(cfg);
}

// Embeds any number of requests, splitting into provider-sized calls. Output
// values do not depend on how the requests are split.
inline void embed_all(EmbeddingProvider& provider, std::span<const EmbeddingRequest> requests,
                      std::span<float> out) {
  const std::size_t dim = provider.dim();
  const std::size_t step = std::max<std::size_t>(1, provider.config().max_batch);
  for (std::size_t b = 0; b < requests.size(); b += step) {
    const std::size_t e = std::min(requests.size(), b + step);
    provider.embed_batch(requests.subspan(b, e - b), out.subspan(b * dim, (e - b) * dim));
  }
}

inline std::vector<Vector> embed_batch(EmbeddingProvider& provider,
                                       std::span<const EmbeddingRequest> requests) {
  if (requests.empty()) throw InvalidArgument("embed_batch: empty request list");
  Matrix m(requests.size(), provider.dim());
  embed_all(provider, requests, m.flat());
  std::vector<Vector> out;
  out.reserve(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    out.emplace_back(m.row(i).begin(), m.row(i).end());
  }
  return out;
}

}  // namespace rcann
