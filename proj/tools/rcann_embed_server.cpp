// Line-protocol embedding server backed by the synthetic embedding. Serves
// stdin/stdout by default, or a unix socket with --socket.

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rcann/vectors.hpp"

namespace {

std::string answer(const std::string& line, std::size_t dim, std::uint64_t seed) {
  const auto req = nlohmann::json::parse(line);
  std::string out = "{\"vectors\":[";
  const auto& texts = req.at("texts");
  char buf[32];
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto v = rcann::synthetic_embed(texts[i].get<std::string>(), dim, seed);
    out += i == 0 ? "[" : ",[";
    for (std::size_t d = 0; d < v.size(); ++d) {
      std::snprintf(buf, sizeof buf, "%s%.9g", d == 0 ? "" : ",", static_cast<double>(v[d]));
      out += buf;
    }
    out += "]";
  }
  out += "]}";
  return out;
}

void serve_fd(int in_fd, int out_fd, std::size_t dim, std::uint64_t seed) {
  std::string pending;
  char chunk[65536];
  for (;;) {
    const ssize_t r = ::read(in_fd, chunk, sizeof chunk);
    if (r <= 0) return;
    pending.append(chunk, static_cast<std::size_t>(r));
    for (std::size_t nl; (nl = pending.find('\n')) != std::string::npos;) {
      const std::string line = pending.substr(0, nl);
      pending.erase(0, nl + 1);
      std::string reply;
      try {
        reply = answer(line, dim, seed);
      } catch (const std::exception& e) {
        reply = nlohmann::json{{"error", e.what()}}.dump();
      }
      reply += "\n";
      for (std::size_t sent = 0; sent < reply.size();) {
        const ssize_t w = ::write(out_fd, reply.data() + sent, reply.size() - sent);
        if (w <= 0) return;
        sent += static_cast<std::size_t>(w);
      }
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rcann-embed-server: synthetic embeddings over the line protocol"};
  std::size_t dim = 32;
  std::uint64_t seed = 0;
  std::string socket_path;
  app.add_option("--dim", dim, "embedding dimension");
  app.add_option("--seed", seed, "embedding seed");
  app.add_option("--socket", socket_path, "listen on this unix socket instead of stdin/stdout");
  CLI11_PARSE(app, argc, argv);

  if (socket_path.empty()) {
    serve_fd(STDIN_FILENO, STDOUT_FILENO, dim, seed);
    return 0;
  }
  const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (fd < 0) {
    std::perror("socket");
    return 4;
  }
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  socket_path.copy(addr.sun_path, sizeof(addr.sun_path) - 1);
  ::unlink(socket_path.c_str());
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 8) != 0) {
    std::perror("bind");
    return 4;
  }
  for (;;) {
    const int c = ::accept(fd, nullptr, nullptr);
    if (c < 0) continue;
    serve_fd(c, c, dim, seed);
    ::close(c);
  }
}
