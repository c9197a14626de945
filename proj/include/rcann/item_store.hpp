#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <string_view>
#include <vector>

#include "rcann/io.hpp"
#include "rcann/provider.hpp"

namespace rcann {

// Raw item payloads, row i == node i.
//
// items.dat  concatenated payload bytes
// items.idx  (count + 1) little-endian u64 offsets into items.dat
class ItemStore {
 public:
  ItemStore() { offsets_.push_back(0); }

  std::size_t size() const noexcept { return offsets_.size() - 1; }
  bool empty() const noexcept { return size() == 0; }
  std::size_t byte_size() const noexcept { return bytes_.size(); }

  NodeId append(std::string_view payload) {
    bytes_.append(payload);
    offsets_.push_back(bytes_.size());
    return static_cast<NodeId>(size() - 1);
  }

  std::string_view get(NodeId id) const {
    if (id >= size()) throw InvalidArgument("item id " + std::to_string(id) + " out of range");
    return std::string_view(bytes_).substr(offsets_[id], offsets_[id + 1] - offsets_[id]);
  }

  EmbeddingRequest request(NodeId id) const { return {id, get(id)}; }

  // Drops rows at and beyond `n`; used to roll back a staged append.
  void truncate(std::size_t n) {
    if (n >= size()) return;
    bytes_.resize(offsets_[n]);
    offsets_.resize(n + 1);
  }

  void save(const std::filesystem::path& dir) const {
    io::write_file_atomic(dir / "items.dat", bytes_.data(), bytes_.size());
    io::Writer w;
    for (std::uint64_t o : offsets_) w.u64(o);
    w.save(dir / "items.idx");
  }

  static ItemStore load(const std::filesystem::path& dir) {
    ItemStore s;
    const auto idx = io::read_file(dir / "items.idx");
    const auto dat = io::read_file(dir / "items.dat");
    if (idx.size() % 8 != 0 || idx.empty()) {
      throw FormatError("items.idx", "size is not a positive multiple of 8");
    }
    io::Reader r(idx);
    s.offsets_.clear();
    const std::size_t count = idx.size() / 8;
    for (std::size_t i = 0; i < count; ++i) s.offsets_.push_back(r.u64("items.idx"));
    if (s.offsets_.front() != 0 || !std::is_sorted(s.offsets_.begin(), s.offsets_.end()) ||
        s.offsets_.back() != dat.size()) {
      throw FormatError("items.idx", "offsets inconsistent with items.dat");
    }
    s.bytes_.assign(dat.begin(), dat.end());
    return s;
  }

  friend bool operator==(const ItemStore&, const ItemStore&) = default;

 private:
  std::string bytes_;
  std::vector<std::uint64_t> offsets_;
};

struct ChunkOptions {
  std::size_t chunk_bytes = 1024;
  std::size_t overlap_bytes = 128;
};

// Byte-window chunking: windows of chunk_bytes advancing by chunk_bytes - overlap.
inline std::vector<std::string> chunk_text(std::string_view text, const ChunkOptions& opt) {
  if (opt.chunk_bytes == 0 || opt.overlap_bytes >= opt.chunk_bytes) {
    throw InvalidArgument("chunk size must exceed overlap");
  }
  std::vector<std::string> out;
  if (text.empty()) return out;
  const std::size_t step = opt.chunk_bytes - opt.overlap_bytes;
  for (std::size_t b = 0;; b += step) {
    out.emplace_back(text.substr(b, opt.chunk_bytes));
    if (b + opt.chunk_bytes >= text.size()) break;
  }
  return out;
}

struct IngestReport {
  std::size_t items = 0;
  std::size_t bytes = 0;
  std::vector<std::string> warnings;
};

// A regular file is read as line-delimited records (one item per non-empty
// line). A directory contributes every regular file in sorted path order,
// each chunked into byte windows.
inline ItemStore ingest_path(const std::filesystem::path& input, const ChunkOptions& opt,
                             IngestReport* report = nullptr) {
  namespace fs = std::filesystem;
  ItemStore store;
  IngestReport local;
  IngestReport& rep = report != nullptr ? *report : local;
  std::error_code ec;
  if (fs::is_directory(input, ec)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(input, ec)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      if (!in) {
        rep.warnings.push_back("unreadable: " + f.string());
        continue;
      }
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      for (auto& c : chunk_text(text, opt)) store.append(c);
    }
  } else if (fs::is_regular_file(input, ec)) {
    std::ifstream in(input, std::ios::binary);
    if (!in) throw Error("cannot read " + input.string());
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) store.append(line);
    }
  } else {
    throw Error("input not found: " + input.string());
  }
  rep.items = store.size();
  rep.bytes = store.byte_size();
  if (store.empty()) throw Error("no items ingested from " + input.string());
  return store;
}

}  // namespace rcann
