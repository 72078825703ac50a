#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ftp/nn/network.hpp"

namespace ftp::nn {

// Versioned binary checkpoint:
//   magic "FTPCKPT\0", u32 version, u32 entry count,
//   shape table: per entry u32 name length, name bytes, u8 dtype (0 = f32,
//   1 = u32), u32 rank, u64 dims[rank],
//   then the data blocks in table order.
// All integers and floats are little-endian, floats are IEEE 32-bit.
inline constexpr std::array<char, 8> kCheckpointMagic{'F', 'T', 'P', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};

enum class DType : std::uint8_t { kF32 = 0, kU32 = 1 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint32_t> words;  // raw 32-bit payload (float bits or u32)

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

namespace detail {

template <class U>
void put_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw CheckpointError("truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<U>(v);
}

}  // namespace detail

class CheckpointWriter {
 public:
  template <class T>
  void add(const std::string& name, std::vector<std::uint64_t> shape, std::span<const T> values) {
    CheckpointEntry e{name, DType::kF32, std::move(shape), {}};
    e.words.reserve(values.size());
    for (auto v : values) e.words.push_back(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    entries_.push_back(std::move(e));
  }
  void add_u32(const std::string& name, std::vector<std::uint64_t> shape, std::span<const std::uint32_t> values) {
    entries_.push_back({name, DType::kU32, std::move(shape), {values.begin(), values.end()}});
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
      out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
      detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) detail::put_le<std::uint64_t>(out, d);
    }
    for (const auto& e : entries_) {
      for (auto w : e.words) detail::put_le<std::uint32_t>(out, w);
    }
    if (!out) throw CheckpointError("write failed for " + path);
  }

 private:
  std::vector<CheckpointEntry> entries_;
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path);
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
      throw CheckpointError(path + " is not a checkpoint (bad magic)");
    }
    const auto version = detail::get_le<std::uint32_t>(in);
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto n = detail::get_le<std::uint32_t>(in);
    std::vector<CheckpointEntry> table(n);
    for (auto& e : table) {
      const auto len = detail::get_le<std::uint32_t>(in);
      if (len > 4096) throw CheckpointError("corrupt tensor name length");
      e.name.resize(len);
      if (!in.read(e.name.data(), len)) throw CheckpointError("truncated checkpoint");
      const auto dt = detail::get_le<std::uint8_t>(in);
      if (dt > 1) throw CheckpointError("unknown dtype for " + e.name);
      e.dtype = static_cast<DType>(dt);
      const auto rank = detail::get_le<std::uint32_t>(in);
      if (rank > 8) throw CheckpointError("corrupt rank for " + e.name);
      e.shape.resize(rank);
      for (auto& d : e.shape) d = detail::get_le<std::uint64_t>(in);
    }
    for (auto& e : table) {
      e.words.resize(e.count());
      for (auto& w : e.words) w = detail::get_le<std::uint32_t>(in);
      entries_.emplace(e.name, std::move(e));
    }
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  std::size_t count_with_prefix(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) n += name.rfind(prefix, 0) == 0 ? 1 : 0;
    return n;
  }

  const CheckpointEntry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
    return it->second;
  }

  template <class T>
  void read_into(const std::string& name, std::span<const std::size_t> expected_shape, std::span<T> out) const {
    const auto& e = entry(name);
    if (e.dtype != DType::kF32) throw CheckpointError("tensor '" + name + "' is not f32");
    if (e.shape.size() != expected_shape.size() ||
        !std::equal(e.shape.begin(), e.shape.end(), expected_shape.begin())) {
      throw CheckpointError("shape mismatch for tensor '" + name + "'");
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(std::bit_cast<float>(e.words[i]));
  }

 private:
  std::map<std::string, CheckpointEntry> entries_;
};

template <class T>
void save_embedding(CheckpointWriter& w, const std::string& prefix, const EmbeddingTable<T>& emb) {
  const auto keys = emb.sorted_keys();
  std::vector<T> rows;
  rows.reserve(keys.size() * emb.dim());
  for (auto k : keys) {
    const auto r = emb.row(k);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  w.add_u32(prefix + emb.name() + ".keys", {keys.size()}, keys);
  w.add<T>(prefix + emb.name() + ".rows", {keys.size(), emb.dim()}, rows);
}

template <class T>
void load_embedding(const CheckpointReader& r, const std::string& prefix, EmbeddingTable<T>& emb) {
  const auto& keys = r.entry(prefix + emb.name() + ".keys");
  const auto& rows = r.entry(prefix + emb.name() + ".rows");
  if (keys.dtype != DType::kU32 || keys.shape.size() != 1) throw CheckpointError("bad embedding keys");
  if (rows.shape.size() != 2 || rows.shape[0] != keys.shape[0] || rows.shape[1] != emb.dim()) {
    throw CheckpointError("shape mismatch for embedding '" + emb.name() + "'");
  }
  std::vector<T> buf(emb.dim());
  for (std::size_t i = 0; i < keys.words.size(); ++i) {
    for (std::size_t j = 0; j < emb.dim(); ++j) {
      buf[j] = static_cast<T>(std::bit_cast<float>(rows.words[i * emb.dim() + j]));
    }
    emb.set_row(keys.words[i], buf);
  }
}

template <class Net>
void save_net(CheckpointWriter& w, const std::string& prefix, const Net& net) {
  save_embedding(w, prefix, net.embedding());
  net.for_each_tensor([&](const auto& t) {
    std::vector<std::uint64_t> shape(t.shape.begin(), t.shape.end());
    w.add<typename std::decay_t<decltype(t.value)>::value_type>(prefix + t.name, shape, t.value);
  });
}

template <class Net>
void load_net(const CheckpointReader& r, const std::string& prefix, Net& net) {
  load_embedding(r, prefix, net.embedding());
  std::size_t expected = 2;
  net.for_each_tensor([&](auto&) { ++expected; });
  if (r.count_with_prefix(prefix) != expected) {
    throw CheckpointError("checkpoint tensor count under '" + prefix + "' does not match the network");
  }
  net.for_each_tensor([&](auto& t) {
    r.read_into<typename std::decay_t<decltype(t.value)>::value_type>(prefix + t.name, t.shape, t.value);
  });
}

}  // namespace ftp::nn
