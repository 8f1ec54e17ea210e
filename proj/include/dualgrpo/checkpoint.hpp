#pragma once

// Binary checkpoints: named tensors, little-endian throughout. Layout is
// documented in docs/checkpoint-format.md.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dualgrpo/flow_decoder.hpp"
#include "dualgrpo/rewriter.hpp"
#include "dualgrpo/tensor.hpp"

namespace dualgrpo {

inline constexpr std::array<char, 8> kCheckpointMagic = {'D', 'G', 'R', 'P', 'O', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      u |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(u);
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint " + path_ + ": truncated file");
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const NamedTensors& tensors) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_le(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le(out, static_cast<std::uint64_t>(d));
  }
  for (const auto& [name, t] : tensors)
    for (double v : t.data()) detail::put_le(out, v);
  return out;
}

inline NamedTensors decode_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  const std::string magic = r.take(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) {
    throw CheckpointError("checkpoint " + path + ": bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.take(len);
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    manifest.emplace_back(std::move(name), std::move(shape));
  }
  NamedTensors out;
  for (auto& [name, shape] : manifest) {
    Tensor t(shape);
    for (auto& v : t.data()) v = r.get<double>();
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("checkpoint " + path + ": trailing bytes");
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint " + path.string() + ": write failed");
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint " + path.string() + ": not found or unreadable");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Parameter sets <-> named tensors

template <class Params>
void append_params(NamedTensors& out, const std::string& prefix, const Params& p) {
  const auto names = Params::names();
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) out.emplace_back(prefix + "." + names[i], *ts[i]);
}

/// Fills `p` from "<prefix>.<name>" entries; every tensor must be present.
template <class Params>
Params extract_params(const NamedTensors& in, const std::string& prefix) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : in) by_name[n] = &t;
  Params p;
  const auto names = Params::names();
  auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto it = by_name.find(prefix + "." + names[i]);
    if (it == by_name.end()) throw CheckpointError("checkpoint: missing tensor " + prefix + "." + names[i]);
    *ts[i] = *it->second;
  }
  return p;
}

inline bool has_params(const NamedTensors& in, const std::string& prefix) {
  for (const auto& [n, t] : in)
    if (n.rfind(prefix + ".", 0) == 0) return true;
  return false;
}

}  // namespace dualgrpo
