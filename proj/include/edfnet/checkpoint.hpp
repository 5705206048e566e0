#pragma once

// Parameter checkpoints: a plain-text manifest (one "name rank extents..."
// line per parameter) followed by the values as little-endian doubles.
//
//   EDFNET-CHECKPOINT 1
//   <count>
//   <name> <rank> <d0> <d1> ...
//   DATA
//   <raw bytes>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "edfnet/errors.hpp"
#include "edfnet/tensor.hpp"

namespace edfnet::ad {

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, std::span<const Parameter* const> params) {
  out << "EDFNET-CHECKPOINT 1\n" << params.size() << '\n';
  for (const auto* p : params) {
    if (p->name.empty() || p->name.find_first_of(" \t\n") != std::string::npos) {
      throw IoError("checkpoint: parameter names must be non-empty without whitespace");
    }
    out << p->name << ' ' << p->value.rank();
    for (auto d : p->value.shape()) out << ' ' << d;
    out << '\n';
  }
  out << "DATA\n";
  for (const auto* p : params) {
    for (double v : p->value.values()) {
      const std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
      out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
  if (!out) throw IoError("checkpoint: write failed");
}

struct CheckpointEntry {
  std::string name;
  Array value;
};

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "EDFNET-CHECKPOINT 1") throw IoError("checkpoint: bad magic");
  std::size_t count = 0;
  if (!std::getline(in, line)) throw IoError("checkpoint: missing count");
  count = std::stoul(line);
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw IoError("checkpoint: truncated manifest");
    std::istringstream ls(line);
    std::string name;
    std::size_t rank = 0;
    if (!(ls >> name >> rank)) throw IoError("checkpoint: malformed manifest line");
    Shape s(rank);
    for (auto& d : s) {
      if (!(ls >> d)) throw IoError("checkpoint: malformed shape for " + name);
    }
    manifest.emplace_back(name, s);
  }
  if (!std::getline(in, line) || line != "DATA") throw IoError("checkpoint: missing DATA marker");
  std::vector<CheckpointEntry> entries;
  entries.reserve(manifest.size());
  for (auto& [name, shape] : manifest) {
    Array a(shape);
    for (auto& v : a.values()) {
      std::uint64_t bits = 0;
      if (!in.read(reinterpret_cast<char*>(&bits), sizeof(bits))) {
        throw IoError("checkpoint: truncated data for " + name);
      }
      v = std::bit_cast<double>(detail::to_le(bits));
    }
    entries.push_back({name, std::move(a)});
  }
  return entries;
}

/// Loads values into parameters matched by name; shapes must agree and every
/// parameter must be present.
inline void load_checkpoint(std::istream& in, std::span<Parameter* const> params) {
  auto entries = read_checkpoint(in);
  std::map<std::string, Array*> by_name;
  for (auto& e : entries) by_name[e.name] = &e.value;
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw IoError("checkpoint: missing parameter " + p->name);
    if (it->second->shape() != p->value.shape()) {
      throw IoError("checkpoint: shape mismatch for " + p->name + ": file " +
                    shape_str(it->second->shape()) + " vs model " + shape_str(p->value.shape()));
    }
    p->value = *it->second;
    p->reset_grad();
  }
}

inline void save_checkpoint_file(const std::filesystem::path& path,
                                 std::span<const Parameter* const> params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  save_checkpoint(out, params);
}

inline void load_checkpoint_file(const std::filesystem::path& path, std::span<Parameter* const> params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  load_checkpoint(in, params);
}

}  // namespace edfnet::ad
