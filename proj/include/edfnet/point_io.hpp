#pragma once

// ASCII PLY and whitespace-separated XYZ readers/writers.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "edfnet/errors.hpp"
#include "edfnet/geometry.hpp"

namespace edfnet::io {

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// Reads the x/y/z properties of the vertex element; any other properties
/// and elements are skipped.
inline PointCloud read_ply(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw IoError("ply: missing magic");

  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool ascii = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (kw == "element") {
      Element e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (kw == "property") {
      if (elements.empty()) throw IoError("ply: property before element");
      std::string type, name;
      ls >> type;
      if (type == "list") {
        std::string ct, it;
        ls >> ct >> it;
        elements.back().has_list = true;
      }
      ls >> name;
      elements.back().props.push_back(name);
    } else if (kw == "end_header") {
      break;
    }
  }
  if (!ascii) throw IoError("ply: only ascii format is supported");

  PointCloud cloud;
  for (const auto& e : elements) {
    if (e.name != "vertex") {
      for (std::size_t i = 0; i < e.count; ++i) std::getline(in, line);
      continue;
    }
    int ix = -1, iy = -1, iz = -1;
    for (std::size_t p = 0; p < e.props.size(); ++p) {
      if (e.props[p] == "x") ix = static_cast<int>(p);
      if (e.props[p] == "y") iy = static_cast<int>(p);
      if (e.props[p] == "z") iz = static_cast<int>(p);
    }
    if (ix < 0 || iy < 0 || iz < 0) throw IoError("ply: vertex element lacks x/y/z");
    cloud.points.reserve(e.count);
    std::vector<double> vals(e.props.size());
    for (std::size_t i = 0; i < e.count; ++i) {
      if (!std::getline(in, line)) throw IoError("ply: truncated vertex data");
      std::istringstream ls(line);
      for (auto& v : vals) {
        if (!(ls >> v)) throw IoError("ply: malformed vertex line " + std::to_string(i));
      }
      const Vec3 p(vals[static_cast<std::size_t>(ix)], vals[static_cast<std::size_t>(iy)],
                   vals[static_cast<std::size_t>(iz)]);
      if (!p.allFinite()) throw IoError("ply: non-finite coordinate at vertex " + std::to_string(i));
      cloud.points.push_back(p);
    }
  }
  return cloud;
}

inline void write_ply(std::ostream& out, const PointCloud& cloud) {
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  for (const auto& p : cloud.points) {
    out << detail::format_double(p.x()) << ' ' << detail::format_double(p.y()) << ' '
        << detail::format_double(p.z()) << '\n';
  }
}

/// One point per line, first three whitespace-separated columns; blank lines
/// and lines starting with '#' are ignored.
inline PointCloud read_xyz(std::istream& in) {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) throw IoError("xyz: malformed line " + std::to_string(lineno));
    const Vec3 p(x, y, z);
    if (!p.allFinite()) throw IoError("xyz: non-finite coordinate on line " + std::to_string(lineno));
    cloud.points.push_back(p);
  }
  return cloud;
}

inline void write_xyz(std::ostream& out, const PointCloud& cloud) {
  for (const auto& p : cloud.points) {
    out << detail::format_double(p.x()) << ' ' << detail::format_double(p.y()) << ' '
        << detail::format_double(p.z()) << '\n';
  }
}

/// Dispatches on extension: .ply, otherwise XYZ.
inline PointCloud load_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return path.extension() == ".ply" ? read_ply(in) : read_xyz(in);
}

inline void save_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  if (path.extension() == ".ply") {
    write_ply(out, cloud);
  } else {
    write_xyz(out, cloud);
  }
}

}  // namespace edfnet::io
