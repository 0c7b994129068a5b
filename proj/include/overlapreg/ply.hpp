#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "geometry.hpp"

namespace overlapreg::ply {

/// Reads the x/y/z properties of `element vertex` from an ASCII PLY file.
/// Other elements (faces, ...) and extra vertex properties are skipped.
inline PointCloud read(std::istream& in, const std::string& origin = "<stream>") {
  auto fail = [&](const std::string& why) { throw std::runtime_error("ply " + origin + ": " + why); };
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) fail("missing 'ply' magic");

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
      if (elements.empty()) fail("property before element");
      std::string type, name;
      ls >> type;
      if (type == "list") {
        elements.back().has_list = true;
        std::string t1, t2;
        ls >> t1 >> t2 >> name;
      } else {
        ls >> name;
      }
      elements.back().props.push_back(name);
    } else if (kw == "end_header") {
      break;
    }
  }
  if (!ascii) fail("only ASCII PLY is supported");

  PointCloud cloud;
  for (const auto& e : elements) {
    if (e.name != "vertex") {
      for (std::size_t i = 0; i < e.count; ++i)
        if (!std::getline(in, line)) fail("truncated element '" + e.name + "'");
      continue;
    }
    int ix = -1, iy = -1, iz = -1;
    for (std::size_t p = 0; p < e.props.size(); ++p) {
      if (e.props[p] == "x") ix = static_cast<int>(p);
      if (e.props[p] == "y") iy = static_cast<int>(p);
      if (e.props[p] == "z") iz = static_cast<int>(p);
    }
    if (ix < 0 || iy < 0 || iz < 0) fail("vertex element lacks x/y/z properties");
    cloud.points.reserve(e.count);
    std::vector<double> vals(e.props.size());
    for (std::size_t i = 0; i < e.count; ++i) {
      if (!std::getline(in, line)) fail("truncated vertex list at " + std::to_string(i));
      std::istringstream ls(line);
      for (auto& v : vals)
        if (!(ls >> v)) fail("malformed vertex line " + std::to_string(i));
      cloud.points.emplace_back(vals[static_cast<std::size_t>(ix)], vals[static_cast<std::size_t>(iy)], vals[static_cast<std::size_t>(iz)]);
    }
  }
  return cloud;
}

inline PointCloud read(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("ply: cannot open " + path.string());
  return read(f, path.string());
}

/// max_digits10 output so a write/read cycle is lossless.
inline void write(std::ostream& out, const PointCloud& cloud) {
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  out << std::setprecision(17);
  for (const auto& p : cloud.points) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

inline void write(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("ply: cannot write " + path.string());
  write(f, cloud);
}

}  // namespace overlapreg::ply
