#pragma once

// JSON forms of transforms and reports, and the JSON-lines pair manifest.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "datagen.hpp"
#include "geometry.hpp"
#include "ply.hpp"

namespace overlapreg {

using json = nlohmann::json;

inline json transform_to_json(const RigidTransform& t) {
  Quaternion q = t.rotation;
  if (q.w < 0.0) q = -q;
  return {{"q", {q.w, q.x, q.y, q.z}}, {"t", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

inline RigidTransform transform_from_json(const json& j) {
  if (!j.contains("q") || !j.contains("t") || j["q"].size() != 4 || j["t"].size() != 3)
    throw std::runtime_error("transform JSON must have q[4] and t[3]");
  const auto q = j["q"].get<std::vector<double>>();
  const auto t = j["t"].get<std::vector<double>>();
  return RigidTransform(Quaternion{q[0], q[1], q[2], q[3]}, Vec3(t[0], t[1], t[2]));
}

inline json report_to_json(const ErrorReport& r) {
  return {{"rmse_rot", r.rmse_rot}, {"mae_rot", r.mae_rot},     {"rmse_trans", r.rmse_trans}, {"mae_trans", r.mae_trans},
          {"iso_rot", r.iso_rot},   {"iso_trans", r.iso_trans}, {"count", r.count}};
}

inline std::string mask_to_bits(const BinaryMask& m) {
  std::string s(m.size(), '0');
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) s[i] = '1';
  return s;
}

inline BinaryMask mask_from_bits(const std::string& s) {
  BinaryMask m(s.size(), 0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '0' && s[i] != '1') throw std::runtime_error("mask bitstring contains '" + std::string(1, s[i]) + "'");
    m[i] = s[i] == '1';
  }
  return m;
}

inline json seed_to_json(const SeedRecord& s) {
  return {{"pair_seed", s.pair_seed}, {"sampling_x", s.sampling_x}, {"sampling_y", s.sampling_y}, {"rejections", s.rejections}};
}

inline SeedRecord seed_from_json(const json& j) {
  SeedRecord s;
  s.pair_seed = j.value("pair_seed", std::uint64_t{0});
  s.sampling_x = j.value("sampling_x", std::uint32_t{0});
  s.sampling_y = j.value("sampling_y", std::uint32_t{0});
  s.rejections = j.value("rejections", std::uint32_t{0});
  return s;
}

/// Writes each pair's clouds as PLY next to the manifest and one JSON record
/// per line with manifest-relative paths.
inline void write_manifest(const std::filesystem::path& manifest, const std::vector<RegistrationPair>& pairs) {
  namespace fs = std::filesystem;
  const fs::path dir = manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
  fs::create_directories(dir);
  std::ofstream out(manifest);
  if (!out) throw std::runtime_error("manifest: cannot write " + manifest.string());
  const std::string stem = manifest.stem().string();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu", i);
    const std::string src = stem + "_" + buf + "_src.ply";
    const std::string ref = stem + "_" + buf + "_ref.ply";
    ply::write(dir / src, pairs[i].source);
    ply::write(dir / ref, pairs[i].reference);
    json rec{{"source", src},
             {"reference", ref},
             {"gt", transform_to_json(pairs[i].gt)},
             {"mask_x", mask_to_bits(pairs[i].mask_x)},
             {"mask_y", mask_to_bits(pairs[i].mask_y)},
             {"alpha", pairs[i].alpha},
             {"seed", seed_to_json(pairs[i].seed)}};
    out << rec.dump() << '\n';
  }
  if (!out) throw std::runtime_error("manifest: write failed for " + manifest.string());
}

inline std::vector<RegistrationPair> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("manifest: cannot open " + manifest.string());
  const auto dir = manifest.has_parent_path() ? manifest.parent_path() : std::filesystem::path(".");
  std::vector<RegistrationPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      RegistrationPair p;
      p.source = ply::read(dir / j.at("source").get<std::string>());
      p.reference = ply::read(dir / j.at("reference").get<std::string>());
      p.gt = transform_from_json(j.at("gt"));
      p.mask_x = mask_from_bits(j.at("mask_x").get<std::string>());
      p.mask_y = mask_from_bits(j.at("mask_y").get<std::string>());
      p.alpha = j.at("alpha").get<double>();
      if (j.contains("seed")) p.seed = seed_from_json(j["seed"]);
      if (p.mask_x.size() != p.source.size() || p.mask_y.size() != p.reference.size())
        throw std::runtime_error("mask length does not match cloud size");
      pairs.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest " + manifest.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return pairs;
}

}  // namespace overlapreg
