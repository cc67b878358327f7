#pragma once

// On-disk scene datasets: one JSON file per scene plus a manifest listing
// every file with its content hash.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poifusion/config.hpp"
#include "poifusion/random.hpp"
#include "poifusion/scene.hpp"

namespace poifusion {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

/// Seed of the i-th scene of a dataset generated with `seed`.
inline std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) { return hash_combine(seed, index); }

inline std::string scene_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu.json", index);
  return buf;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("failed writing " + path.string());
}

/// Writes `count` scenes and the manifest into `dir` (created if needed).
inline nlohmann::json generate_dataset(const RunConfig& rc, std::uint64_t seed, std::size_t count,
                                       const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = scene_seed(seed, i);
    const std::string text = scene_to_string(generate_scene(rc.scene, s));
    const std::string name = scene_file_name(i);
    write_file(dir / name, text);
    entries.push_back({{"file", name}, {"seed", s}, {"fnv1a64", hex64(fnv1a64(text))}});
  }
  nlohmann::json manifest = {{"version", kManifestVersion},
                             {"seed", seed},
                             {"count", count},
                             {"config_hash", config_hash(rc)},
                             {"scenes", entries}};
  write_file(dir / kManifestName, manifest.dump(1) + "\n");
  return manifest;
}

/// Loads every scene listed in the manifest, verifying content hashes.
inline std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / kManifestName));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse manifest in " + dir.string() + ": " + e.what());
  }
  std::vector<Scene> scenes;
  try {
    if (manifest.at("version").get<int>() != kManifestVersion) throw FormatError("unsupported manifest version");
    for (const auto& e : manifest.at("scenes")) {
      const std::string file = e.at("file").get<std::string>();
      const std::string text = read_file(dir / file);
      if (hex64(fnv1a64(text)) != e.at("fnv1a64").get<std::string>())
        throw FormatError("content hash mismatch for " + file);
      scenes.push_back(scene_from_json(nlohmann::json::parse(text)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed dataset in " + dir.string() + ": " + e.what());
  }
  return scenes;
}

/// In-memory equivalent of generate_dataset + load_dataset.
inline std::vector<Scene> generate_scenes(const SceneConfig& sc, std::uint64_t seed, std::size_t count) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(sc, scene_seed(seed, i)));
  return out;
}

}  // namespace poifusion
