#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace blockdiff {

/// Record of one training run. `config` is the full effective configuration
/// (seed included); feeding it back to `train` reproduces the metrics.
struct RunManifest {
  std::string run_id;
  std::string config;
  std::uint64_t seed = 0;
  std::vector<std::string> checkpoints;
  std::string metrics;
  /// FNV-1a 64 of each referenced file, keyed by path.
  std::map<std::string, std::string> hashes;

  /// Hashes every referenced file; throws if one is missing.
  void hash_artifacts();
  void save(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

}  // namespace blockdiff
