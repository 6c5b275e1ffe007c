#include "blockdiff/manifest.hpp"

#include <fstream>
#include <stdexcept>

#include "blockdiff/config.hpp"
#include "json.hpp"

namespace blockdiff {

void RunManifest::hash_artifacts() {
  hashes.clear();
  std::vector<std::string> files = checkpoints;
  files.push_back(metrics);
  for (const auto& f : files) {
    if (!std::filesystem::exists(f)) throw std::runtime_error("manifest: referenced file missing: " + f);
    hashes[f] = hex64(fnv1a64_file(f));
  }
}

void RunManifest::save(const std::filesystem::path& path) const {
  for (const auto& [f, h] : hashes) {
    if (!std::filesystem::exists(f)) throw std::runtime_error("manifest: referenced file missing: " + f);
  }
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["seed"] = seed;
  j["config"] = config;
  j["checkpoints"] = checkpoints;
  j["metrics"] = metrics;
  j["hashes"] = hashes;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("manifest: cannot write " + path.string());
  out << j.dump(2) << '\n';
}

RunManifest RunManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest: cannot open " + path.string());
  const auto j = nlohmann::json::parse(in);
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = j.at("config").get<std::string>();
  m.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
  m.metrics = j.at("metrics").get<std::string>();
  m.hashes = j.at("hashes").get<std::map<std::string, std::string>>();
  return m;
}

}  // namespace blockdiff
