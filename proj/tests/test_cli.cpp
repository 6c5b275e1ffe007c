#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(BLOCKDIFF_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("blockdiff_cli_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("grad-check passes") {
  auto r = run("grad-check --seed 3");
  INFO(r.out);
  CHECK(r.code == 0);
  CHECK(r.out.find("max relative gradient error") != std::string::npos);
}

TEST_CASE("schedule-stats reports the zero-mask fraction") {
  auto r = run("schedule-stats --B 4 --samples 200000 --mode both --seed 1");
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string line;
  int seen = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    if (j.at("clipped").get<bool>()) {
      CHECK(j.at("zero_mask_fraction").get<double>() == 0.0);
    } else {
      CHECK(std::abs(j.at("zero_mask_fraction").get<double>() - 0.2) < 0.005);
    }
    ++seen;
  }
  CHECK(seen == 2);
}

TEST_CASE("bad invocations fail") {
  CHECK(run("no-such-command").code != 0);
  CHECK(run("analyze --enumerate --lo 1 --hi 4 --query 'a = _' --epsilon 0").code != 0);
  CHECK(run("train --config /nonexistent.cfg --out " + scratch("bad").string()).code != 0);
}

TEST_CASE("gen-data, analyze and decode") {
  const auto dir = scratch("data");
  fs::create_directories(dir);
  auto g = run("gen-data --out " + (dir / "c.txt").string() + " --n 5 --lo 1 --hi 4 --seed 2");
  REQUIRE(g.code == 0);
  std::ifstream in(dir / "c.txt");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) n += !line.empty();
  CHECK(n == 5);

  auto a = run("analyze --enumerate --lo 1 --hi 4 --clauses 1 --query 'a = 1 , b = 2 , a + b = _' --epsilon 0.05");
  INFO(a.out);
  REQUIRE(a.code == 0);
  CHECK(a.out.find("\"K\":1") != std::string::npos);
  CHECK(a.out.find("reasoning") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("train is reproducible from its manifest") {
  const auto a = scratch("a"), b = scratch("b"), c = scratch("c");
  const std::string cfg = std::string(TEST_DATA_DIR) + "/tiny.cfg";
  auto r1 = run("train --config " + cfg + " --out " + a.string());
  INFO(r1.out);
  REQUIRE(r1.code == 0);
  auto r2 = run("train --config " + cfg + " --out " + b.string());
  REQUIRE(r2.code == 0);
  CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
  CHECK(fs::exists(a / "stage0-pre.sdc"));
  CHECK(fs::exists(a / "stage1-cpt.sdc"));

  auto r3 = run("train --manifest " + (a / "manifest.json").string() + " --out " + c.string());
  INFO(r3.out);
  CHECK(r3.code == 0);
  CHECK(slurp(a / "metrics.jsonl") == slurp(c / "metrics.jsonl"));

  CHECK(run("train --config " + cfg + " --out " + a.string()).code != 0);

  auto other = run("train --config " + cfg + " --seed 99 --out " + c.string() + " --force");
  CHECK(other.code == 0);
  CHECK(slurp(a / "metrics.jsonl") != slurp(c / "metrics.jsonl"));

  auto d = run("decode --checkpoint " + (a / "stage1-cpt.sdc").string() + " --prompt 'a = 1 , b = 2' --B 2 --max-new 4");
  INFO(d.out);
  CHECK(d.code == 0);
  auto e = run("eval --checkpoint " + (a / "stage0-pre.sdc").string() + " --corpus " + cfg + " --B 1");
  CHECK(e.code != 0);  // a config is not a corpus
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}
