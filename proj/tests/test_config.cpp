#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "blockdiff/config.hpp"
#include "blockdiff/manifest.hpp"
#include "blockdiff/trainer.hpp"

using namespace blockdiff;

TEST_CASE("parsing") {
  auto c = KeyValueConfig::parse("schema_version = 1\n# note\n  a.b = 3  # trailing\nname = x y\nflag = true\n");
  CHECK(c.get_int("a.b") == 3);
  CHECK(c.get_string("name") == "x y");
  CHECK(c.get_bool("flag", false));
  CHECK(c.get_double("missing", 2.5) == 2.5);
  CHECK_THROWS_AS(c.get_int("missing"), std::invalid_argument);
  CHECK_THROWS_AS(c.get_int("name"), std::invalid_argument);
  CHECK_NOTHROW(c.finish());

  CHECK_THROWS_AS(KeyValueConfig::parse("a = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(KeyValueConfig::parse("schema_version = 2\n"), std::invalid_argument);
  CHECK_THROWS_AS(KeyValueConfig::parse("schema_version = 1\na = 1\na = 2\n"), std::invalid_argument);
  CHECK_THROWS_AS(KeyValueConfig::parse("schema_version = 1\njunk\n"), std::invalid_argument);

  auto l = KeyValueConfig::parse("schema_version = 1\nxs = 1, 2 ,3\n");
  CHECK(l.get_list("xs") == std::vector<std::string>{"1", "2", "3"});
}

TEST_CASE("unknown keys are reported") {
  auto c = KeyValueConfig::parse("schema_version = 1\nused = 1\nmodel.dmodel = 4\n");
  c.get_int("used");
  try {
    c.finish();
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("model.dmodel") != std::string::npos);
  }
}

TEST_CASE("run configuration round trip") {
  const auto cfg = KeyValueConfig::load(TEST_DATA_DIR "/tiny.cfg");
  const auto run = TrainRun::from_config(cfg);
  CHECK(run.stages.size() == 2u);
  CHECK(run.stages[1].objective == Objective::block);
  CHECK(run.stages[1].warmup.has_value());
  CHECK(run.model.vocab_size == Vocabulary(12).size());
  CHECK(run.seed == 11u);

  const std::string text = run.to_config().text();
  const auto again = TrainRun::from_config(KeyValueConfig::parse(text));
  CHECK(again.to_config().text() == text);
  CHECK(TrainRun::from_config(run.to_config()).to_config().text() == text);

  auto bad = KeyValueConfig::parse(text + "stage.cpt.objective2 = ar\n");
  CHECK_THROWS_AS(TrainRun::from_config(bad), std::invalid_argument);
  auto wrong = KeyValueConfig::parse("schema_version = 1\nstages = x\nstage.x.objective = nope\nstage.x.steps = 1\n");
  CHECK_THROWS_AS(TrainRun::from_config(wrong), std::invalid_argument);
}

TEST_CASE("hashing") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(hex64(0xabcull) == "0000000000000abc");
}

TEST_CASE("manifest") {
  const auto dir = std::filesystem::temp_directory_path() / "blockdiff_test_manifest";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto metrics = (dir / "metrics.jsonl").string();
  std::ofstream(metrics) << "{}\n";
  RunManifest m;
  m.run_id = "r";
  m.config = "schema_version = 1\n";
  m.seed = 4;
  m.metrics = metrics;
  m.hash_artifacts();
  CHECK(m.hashes.at(metrics) == hex64(fnv1a64("{}\n")));
  m.save(dir / "manifest.json");
  auto back = RunManifest::load(dir / "manifest.json");
  CHECK(back.config == m.config);
  CHECK(back.seed == 4u);
  CHECK(back.hashes == m.hashes);

  m.checkpoints = {(dir / "gone.sdc").string()};
  CHECK_THROWS(m.hash_artifacts());
  std::filesystem::remove(metrics);
  CHECK_THROWS(back.save(dir / "manifest2.json"));
  CHECK_THROWS(RunManifest::load(dir / "absent.json"));
  std::filesystem::remove_all(dir);
}
