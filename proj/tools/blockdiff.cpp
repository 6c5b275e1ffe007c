// blockdiff: data generation, training, decoding, evaluation, analysis and
// verification from one entry point.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "blockdiff/checkpoint.hpp"
#include "blockdiff/config.hpp"
#include "blockdiff/corruption.hpp"
#include "blockdiff/decoding.hpp"
#include "blockdiff/gradcheck.hpp"
#include "blockdiff/knowledge.hpp"
#include "blockdiff/manifest.hpp"
#include "blockdiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace blockdiff;
using ojson = nlohmann::ordered_json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- gen-data

struct GenDataArgs {
  std::string out;
  long n = 1000;
  int lo = 1, hi = 4, clauses = 1, max_number = 20;
  bool enumerate = false;
  std::uint64_t seed = 0;
};

int run_gen_data(const GenDataArgs& a) {
  const Vocabulary vocab(a.max_number);
  ArithmeticCorpusConfig cfg{a.lo, a.hi, a.clauses, "a", "b"};
  const auto corpus = a.enumerate ? enumerate_arithmetic(cfg, vocab) : gen_arithmetic(cfg, vocab, a.n, a.seed);
  write_corpus(a.out, corpus, vocab);
  std::cout << "wrote " << corpus.size() << " sequences to " << a.out << "\n";
  return 0;
}

// ---- train

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool force = false;
};

int run_train(const TrainArgs& a) {
  std::string text;
  RunManifest previous;
  const bool from_manifest = !a.manifest.empty();
  if (from_manifest) {
    previous = RunManifest::load(a.manifest);
    text = previous.config;
  } else {
    text = slurp(a.config);
  }
  KeyValueConfig kv = KeyValueConfig::parse(text);
  if (a.seed_given) kv.set("seed", std::to_string(a.seed));
  TrainRun run = TrainRun::from_config(kv);
  const std::string snapshot = run.to_config().text();

  const fs::path out(a.out);
  if (fs::exists(out / "manifest.json") && !a.force) {
    throw std::runtime_error(out.string() + " already holds a run; choose another --out or pass --force");
  }
  fs::create_directories(out);
  {
    std::ofstream cfg_out(out / "config.cfg");
    cfg_out << snapshot;
  }
  const fs::path metrics_path = out / "metrics.jsonl";
  std::ofstream metrics(metrics_path);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());

  RunOptions opts;
  opts.out_dir = out;
  opts.metrics = &metrics;
  RunResult res = run_curriculum(run, opts);
  metrics.close();

  RunManifest m;
  m.run_id = hex64(fnv1a64(snapshot));
  m.config = snapshot;
  m.seed = run.seed;
  for (const auto& c : res.checkpoints) m.checkpoints.push_back(c.string());
  m.metrics = metrics_path.string();
  m.hash_artifacts();
  m.save(out / "manifest.json");

  const auto& last = res.metrics.back();
  std::cout << "run " << m.run_id << ": " << res.metrics.size() << " steps, final loss " << last.loss << "\n";
  for (const auto& r : res.evals.back().results) {
    std::cout << "  exact match (block " << r.block_size << "): " << r.correct << "/" << r.n << "\n";
  }
  std::cout << "manifest: " << (out / "manifest.json").string() << "\n";

  if (from_manifest) {
    const std::string want = previous.hashes.count(previous.metrics) ? previous.hashes.at(previous.metrics) : "";
    const std::string got = m.hashes.at(m.metrics);
    if (want != got) {
      std::cerr << "metrics differ from the manifest's run (" << got << " vs " << want << ")\n";
      return 3;
    }
    std::cout << "metrics identical to the manifest's run (" << got << ")\n";
  }
  return 0;
}

// ---- decode

struct DecodeArgs {
  std::string checkpoint;
  std::string prompt;
  std::string prompt_file;
  int block_size = 4;
  int steps = 0;
  int k = 1;
  int max_new = 16;
  std::string attention = "block_causal";
  bool ar = false;
  bool no_eos = false;
  std::uint64_t seed = 0;
};

int run_decode(const DecodeArgs& a) {
  const auto model = load_checkpoint<float>(a.checkpoint);
  const Vocabulary vocab = Vocabulary::with_size(model.config().vocab_size);
  std::string text = a.prompt;
  if (!a.prompt_file.empty()) text = slurp(a.prompt_file);
  TokenSeq prompt = vocab.tokenize(text);
  if (prompt.empty() || prompt.front() != vocab.bos()) prompt.insert(prompt.begin(), vocab.bos());
  const Token eos = a.no_eos ? -1 : vocab.eos();
  TokenSeq out;
  if (a.ar) {
    out = decode_ar(model, prompt, a.max_new, eos);
  } else {
    DecodeConfig dc;
    dc.block_size = a.block_size;
    dc.steps_per_block = a.steps > 0 ? a.steps : a.block_size;
    dc.commits_per_step = a.k;
    dc.max_new_tokens = a.max_new;
    dc.attention = mask_kind_from_string(a.attention);
    dc.eos = eos;
    out = decode_blockwise(model, prompt, dc);
  }
  const TokenSeq gen(out.begin() + static_cast<long>(prompt.size()), out.end());
  std::cout << "ids:";
  for (Token t : gen) std::cout << ' ' << t;
  std::cout << "\ntext: " << vocab.detokenize(gen) << "\n";
  return 0;
}

// ---- eval

struct EvalArgs {
  std::string checkpoint;
  std::string corpus;
  std::vector<int> block_sizes{1, 4};
  std::string attention = "block_causal";
  long limit = 0;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
  const auto model = load_checkpoint<float>(a.checkpoint);
  const Vocabulary vocab = Vocabulary::with_size(model.config().vocab_size);
  auto corpus = read_corpus(a.corpus, vocab);
  if (a.limit > 0 && static_cast<long>(corpus.size()) > a.limit) corpus.resize(static_cast<std::size_t>(a.limit));
  const MaskKind att = mask_kind_from_string(a.attention);
  for (int b : a.block_sizes) {
    const ExactMatch em = exact_match(model, corpus, vocab, b, att);
    ojson j;
    j["block_size"] = b;
    j["attention"] = to_string(att);
    j["n"] = em.n;
    j["correct"] = em.correct;
    j["exact_match"] = em.accuracy();
    std::cout << j.dump() << "\n";
  }
  return 0;
}

// ---- analyze

struct AnalyzeArgs {
  std::string corpus;
  bool enumerate = false;
  int lo = 1, hi = 4, clauses = 1, max_number = 20;
  std::vector<std::string> queries;
  int target = -1;
  double epsilon = 0.0;
  std::vector<std::string> census;
  long samples = 2000;
  std::uint64_t seed = 0;
};

CensusMode parse_census(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  std::string p;
  while (std::getline(ss, p, ':')) parts.push_back(p);
  if (parts.size() == 2 && parts[0] == "full") return CensusMode::full(std::stod(parts[1]));
  if (parts.size() == 3 && parts[0] == "block") return CensusMode::block(std::stoi(parts[1]), std::stod(parts[2]));
  throw std::invalid_argument("census mode '" + spec + "': expected full:<t> or block:<B>:<u>");
}

int run_analyze(const AnalyzeArgs& a) {
  const Vocabulary vocab(a.max_number);
  std::vector<TokenSeq> corpus;
  if (a.enumerate) {
    corpus = enumerate_arithmetic({a.lo, a.hi, a.clauses, "a", "b"}, vocab);
  } else if (!a.corpus.empty()) {
    corpus = read_corpus(a.corpus, vocab);
  } else {
    throw std::invalid_argument("analyze: give --corpus or --enumerate");
  }
  for (const auto& qtext : a.queries) {
    const ContextQuery q = ContextQuery::parse(qtext, vocab, a.target);
    const Distribution d = empirical_conditional(corpus, q);
    ojson j;
    j["query"] = q.to_string(vocab);
    j["matches"] = d.matches;
    if (d.empty()) {
      j["empty"] = true;
      std::cout << j.dump() << "\n";
      continue;
    }
    const auto rep = candidate_set(d, a.epsilon);
    ojson dist = ojson::object();
    for (const auto& [t, p] : rep.dist) dist[vocab.name(t)] = p;
    j["dist"] = dist;
    j["epsilon"] = rep.epsilon;
    std::vector<std::string> members;
    for (Token t : rep.members) members.push_back(vocab.name(t));
    j["members"] = members;
    j["K"] = rep.K;
    j["p_max"] = rep.p_max;
    j["top"] = vocab.name(rep.top);
    const int achievable = achievable_targets(corpus, q);
    j["achievable"] = achievable;
    j["regime"] = rep.degenerate ? "degenerate" : to_string(classify_regime(rep, achievable));
    std::cout << j.dump() << "\n";
  }
  Rng rng(a.seed, 0xce05);
  for (const auto& spec : a.census) {
    const CensusReport r = mask_regime_census(corpus, parse_census(spec), a.samples, a.epsilon, rng);
    ojson j;
    j["census"] = spec;
    j["samples"] = a.samples;
    j["targets"] = r.targets;
    for (Regime g : {Regime::reasoning, Regime::correlation, Regime::noise, Regime::degenerate}) {
      j[to_string(g)] = r.fraction(g);
    }
    std::cout << j.dump() << "\n";
  }
  return 0;
}

// ---- schedule-stats

struct StatsArgs {
  std::vector<int> block_sizes{2, 4, 8};
  long samples = 1000000;
  std::string mode = "both";
  std::uint64_t seed = 0;
};

int run_schedule_stats(const StatsArgs& a) {
  std::vector<bool> modes;
  if (a.mode == "unclipped" || a.mode == "both") modes.push_back(false);
  if (a.mode == "clipped" || a.mode == "both") modes.push_back(true);
  if (modes.empty()) throw std::invalid_argument("--mode must be unclipped, clipped or both");
  const Rng root(a.seed, 0x5c4e);
  for (int B : a.block_sizes) {
    for (bool clipped : modes) {
      Rng rng = root.fork(static_cast<std::uint64_t>(B) * 2 + clipped);
      const ScheduleStats s = schedule_stats(B, clipped, a.samples, rng);
      ojson j;
      j["B"] = B;
      j["clipped"] = clipped;
      j["n"] = s.n;
      j["zero_mask_fraction"] = s.zero_mask_fraction;
      j["stderr"] = s.stderr_;
      j["mean_masked"] = s.mean_masked;
      j["max_weight"] = s.max_weight;
      if (!clipped) j["analytic"] = zero_mask_fraction_analytic(B);
      std::cout << j.dump() << "\n";
    }
  }
  return 0;
}

// ---- grad-check

struct GradArgs {
  std::uint64_t seed = 0;
  int seeds = 1;
  bool verbose = false;
};

int run_grad_check(const GradArgs& a) {
  double worst = 0.0;
  std::string worst_name;
  for (int i = 0; i < a.seeds; ++i) {
    for (const auto& r : grad_check_suite(a.seed + static_cast<std::uint64_t>(i))) {
      if (a.verbose) std::cout << r.name << " seed=" << r.seed << " entries=" << r.entries << " max_rel_error=" << r.max_rel_error << "\n";
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        worst_name = r.name;
      }
    }
  }
  std::cout << "max relative gradient error: " << worst << " (" << worst_name << ")\n";
  return worst < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked block-diffusion language models at desk scale"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic arithmetic corpus, one sequence per line");
  gen->add_option("--out", gd.out, "Output corpus path")->required();
  gen->add_option("--n", gd.n, "Number of sequences");
  gen->add_option("--lo", gd.lo, "Smallest operand");
  gen->add_option("--hi", gd.hi, "Largest operand");
  gen->add_option("--clauses", gd.clauses, "Clauses per sequence");
  gen->add_option("--max-number", gd.max_number, "Largest number token");
  gen->add_flag("--enumerate", gd.enumerate, "Write every producible sequence once instead of sampling");
  gen->add_option("--seed", gd.seed, "Random seed");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Run a curriculum from a config file or a manifest");
  auto* cfg_opt = train->add_option("--config", tr.config, "Run configuration (flat key = value)");
  auto* man_opt = train->add_option("--manifest", tr.manifest, "Re-run the configuration recorded in a manifest");
  cfg_opt->excludes(man_opt);
  train->add_option("--out", tr.out, "Run directory")->required();
  auto* seed_opt = train->add_option("--seed", tr.seed, "Random seed (overrides the config)");
  train->add_flag("--force", tr.force, "Allow reusing a run directory");

  DecodeArgs dc;
  auto* decode = app.add_subcommand("decode", "Generate from a checkpoint");
  decode->add_option("--checkpoint", dc.checkpoint, "Checkpoint path")->required();
  auto* p_inline = decode->add_option("--prompt", dc.prompt, "Prompt as space-separated token names");
  auto* p_file = decode->add_option("--prompt-file", dc.prompt_file, "File holding the prompt");
  p_inline->excludes(p_file);
  decode->add_option("--B", dc.block_size, "Block size");
  decode->add_option("--steps", dc.steps, "Forward passes per block (default B)");
  decode->add_option("--k", dc.k, "Positions committed per step");
  decode->add_option("--max-new", dc.max_new, "Maximum new tokens");
  decode->add_option("--attention", dc.attention, "block_causal or bidirectional");
  decode->add_flag("--ar", dc.ar, "Greedy next-token decoding with the shifted head");
  decode->add_flag("--no-eos", dc.no_eos, "Do not stop at <eos>");
  decode->add_option("--seed", dc.seed, "Random seed (decoding is greedy)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Answer exact match on a corpus of arithmetic sequences");
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")->required();
  eval->add_option("--corpus", ev.corpus, "Corpus path")->required();
  eval->add_option("--B", ev.block_sizes, "Block sizes")->delimiter(',');
  eval->add_option("--attention", ev.attention, "block_causal or bidirectional");
  eval->add_option("--limit", ev.limit, "Use at most this many sequences");
  eval->add_option("--seed", ev.seed, "Random seed (evaluation is greedy)");

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "Candidate sets and regimes of empirical conditionals");
  analyze->add_option("--corpus", an.corpus, "Corpus path");
  analyze->add_flag("--enumerate", an.enumerate, "Use the full support of the generator");
  analyze->add_option("--lo", an.lo, "Smallest operand (with --enumerate)");
  analyze->add_option("--hi", an.hi, "Largest operand (with --enumerate)");
  analyze->add_option("--clauses", an.clauses, "Clauses (with --enumerate)");
  analyze->add_option("--max-number", an.max_number, "Largest number token");
  analyze->add_option("--query", an.queries, "Pattern with ▁ or _ wildcards");
  analyze->add_option("--target", an.target, "Which wildcard is the target (default last)");
  analyze->add_option("--epsilon", an.epsilon, "Candidate-set threshold")->required()->check(CLI::PositiveNumber);
  analyze->add_option("--census", an.census, "full:<t> or block:<B>:<u>");
  analyze->add_option("--samples", an.samples, "Census samples");
  analyze->add_option("--seed", an.seed, "Random seed");

  StatsArgs st;
  auto* stats = app.add_subcommand("schedule-stats", "Monte-Carlo statistics of block corruption");
  stats->add_option("--B", st.block_sizes, "Block sizes")->delimiter(',');
  stats->add_option("--samples", st.samples, "Samples per configuration");
  stats->add_option("--mode", st.mode, "unclipped, clipped or both");
  stats->add_option("--seed", st.seed, "Random seed");

  GradArgs gc;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every gradient rule");
  grad->add_option("--seed", gc.seed, "First seed");
  grad->add_option("--seeds", gc.seeds, "Number of consecutive seeds");
  grad->add_flag("--verbose", gc.verbose, "Print every check");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return run_gen_data(gd);
    if (*train) {
      if (tr.config.empty() && tr.manifest.empty()) throw std::invalid_argument("train: give --config or --manifest");
      tr.seed_given = seed_opt->count() > 0;
      return run_train(tr);
    }
    if (*decode) return run_decode(dc);
    if (*eval) return run_eval(ev);
    if (*analyze) return run_analyze(an);
    if (*stats) return run_schedule_stats(st);
    if (*grad) return run_grad_check(gc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
