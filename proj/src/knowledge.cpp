#include "blockdiff/knowledge.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#include "blockdiff/corruption.hpp"

namespace blockdiff {

void ArithmeticCorpusConfig::validate(const Vocabulary& vocab) const {
  if (hi < lo) throw std::invalid_argument("arithmetic corpus: hi < lo");
  if (lo < 0) throw std::invalid_argument("arithmetic corpus: negative operands");
  if (clauses < 1) throw std::invalid_argument("arithmetic corpus: need at least one clause");
  if (2 * hi > vocab.max_number()) {
    throw std::invalid_argument("arithmetic corpus: sum " + std::to_string(2 * hi) +
                                " not representable (vocabulary numbers go to " +
                                std::to_string(vocab.max_number()) + ")");
  }
  for (const auto& v : {var_a, var_b}) {
    if (v != "a" && v != "b" && v != "c" && v != "d") {
      throw std::invalid_argument("arithmetic corpus: variable name '" + v + "' not in vocabulary");
    }
  }
  if (var_a == var_b) throw std::invalid_argument("arithmetic corpus: variable names must differ");
}

TokenSeq arithmetic_clause(int x, int y, const ArithmeticCorpusConfig& cfg, const Vocabulary& vocab) {
  const Token a = vocab.symbol(cfg.var_a);
  const Token b = vocab.symbol(cfg.var_b);
  const Token eq = vocab.symbol("=");
  const Token comma = vocab.symbol(",");
  return {a, eq, vocab.number(x), comma, b, eq, vocab.number(y), comma,
          a, vocab.symbol("+"), b, eq, vocab.number(x + y), vocab.symbol(";")};
}

std::vector<TokenSeq> gen_arithmetic(const ArithmeticCorpusConfig& cfg, const Vocabulary& vocab, long n_sequences,
                                     std::uint64_t seed) {
  cfg.validate(vocab);
  Rng rng(seed, 0xa417);
  std::vector<TokenSeq> out;
  out.reserve(static_cast<std::size_t>(std::max(0L, n_sequences)));
  for (long s = 0; s < n_sequences; ++s) {
    TokenSeq seq;
    for (int c = 0; c < cfg.clauses; ++c) {
      const int x = static_cast<int>(rng.uniform_int(cfg.lo, cfg.hi));
      const int y = static_cast<int>(rng.uniform_int(cfg.lo, cfg.hi));
      const auto clause = arithmetic_clause(x, y, cfg, vocab);
      seq.insert(seq.end(), clause.begin(), clause.end());
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<TokenSeq> enumerate_arithmetic(const ArithmeticCorpusConfig& cfg, const Vocabulary& vocab) {
  cfg.validate(vocab);
  const int width = cfg.hi - cfg.lo + 1;
  const int slots = 2 * cfg.clauses;
  long total = 1;
  for (int i = 0; i < slots; ++i) {
    total *= width;
    if (total > 10'000'000) throw std::invalid_argument("enumerate_arithmetic: support too large");
  }
  std::vector<TokenSeq> out;
  out.reserve(static_cast<std::size_t>(total));
  for (long code = 0; code < total; ++code) {
    long rest = code;
    std::vector<int> vals(static_cast<std::size_t>(slots));
    for (int i = slots - 1; i >= 0; --i) {
      vals[static_cast<std::size_t>(i)] = cfg.lo + static_cast<int>(rest % width);
      rest /= width;
    }
    TokenSeq seq;
    for (int c = 0; c < cfg.clauses; ++c) {
      const auto clause = arithmetic_clause(vals[static_cast<std::size_t>(2 * c)],
                                            vals[static_cast<std::size_t>(2 * c + 1)], cfg, vocab);
      seq.insert(seq.end(), clause.begin(), clause.end());
    }
    out.push_back(std::move(seq));
  }
  return out;
}

void ContextQuery::validate() const {
  if (target < 0 || target >= static_cast<int>(pattern.size())) {
    throw std::invalid_argument("ContextQuery: target outside pattern");
  }
  if (pattern[static_cast<std::size_t>(target)].has_value()) {
    throw std::invalid_argument("ContextQuery: target slot must be a wildcard");
  }
}

ContextQuery ContextQuery::parse(std::string_view text, const Vocabulary& vocab, int target_wildcard) {
  ContextQuery q;
  std::istringstream is{std::string(text)};
  std::string word;
  std::vector<int> wild;
  while (is >> word) {
    if (word == "\xE2\x96\x81" || word == "_") {
      wild.push_back(static_cast<int>(q.pattern.size()));
      q.pattern.emplace_back(std::nullopt);
    } else {
      q.pattern.emplace_back(vocab.symbol(word));
    }
  }
  if (wild.empty()) throw std::invalid_argument("ContextQuery: pattern has no wildcard slot");
  if (target_wildcard < 0) {
    q.target = wild.back();
  } else if (target_wildcard < static_cast<int>(wild.size())) {
    q.target = wild[static_cast<std::size_t>(target_wildcard)];
  } else {
    throw std::invalid_argument("ContextQuery: wildcard index " + std::to_string(target_wildcard) +
                                " out of range");
  }
  return q;
}

std::string ContextQuery::to_string(const Vocabulary& vocab) const {
  std::string out;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (i) out += ' ';
    out += pattern[i] ? vocab.name(*pattern[i]) : std::string("\xE2\x96\x81");
  }
  return out;
}

namespace {

template <typename Fn>
void for_each_match(const std::vector<TokenSeq>& corpus, const ContextQuery& q, Fn&& fn) {
  const std::size_t L = q.pattern.size();
  for (const auto& seq : corpus) {
    if (seq.size() < L) continue;
    for (std::size_t off = 0; off + L <= seq.size(); ++off) {
      bool ok = true;
      for (std::size_t k = 0; k < L && ok; ++k) {
        if (q.pattern[k] && *q.pattern[k] != seq[off + k]) ok = false;
      }
      if (ok) fn(seq[off + static_cast<std::size_t>(q.target)]);
    }
  }
}

}  // namespace

Distribution empirical_conditional(const std::vector<TokenSeq>& corpus, const ContextQuery& query) {
  query.validate();
  std::map<Token, long> counts;
  Distribution d;
  for_each_match(corpus, query, [&](Token t) {
    ++counts[t];
    ++d.matches;
  });
  for (const auto& [tok, c] : counts) d.probs[tok] = static_cast<double>(c) / static_cast<double>(d.matches);
  return d;
}

int achievable_targets(const std::vector<TokenSeq>& corpus, const ContextQuery& query) {
  query.validate();
  ContextQuery open = query;
  for (auto& slot : open.pattern) slot.reset();
  std::set<Token> seen;
  for_each_match(corpus, open, [&](Token t) { seen.insert(t); });
  return static_cast<int>(seen.size());
}

const char* to_string(Regime r) {
  switch (r) {
    case Regime::reasoning:
      return "reasoning";
    case Regime::correlation:
      return "correlation";
    case Regime::noise:
      return "noise";
    case Regime::degenerate:
      return "degenerate";
  }
  return "?";
}

CandidateSetReport candidate_set(const Distribution& dist, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("candidate_set: epsilon must be positive");
  if (dist.empty()) throw std::invalid_argument("candidate_set: empty distribution");
  CandidateSetReport r;
  r.dist = dist.probs;
  r.epsilon = epsilon;
  r.matches = dist.matches;
  for (const auto& [tok, p] : dist.probs) {
    if (p >= epsilon) r.members.push_back(tok);
    if (p > r.p_max) {
      r.p_max = p;
      r.top = tok;
    }
  }
  r.K = static_cast<int>(r.members.size());
  r.degenerate = r.K == 0;
  return r;
}

Regime classify_regime(const CandidateSetReport& report, int achievable, const RegimeThresholds& th) {
  if (report.degenerate || report.K == 0) throw std::invalid_argument("classify_regime: degenerate report");
  if (report.K <= th.k_reasoning && report.p_max >= th.p_reasoning) return Regime::reasoning;
  if (report.K >= th.noise_fraction * achievable && report.p_max <= 2.0 / report.K) return Regime::noise;
  return Regime::correlation;
}

double CensusReport::fraction(Regime r) const {
  if (targets == 0) return 0.0;
  auto it = histogram.find(r);
  return it == histogram.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(targets);
}

CensusReport mask_regime_census(const std::vector<TokenSeq>& corpus, const CensusMode& mode, long n_samples,
                                double epsilon, Rng& rng, const RegimeThresholds& th) {
  if (n_samples < 1) throw std::invalid_argument("mask_regime_census: n_samples must be >= 1");
  if (corpus.empty()) throw std::invalid_argument("mask_regime_census: empty corpus");
  CensusReport rep;
  constexpr Token kMaskSentinel = -1;
  for (long s = 0; s < n_samples; ++s) {
    Rng local = rng.fork(static_cast<std::uint64_t>(s));
    const auto& seq = corpus[local.uniform_index(corpus.size())];
    CorruptionSample cs;
    if (mode.kind == CensusMode::Kind::full) {
      cs = corrupt_full(seq, mode.t, local, kMaskSentinel);
    } else {
      const int B = mode.block_size;
      const int n_blocks = (static_cast<int>(seq.size()) + B - 1) / B;
      const int blk = static_cast<int>(local.uniform_index(static_cast<std::uint64_t>(n_blocks)));
      cs = corrupt_block(seq, blk, B, clip_block_rate(mode.u, B), local, kMaskSentinel);
    }
    // Later blocks are invisible under block-causal attention: wildcards.
    std::size_t visible_end = seq.size();
    if (mode.kind == CensusMode::Kind::block) {
      visible_end = std::min(seq.size(), static_cast<std::size_t>((cs.block_index + 1) * mode.block_size));
    }
    ContextQuery q;
    q.pattern.resize(seq.size());
    for (std::size_t i = 0; i < visible_end; ++i) {
      if (!cs.mask_flags[i]) q.pattern[i] = seq[i];
    }
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (!cs.mask_flags[i]) continue;
      q.target = static_cast<int>(i);
      const auto rep_i = candidate_set(empirical_conditional(corpus, q), epsilon);
      const Regime r = rep_i.degenerate ? Regime::degenerate
                                        : classify_regime(rep_i, achievable_targets(corpus, q), th);
      ++rep.histogram[r];
      ++rep.targets;
    }
  }
  return rep;
}

}  // namespace blockdiff
