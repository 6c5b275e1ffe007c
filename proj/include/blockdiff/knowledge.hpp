#pragma once

// Brute-force token-knowledge analysis on a synthetic arithmetic corpus.
//
// Sequences are clauses "a = x , b = y , a + b = s ;" with x, y uniform on
// [lo, hi]. For a context pattern (some slots revealed, some wildcards) the
// empirical conditional of a target slot is counted exactly over the corpus,
// thresholded at epsilon into a candidate set, and labelled with a regime.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "blockdiff/rng.hpp"
#include "blockdiff/vocab.hpp"

namespace blockdiff {

struct ArithmeticCorpusConfig {
  int lo = 1;
  int hi = 4;
  int clauses = 1;
  std::string var_a = "a";
  std::string var_b = "b";

  void validate(const Vocabulary& vocab) const;
  /// Tokens per generated sequence.
  int sequence_length() const { return 14 * clauses; }
};

/// `clauses` clauses with fresh uniform operands each.
std::vector<TokenSeq> gen_arithmetic(const ArithmeticCorpusConfig& cfg, const Vocabulary& vocab, long n_sequences,
                                     std::uint64_t seed);

/// Every sequence the generator can produce, each exactly once. The
/// generator is uniform over this set.
std::vector<TokenSeq> enumerate_arithmetic(const ArithmeticCorpusConfig& cfg, const Vocabulary& vocab);

TokenSeq arithmetic_clause(int x, int y, const ArithmeticCorpusConfig& cfg, const Vocabulary& vocab);

/// Token pattern; nullopt slots are wildcards. The target must be a wildcard.
struct ContextQuery {
  std::vector<std::optional<Token>> pattern;
  int target = -1;

  void validate() const;
  /// Whitespace-separated names with "▁" (or "_") for wildcards. The target
  /// defaults to the last wildcard.
  static ContextQuery parse(std::string_view text, const Vocabulary& vocab, int target_wildcard = -1);
  std::string to_string(const Vocabulary& vocab) const;
};

struct Distribution {
  std::map<Token, double> probs;
  long matches = 0;
  bool empty() const { return matches == 0; }
};

/// Frequencies of the target slot over every corpus window (any offset)
/// whose revealed slots match. Empty when nothing matches.
Distribution empirical_conditional(const std::vector<TokenSeq>& corpus, const ContextQuery& query);

/// Distinct tokens observed at the target slot over all windows of the
/// pattern's length, i.e. with every other slot a wildcard.
int achievable_targets(const std::vector<TokenSeq>& corpus, const ContextQuery& query);

enum class Regime { reasoning, correlation, noise, degenerate };
const char* to_string(Regime r);

struct RegimeThresholds {
  int k_reasoning = 2;
  double p_reasoning = 0.7;
  double noise_fraction = 0.8;  // K >= fraction * achievable
  // noise additionally needs p_max <= 2 / K
};

struct CandidateSetReport {
  std::map<Token, double> dist;
  double epsilon = 0.0;
  std::vector<Token> members;
  int K = 0;
  double p_max = 0.0;
  Token top = -1;
  bool degenerate = false;
  long matches = 0;
};

CandidateSetReport candidate_set(const Distribution& dist, double epsilon);

/// Throws on a degenerate report (K = 0).
Regime classify_regime(const CandidateSetReport& report, int achievable, const RegimeThresholds& th = {});

struct CensusMode {
  enum class Kind { full, block } kind = Kind::full;
  double t = 0.5;    // full-sequence corruption level
  int block_size = 1;
  double u = 0.5;    // block rate before clipping

  static CensusMode full(double t) { return {Kind::full, t, 1, 0.0}; }
  static CensusMode block(int b, double u) { return {Kind::block, 0.0, b, u}; }
};

struct CensusReport {
  std::map<Regime, long> histogram;
  long targets = 0;
  double fraction(Regime r) const;
};

/// Samples corruption patterns over corpus sequences, forms the induced
/// query at each masked target and tallies regimes. The query reveals every
/// clean token the target could attend to: the whole sequence for full
/// masking, the prefix through the corrupted block for block masking.
CensusReport mask_regime_census(const std::vector<TokenSeq>& corpus, const CensusMode& mode, long n_samples,
                                double epsilon, Rng& rng, const RegimeThresholds& th = {});

}  // namespace blockdiff
