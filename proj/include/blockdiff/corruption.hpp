#pragma once

// Forward noising processes for masked diffusion.
//
// Convention: the corruption time t is the mask ratio, u(t) = t. Under
// t ~ U(0, 1) this induces the same rate distribution as u(t) = 1 - t, and
// the per-token ELBO weight reads directly as 1 / t.

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "blockdiff/rng.hpp"
#include "blockdiff/vocab.hpp"

namespace blockdiff {

struct CorruptionSample {
  TokenSeq x0;
  TokenSeq xt;
  std::vector<std::uint8_t> mask_flags;
  double t = 0.0;
  double u_eff = 0.0;
  int block_index = -1;  // -1 for full-sequence corruption
  double token_weight = 0.0;  // 1 / u_eff
  bool forced = false;  // block fallback masked a position

  int masked_count() const;
};

/// u(t) = t on [0, 1].
double mask_rate_linear(double t);

/// min(1, max(u, 1/B)).
double clip_block_rate(double u, int block_size);

/// Expected fraction of zero-mask block steps under the unclipped linear
/// schedule: integral of (1 - t)^B over [0, 1] = 1 / (B + 1).
double zero_mask_fraction_analytic(int block_size);

/// Masks every eligible position independently with probability u(t).
/// `eligible` (optional, one flag per position) excludes e.g. BOS and padding.
CorruptionSample corrupt_full(std::span<const Token> x0, double t, Rng& rng, Token mask_id,
                              std::span<const std::uint8_t> eligible = {});

/// Masks eligible positions of block `block_index` iid with probability
/// u_blk in [1/B, 1]; if none end up masked, one eligible in-block position
/// is chosen uniformly and forced. Positions outside the block stay clean.
CorruptionSample corrupt_block(std::span<const Token> x0, int block_index, int block_size, double u_blk,
                               Rng& rng, Token mask_id, std::span<const std::uint8_t> eligible = {});

/// Bernoulli(u) pattern over `width` slots, optionally with the fallback.
std::vector<std::uint8_t> sample_block_pattern(int width, double u, Rng& rng, bool fallback,
                                               bool* forced = nullptr);

struct ScheduleStats {
  int block_size = 0;
  bool clipped = false;
  long n = 0;
  double zero_mask_fraction = 0.0;
  double stderr_ = 0.0;
  double mean_masked = 0.0;
  int min_masked = 0;
  double max_weight = 0.0;
  double min_u_eff = 0.0;
  double max_u_eff = 0.0;
  /// Counts per weight bucket [2^k, 2^(k+1)), keyed by k.
  std::map<int, long> weight_histogram;
};

/// Monte-Carlo statistics of block corruption under the global linear
/// schedule, with or without block clipping and fallback.
ScheduleStats schedule_stats(int block_size, bool clipped, long n_samples, Rng& rng);

}  // namespace blockdiff
