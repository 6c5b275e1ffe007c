#include "blockdiff/corruption.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace blockdiff {

int CorruptionSample::masked_count() const {
  return static_cast<int>(std::count(mask_flags.begin(), mask_flags.end(), std::uint8_t{1}));
}

double mask_rate_linear(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::domain_error("mask_rate_linear: t=" + std::to_string(t) + " outside [0, 1]");
  }
  return t;
}

double clip_block_rate(double u, int block_size) {
  if (block_size < 1) throw std::invalid_argument("clip_block_rate: block size must be >= 1");
  if (!(u >= 0.0 && u <= 1.0)) throw std::domain_error("clip_block_rate: rate outside [0, 1]");
  return std::min(1.0, std::max(u, 1.0 / block_size));
}

double zero_mask_fraction_analytic(int block_size) {
  if (block_size < 1) throw std::invalid_argument("zero_mask_fraction_analytic: block size must be >= 1");
  return 1.0 / (block_size + 1.0);
}

namespace {

bool is_eligible(std::span<const std::uint8_t> eligible, std::size_t i) {
  return eligible.empty() || eligible[i] != 0;
}

void check_eligible(std::span<const Token> x0, std::span<const std::uint8_t> eligible) {
  if (!eligible.empty() && eligible.size() != x0.size()) {
    throw std::invalid_argument("corruption: eligibility flags do not match sequence length");
  }
}

double weight_for(double u) {
  return u > 0.0 ? 1.0 / u : std::numeric_limits<double>::infinity();
}

}  // namespace

CorruptionSample corrupt_full(std::span<const Token> x0, double t, Rng& rng, Token mask_id,
                              std::span<const std::uint8_t> eligible) {
  if (x0.empty()) throw std::invalid_argument("corrupt_full: empty sequence");
  check_eligible(x0, eligible);
  const double u = mask_rate_linear(t);
  CorruptionSample s;
  s.x0.assign(x0.begin(), x0.end());
  s.xt = s.x0;
  s.mask_flags.assign(x0.size(), 0);
  s.t = t;
  s.u_eff = u;
  s.token_weight = weight_for(u);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (!is_eligible(eligible, i)) continue;
    if (rng.bernoulli(u)) {
      s.mask_flags[i] = 1;
      s.xt[i] = mask_id;
    }
  }
  return s;
}

std::vector<std::uint8_t> sample_block_pattern(int width, double u, Rng& rng, bool fallback, bool* forced) {
  if (width < 1) throw std::invalid_argument("sample_block_pattern: width must be >= 1");
  std::vector<std::uint8_t> flags(static_cast<std::size_t>(width), 0);
  bool any = false;
  for (auto& f : flags) {
    f = rng.bernoulli(u) ? 1 : 0;
    any = any || f;
  }
  if (forced) *forced = false;
  if (!any && fallback) {
    flags[rng.uniform_index(static_cast<std::uint64_t>(width))] = 1;
    if (forced) *forced = true;
  }
  return flags;
}

CorruptionSample corrupt_block(std::span<const Token> x0, int block_index, int block_size, double u_blk,
                               Rng& rng, Token mask_id, std::span<const std::uint8_t> eligible) {
  if (x0.empty()) throw std::invalid_argument("corrupt_block: empty sequence");
  if (block_size < 1) throw std::invalid_argument("corrupt_block: block size must be >= 1");
  check_eligible(x0, eligible);
  const int len = static_cast<int>(x0.size());
  const int n_blocks = (len + block_size - 1) / block_size;
  if (block_index < 0 || block_index >= n_blocks) {
    throw std::out_of_range("corrupt_block: block " + std::to_string(block_index) + " outside [0, " +
                            std::to_string(n_blocks) + ")");
  }
  constexpr double slack = 1e-12;
  if (u_blk < 1.0 / block_size - slack || u_blk > 1.0 + slack) {
    throw std::domain_error("corrupt_block: u_blk=" + std::to_string(u_blk) + " outside [1/B, 1]");
  }

  std::vector<int> slots;
  const int begin = block_index * block_size;
  const int end = std::min(len, begin + block_size);
  for (int i = begin; i < end; ++i) {
    if (is_eligible(eligible, static_cast<std::size_t>(i))) slots.push_back(i);
  }
  if (slots.empty()) {
    throw std::invalid_argument("corrupt_block: block " + std::to_string(block_index) +
                                " has no eligible position");
  }

  CorruptionSample s;
  s.x0.assign(x0.begin(), x0.end());
  s.xt = s.x0;
  s.mask_flags.assign(x0.size(), 0);
  s.t = u_blk;
  s.u_eff = u_blk;
  s.block_index = block_index;
  s.token_weight = weight_for(u_blk);
  const auto pattern = sample_block_pattern(static_cast<int>(slots.size()), u_blk, rng, true, &s.forced);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (!pattern[k]) continue;
    const auto i = static_cast<std::size_t>(slots[k]);
    s.mask_flags[i] = 1;
    s.xt[i] = mask_id;
  }
  return s;
}

ScheduleStats schedule_stats(int block_size, bool clipped, long n_samples, Rng& rng) {
  if (block_size < 1) throw std::invalid_argument("schedule_stats: block size must be >= 1");
  if (n_samples < 1) throw std::invalid_argument("schedule_stats: n_samples must be >= 1");
  ScheduleStats st;
  st.block_size = block_size;
  st.clipped = clipped;
  st.n = n_samples;
  st.min_masked = block_size;
  st.min_u_eff = 1.0;
  st.max_u_eff = 0.0;

  long zero = 0;
  double masked_total = 0.0;
  for (long k = 0; k < n_samples; ++k) {
    const double t = rng.uniform();
    double u = mask_rate_linear(t);
    if (clipped) u = clip_block_rate(u, block_size);
    const auto flags = sample_block_pattern(block_size, u, rng, clipped);
    const int m = static_cast<int>(std::count(flags.begin(), flags.end(), std::uint8_t{1}));
    if (m == 0) ++zero;
    masked_total += m;
    st.min_masked = std::min(st.min_masked, m);
    st.min_u_eff = std::min(st.min_u_eff, u);
    st.max_u_eff = std::max(st.max_u_eff, u);
    const double w = weight_for(u);
    st.max_weight = std::max(st.max_weight, w);
    const int bucket = std::isfinite(w) ? static_cast<int>(std::floor(std::log2(w))) : 1024;
    ++st.weight_histogram[bucket];
  }
  const double p = static_cast<double>(zero) / static_cast<double>(n_samples);
  st.zero_mask_fraction = p;
  st.stderr_ = std::sqrt(p * (1.0 - p) / static_cast<double>(n_samples));
  st.mean_masked = masked_total / static_cast<double>(n_samples);
  return st;
}

}  // namespace blockdiff
