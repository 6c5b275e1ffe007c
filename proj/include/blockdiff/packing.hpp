#pragma once

// Sequence packing for training buffers.
//
// Each sample is followed by k ~ U{eos_min..eos_max} eos tokens and samples
// are laid end to end. A unit that does not fit in the current buffer starts
// a new one; a unit longer than the buffer has its eos run cut at the buffer
// end. Leftover space is padding.

#include <cstdint>
#include <vector>

#include "blockdiff/rng.hpp"
#include "blockdiff/vocab.hpp"

namespace blockdiff {

struct PackedBuffer {
  TokenSeq tokens;
  /// Sample index within the buffer; -1 marks padding. A leading BOS
  /// belongs to segment 0.
  std::vector<int> segments;
  /// Sampled eos run length for each sample, before any cut.
  std::vector<int> eos_runs;

  /// Flags positions that may be corrupted or supervised: not BOS, not padding.
  std::vector<std::uint8_t> trainable(Token bos) const;
  int real_tokens() const;
};

struct PackingConfig {
  int context_len = 64;
  int eos_min = 1;
  int eos_max = 4;
  Token eos = 0;
  Token pad = 0;
  /// Written at position 0 of every buffer when >= 0.
  Token bos = -1;

  void validate() const;
};

/// Packs the corpus in order. Rejects any sample that cannot fit in a buffer
/// on its own (naming its index).
std::vector<PackedBuffer> pack_sequences(const std::vector<TokenSeq>& corpus, const PackingConfig& cfg, Rng& rng);

/// In-place Fisher-Yates permutation driven by `rng`.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace blockdiff
