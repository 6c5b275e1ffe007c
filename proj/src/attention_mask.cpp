#include "blockdiff/attention_mask.hpp"

#include <stdexcept>
#include <string>

namespace blockdiff {

BoolMatrix build_attention_mask(const AttentionMaskSpec& spec, int seq_len) {
  if (seq_len < 0) throw std::invalid_argument("build_attention_mask: negative length");
  if (spec.kind == MaskKind::block_causal && spec.block_size <= 0) {
    throw std::invalid_argument("build_attention_mask: block size must be >= 1, got " +
                                std::to_string(spec.block_size));
  }
  const bool segmented = !spec.segment_ids.empty();
  if (segmented && static_cast<int>(spec.segment_ids.size()) != seq_len) {
    throw std::invalid_argument("build_attention_mask: " + std::to_string(spec.segment_ids.size()) +
                                " segment ids for length " + std::to_string(seq_len));
  }

  BoolMatrix allow(seq_len, seq_len);
  for (int i = 0; i < seq_len; ++i) {
    for (int j = 0; j < seq_len; ++j) {
      bool ok = false;
      switch (spec.kind) {
        case MaskKind::causal:
          ok = j <= i;
          break;
        case MaskKind::bidirectional:
          ok = true;
          break;
        case MaskKind::block_causal:
          ok = j / spec.block_size <= i / spec.block_size;
          break;
      }
      if (ok && segmented && i != j) {
        const int si = spec.segment_ids[static_cast<std::size_t>(i)];
        const int sj = spec.segment_ids[static_cast<std::size_t>(j)];
        if (si < 0 || sj < 0) ok = false;
        if (spec.isolate_segments && si != sj) ok = false;
      }
      allow(i, j) = ok;
    }
  }
  return allow;
}

const char* to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::causal:
      return "causal";
    case MaskKind::bidirectional:
      return "bidirectional";
    case MaskKind::block_causal:
      return "block_causal";
  }
  return "?";
}

MaskKind mask_kind_from_string(const std::string& name) {
  if (name == "causal") return MaskKind::causal;
  if (name == "bidirectional") return MaskKind::bidirectional;
  if (name == "block_causal") return MaskKind::block_causal;
  throw std::invalid_argument("unknown mask kind '" + name + "'");
}

}  // namespace blockdiff
