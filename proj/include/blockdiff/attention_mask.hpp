#pragma once

#include <string>
#include <vector>

#include "blockdiff/tensor.hpp"

namespace blockdiff {

enum class MaskKind { causal, bidirectional, block_causal };

/// Which positions may attend to which.
///
/// `segment_ids` labels packed samples. Negative ids mark padding, which is
/// visible only to itself. Packed samples are mutually visible unless
/// `isolate_segments` is set.
struct AttentionMaskSpec {
  MaskKind kind = MaskKind::causal;
  int block_size = 1;
  std::vector<int> segment_ids;
  bool isolate_segments = false;

  static AttentionMaskSpec causal() { return {MaskKind::causal, 1, {}, false}; }
  static AttentionMaskSpec bidirectional() { return {MaskKind::bidirectional, 1, {}, false}; }
  static AttentionMaskSpec block_causal(int b) { return {MaskKind::block_causal, b, {}, false}; }
};

/// allow(i, j) is true when position i may attend to position j.
BoolMatrix build_attention_mask(const AttentionMaskSpec& spec, int seq_len);

const char* to_string(MaskKind kind);
MaskKind mask_kind_from_string(const std::string& name);

}  // namespace blockdiff
