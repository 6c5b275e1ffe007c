#pragma once

// Block-wise iterative denoising and a greedy next-token baseline.
//
// Blocks are aligned to absolute positions (block j covers [jB, (j+1)B)), as
// in block-causal training, so the first generated block may be shorter
// when the prompt ends mid-block. The canvas holds prompt + max_new_tokens
// positions; not-yet-decoded blocks are all mask tokens.

#include <algorithm>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockdiff/model.hpp"

namespace blockdiff {

struct DecodeConfig {
  int block_size = 4;
  int steps_per_block = 4;
  int commits_per_step = 1;
  int max_new_tokens = 16;
  /// block_causal: the current block sees committed blocks and itself.
  /// bidirectional: every canvas position sees every other, future masks included.
  MaskKind attention = MaskKind::block_causal;
  /// Terminal token; -1 disables early stopping.
  Token eos = -1;

  void validate() const {
    if (block_size < 1) throw std::invalid_argument("DecodeConfig: block_size must be >= 1");
    if (steps_per_block < 1 || commits_per_step < 1) {
      throw std::invalid_argument("DecodeConfig: steps_per_block and commits_per_step must be >= 1");
    }
    if (static_cast<long>(commits_per_step) * steps_per_block < block_size) {
      throw std::invalid_argument("DecodeConfig: commits_per_step * steps_per_block (" +
                                  std::to_string(commits_per_step * steps_per_block) +
                                  ") cannot complete a block of " + std::to_string(block_size));
    }
    if (max_new_tokens < 0) throw std::invalid_argument("DecodeConfig: max_new_tokens must be >= 0");
    if (attention == MaskKind::causal) {
      throw std::invalid_argument("DecodeConfig: attention must be block_causal or bidirectional");
    }
  }
};

struct DecodeState {
  TokenSeq canvas;
  std::vector<std::uint8_t> masked;
  int prompt_len = 0;
  int block_begin = 0;
  int block_end = 0;
  int step = 0;  // forward passes within the current block
  std::vector<int> committed_now;
  std::vector<double> confidence;  // per canvas position, NaN outside the masked set
};

using DecodeObserver = std::function<void(const DecodeState&)>;

namespace detail {

/// Argmax over a logit row, never choosing `banned`. Ties go to the lower id.
template <typename Row>
std::pair<Token, double> best_token(const Row& row, Token banned) {
  using Scalar = typename Row::Scalar;
  Token best = -1;
  Scalar best_v = -std::numeric_limits<Scalar>::infinity();
  for (Index j = 0; j < row.size(); ++j) {
    if (j == banned) continue;
    if (best < 0 || row(j) > best_v) {
      best = static_cast<Token>(j);
      best_v = row(j);
    }
  }
  const auto p = softmax_row(row);
  return {best, static_cast<double>(p(best))};
}

}  // namespace detail

template <typename Scalar>
TokenSeq decode_blockwise(const Transformer<Scalar>& model, std::span<const Token> prompt, const DecodeConfig& cfg,
                          const DecodeObserver& observer = {}) {
  cfg.validate();
  if (prompt.empty()) throw std::invalid_argument("decode_blockwise: empty prompt");
  const int P = static_cast<int>(prompt.size());
  const int total = P + cfg.max_new_tokens;
  if (total > model.config().max_len) {
    throw std::out_of_range("decode_blockwise: prompt + max_new_tokens = " + std::to_string(total) +
                            " exceeds max_len " + std::to_string(model.config().max_len));
  }
  const Token mask_id = model.config().resolved_mask_id();
  const int B = cfg.block_size;

  DecodeState st;
  st.prompt_len = P;
  st.canvas.assign(prompt.begin(), prompt.end());
  st.canvas.resize(static_cast<std::size_t>(total), mask_id);
  st.masked.assign(static_cast<std::size_t>(total), 0);
  for (int i = P; i < total; ++i) st.masked[static_cast<std::size_t>(i)] = 1;

  AttentionMaskSpec mask{cfg.attention, B, {}, false};
  int pos = P;
  while (pos < total) {
    st.block_begin = pos;
    st.block_end = std::min(total, (pos / B + 1) * B);
    st.step = 0;
    int remaining = st.block_end - st.block_begin;
    while (remaining > 0) {
      const Matrix<Scalar> logits = model.logits(st.canvas, mask, Parametrization::unshifted);
      std::vector<std::pair<double, int>> cand;
      std::vector<Token> choice(static_cast<std::size_t>(total), -1);
      st.confidence.assign(static_cast<std::size_t>(total), std::numeric_limits<double>::quiet_NaN());
      for (int i = st.block_begin; i < st.block_end; ++i) {
        if (!st.masked[static_cast<std::size_t>(i)]) continue;
        auto [tok, conf] = detail::best_token(logits.row(i), mask_id);
        choice[static_cast<std::size_t>(i)] = tok;
        st.confidence[static_cast<std::size_t>(i)] = conf;
        cand.emplace_back(conf, i);
      }
      std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      const int k = std::min(cfg.commits_per_step, remaining);
      st.committed_now.clear();
      for (int c = 0; c < k; ++c) {
        const int i = cand[static_cast<std::size_t>(c)].second;
        st.canvas[static_cast<std::size_t>(i)] = choice[static_cast<std::size_t>(i)];
        st.masked[static_cast<std::size_t>(i)] = 0;
        st.committed_now.push_back(i);
      }
      std::sort(st.committed_now.begin(), st.committed_now.end());
      remaining -= k;
      ++st.step;
      if (observer) observer(st);
    }
    if (cfg.eos >= 0) {
      for (int i = st.block_begin; i < st.block_end; ++i) {
        if (st.canvas[static_cast<std::size_t>(i)] == cfg.eos) {
          return TokenSeq(st.canvas.begin(), st.canvas.begin() + i);
        }
      }
    }
    pos = st.block_end;
  }
  return st.canvas;
}

/// Greedy next-token decoding with the shifted head.
template <typename Scalar>
TokenSeq decode_ar(const Transformer<Scalar>& model, std::span<const Token> prompt, int max_new_tokens,
                   Token eos = -1) {
  if (prompt.empty()) throw std::invalid_argument("decode_ar: empty prompt");
  if (max_new_tokens < 0) throw std::invalid_argument("decode_ar: max_new_tokens must be >= 0");
  const Token mask_id = model.config().resolved_mask_id();
  TokenSeq out(prompt.begin(), prompt.end());
  for (int step = 0; step < max_new_tokens; ++step) {
    const Matrix<Scalar> logits = model.logits(out, AttentionMaskSpec::causal(), Parametrization::shifted);
    const Token next = detail::best_token(logits.row(logits.rows() - 1), mask_id).first;
    if (next == eos) break;
    out.push_back(next);
  }
  return out;
}

}  // namespace blockdiff
