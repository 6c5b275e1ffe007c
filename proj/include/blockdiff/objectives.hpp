#pragma once

// Training losses. All of them are normalized by the number of supervised
// tokens in the batch:
//
//   AR       mean over targets of -log p(x_i | x_{<i})          (shifted head)
//   DLLM     sum over masked tokens of w * -log p(x0_i | x_t) / count
//   warmup   the DLLM loss with every weight forced to 1
//
// where w = 1 / u_eff is attached to each sample at corruption time.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockdiff/corruption.hpp"
#include "blockdiff/model.hpp"

namespace blockdiff {

struct TokenLoss {
  int sequence = 0;
  int position = 0;
  Token target = 0;
  double ce = 0.0;
  double weight = 1.0;
};

template <typename Scalar>
struct LossReport {
  Var<Scalar> loss;  // scalar node on the caller's tape
  double value = 0.0;
  std::vector<TokenLoss> per_token;
  int supervised = 0;
  double mean_weight = 0.0;
  /// Unweighted mean cross-entropy over supervised tokens.
  double mean_ce = 0.0;
};

struct WarmupConfig {
  double u_init = 1e-3;
  long steps = 1;  // S_warmup
  long step = 0;   // s

  void validate() const {
    if (!(u_init > 0.0 && u_init <= 1.0)) throw std::invalid_argument("WarmupConfig: u_init must lie in (0, 1]");
    if (steps < 0 || step < 0 || step > steps) throw std::invalid_argument("WarmupConfig: need 0 <= s <= S_warmup");
  }
};

/// Corruption cap u_init + (1 - u_init) * s / S_warmup.
inline double warmup_umax(const WarmupConfig& w) {
  w.validate();
  if (w.steps == 0) return 1.0;
  return w.u_init + (1.0 - w.u_init) * static_cast<double>(w.step) / static_cast<double>(w.steps);
}

namespace detail {

inline const std::vector<int>* segments_at(std::span<const std::vector<int>> segments, std::size_t i) {
  if (segments.empty()) return nullptr;
  if (segments.size() <= i) throw std::invalid_argument("loss: fewer segment lists than sequences");
  return &segments[i];
}

template <typename Scalar>
LossReport<Scalar> finish(std::vector<Var<Scalar>>& terms, std::vector<TokenLoss> per_token,
                          const char* who) {
  LossReport<Scalar> r;
  r.supervised = static_cast<int>(per_token.size());
  if (r.supervised == 0) throw std::invalid_argument(std::string(who) + ": no supervised tokens");
  Var<Scalar> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  r.loss = scale(total, Scalar(1) / static_cast<Scalar>(r.supervised));
  r.value = static_cast<double>(r.loss.value()(0, 0));
  double wsum = 0.0, cesum = 0.0;
  for (const auto& t : per_token) {
    wsum += t.weight;
    cesum += t.ce;
  }
  r.mean_weight = wsum / r.supervised;
  r.mean_ce = cesum / r.supervised;
  r.per_token = std::move(per_token);
  return r;
}

}  // namespace detail

/// Next-token loss over each sequence. Position 0 is context only (a BOS
/// token makes x_1's term a conditional like the others); targets whose
/// segment id is negative (padding) are skipped.
template <typename Scalar>
LossReport<Scalar> ar_loss(const Transformer<Scalar>& model, Tape<Scalar>& tape, const BoundParameters<Scalar>& p,
                           std::span<const TokenSeq> batch, std::span<const std::vector<int>> segments = {}) {
  std::vector<Var<Scalar>> terms;
  std::vector<TokenLoss> per_token;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const TokenSeq& seq = batch[s];
    if (seq.size() < 2) {
      throw std::invalid_argument("ar_loss: sequence " + std::to_string(s) + " has fewer than 2 tokens");
    }
    AttentionMaskSpec mask = AttentionMaskSpec::causal();
    if (const auto* seg = detail::segments_at(segments, s)) mask.segment_ids = *seg;
    const int n = static_cast<int>(seq.size());
    std::vector<int> targets(static_cast<std::size_t>(n), -1);
    for (int i = 0; i + 1 < n; ++i) {
      const bool pad = !mask.segment_ids.empty() && mask.segment_ids[static_cast<std::size_t>(i + 1)] < 0;
      if (!pad) targets[static_cast<std::size_t>(i)] = seq[static_cast<std::size_t>(i + 1)];
    }
    Var<Scalar> logits = model.forward(tape, p, seq, mask, Parametrization::shifted);
    Var<Scalar> ce = cross_entropy_rows(logits, targets);
    Matrix<Scalar> w = Matrix<Scalar>::Zero(n, 1);
    for (int i = 0; i < n; ++i) {
      if (targets[static_cast<std::size_t>(i)] < 0) continue;
      w(i, 0) = Scalar(1);
      per_token.push_back({static_cast<int>(s), i + 1, targets[static_cast<std::size_t>(i)],
                           static_cast<double>(ce.value()(i, 0)), 1.0});
    }
    terms.push_back(weighted_sum(ce, w));
  }
  if (terms.empty()) throw std::invalid_argument("ar_loss: empty batch");
  return detail::finish(terms, std::move(per_token), "ar_loss");
}

namespace detail {

template <typename Scalar>
LossReport<Scalar> masked_loss(const Transformer<Scalar>& model, Tape<Scalar>& tape, const BoundParameters<Scalar>& p,
                               std::span<const CorruptionSample> samples, const AttentionMaskSpec& mask_kind,
                               std::span<const std::vector<int>> segments, bool unit_weights, const char* who) {
  std::vector<Var<Scalar>> terms;
  std::vector<TokenLoss> per_token;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const CorruptionSample& cs = samples[s];
    const int n = static_cast<int>(cs.xt.size());
    std::vector<int> targets(static_cast<std::size_t>(n), -1);
    int masked = 0;
    for (int i = 0; i < n; ++i) {
      if (cs.mask_flags[static_cast<std::size_t>(i)]) {
        targets[static_cast<std::size_t>(i)] = cs.x0[static_cast<std::size_t>(i)];
        ++masked;
      }
    }
    if (masked == 0) continue;
    AttentionMaskSpec mask = mask_kind;
    if (const auto* seg = segments_at(segments, s)) mask.segment_ids = *seg;
    const double weight = unit_weights ? 1.0 : cs.token_weight;
    if (!std::isfinite(weight)) throw std::invalid_argument(std::string(who) + ": non-finite token weight");
    Var<Scalar> logits = model.forward(tape, p, cs.xt, mask, Parametrization::unshifted);
    Var<Scalar> ce = cross_entropy_rows(logits, targets);
    Matrix<Scalar> w = Matrix<Scalar>::Zero(n, 1);
    for (int i = 0; i < n; ++i) {
      if (targets[static_cast<std::size_t>(i)] < 0) continue;
      w(i, 0) = static_cast<Scalar>(weight);
      per_token.push_back({static_cast<int>(s), i, targets[static_cast<std::size_t>(i)],
                           static_cast<double>(ce.value()(i, 0)), weight});
    }
    terms.push_back(weighted_sum(ce, w));
  }
  return finish(terms, std::move(per_token), who);
}

}  // namespace detail

/// Weighted masked-diffusion loss. `mask` selects the attention kind
/// (bidirectional, causal or block_causal with its B). Rejects batches with
/// no masked token.
template <typename Scalar>
LossReport<Scalar> dllm_loss(const Transformer<Scalar>& model, Tape<Scalar>& tape, const BoundParameters<Scalar>& p,
                             std::span<const CorruptionSample> samples, const AttentionMaskSpec& mask,
                             std::span<const std::vector<int>> segments = {}) {
  return detail::masked_loss(model, tape, p, samples, mask, segments, false, "dllm_loss");
}

/// dllm_loss with all token weights equal to 1.
template <typename Scalar>
LossReport<Scalar> warmup_loss(const Transformer<Scalar>& model, Tape<Scalar>& tape, const BoundParameters<Scalar>& p,
                               std::span<const CorruptionSample> samples, const AttentionMaskSpec& mask,
                               std::span<const std::vector<int>> segments = {}) {
  return detail::masked_loss(model, tape, p, samples, mask, segments, true, "warmup_loss");
}

}  // namespace blockdiff
