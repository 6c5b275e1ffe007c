#include "blockdiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "blockdiff/corruption.hpp"
#include "blockdiff/model.hpp"
#include "blockdiff/objectives.hpp"
#include "blockdiff/rng.hpp"

namespace blockdiff {

double gradient_relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const std::string& name, const ScalarGraph& f,
                                const std::vector<Matrix<double>>& inputs, double h) {
  GradCheckResult res;
  res.name = name;

  std::vector<Matrix<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& m : inputs) vars.push_back(tape.variable(m));
    Var<double> out = f(tape, vars);
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  auto eval = [&](const std::vector<Matrix<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& m : xs) vars.push_back(tape.constant(m));
    return f(tape, vars).value()(0, 0);
  };

  std::vector<Matrix<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Index e = 0; e < inputs[k].size(); ++e) {
      const double orig = inputs[k].data()[e];
      probe[k].data()[e] = orig + h;
      const double up = eval(probe);
      probe[k].data()[e] = orig - h;
      const double down = eval(probe);
      probe[k].data()[e] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = gradient_relative_error(analytic[k].data()[e], numeric);
      if (err >= res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_analytic = analytic[k].data()[e];
        res.worst_numeric = numeric;
      }
      ++res.entries;
    }
  }
  return res;
}

namespace {

Matrix<double> random_matrix(Rng& rng, Index r, Index c, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

BoolMatrix random_allow(Rng& rng, Index n) {
  BoolMatrix a(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) a(i, j) = rng.bernoulli(0.6);
    a(i, static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(n)))) = true;
  }
  return a;
}

/// Reduces any matrix output to a scalar with fixed random weights so every
/// output entry contributes to the checked gradient.
Var<double> reduce(const Var<double>& v, std::uint64_t salt) {
  Rng rng(salt, 77);
  return weighted_sum(v, random_matrix(rng, v.rows(), v.cols()));
}

}  // namespace

std::vector<GradCheckResult> grad_check_suite(std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  Rng rng(seed, 0x9c);
  auto add = [&](GradCheckResult r) {
    r.seed = seed;
    out.push_back(std::move(r));
  };

  add(check_gradients("matmul", [&](auto&, const auto& x) { return reduce(matmul(x[0], x[1]), seed); },
                      {random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)}));
  add(check_gradients("matmul_nt", [&](auto&, const auto& x) { return reduce(matmul_nt(x[0], x[1]), seed); },
                      {random_matrix(rng, 3, 4), random_matrix(rng, 5, 4)}));
  add(check_gradients("add", [&](auto&, const auto& x) { return reduce(x[0] + x[1], seed); },
                      {random_matrix(rng, 3, 4), random_matrix(rng, 3, 4)}));
  add(check_gradients("sub", [&](auto&, const auto& x) { return reduce(x[0] - x[1], seed); },
                      {random_matrix(rng, 3, 4), random_matrix(rng, 3, 4)}));
  add(check_gradients("mul", [&](auto&, const auto& x) { return reduce(mul(x[0], x[1]), seed); },
                      {random_matrix(rng, 3, 4), random_matrix(rng, 3, 4)}));
  add(check_gradients("scale", [&](auto&, const auto& x) { return reduce(scale(x[0], 0.37), seed); },
                      {random_matrix(rng, 2, 5)}));
  add(check_gradients("add_row", [&](auto&, const auto& x) { return reduce(add_row(x[0], x[1]), seed); },
                      {random_matrix(rng, 4, 3), random_matrix(rng, 1, 3)}));
  add(check_gradients("sum", [&](auto&, const auto& x) { return sum(mul(x[0], x[0])); },
                      {random_matrix(rng, 3, 3)}));
  {
    const std::vector<int> ids = {2, 0, 2, 4, 1};
    add(check_gradients("embedding",
                        [&](auto&, const auto& x) { return reduce(embedding(x[0], std::span<const int>(ids)), seed); },
                        {random_matrix(rng, 5, 3)}));
  }
  add(check_gradients("rms_norm", [&](auto&, const auto& x) { return reduce(rms_norm(x[0], x[1]), seed); },
                      {random_matrix(rng, 4, 6), random_matrix(rng, 1, 6)}));
  add(check_gradients("gelu", [&](auto&, const auto& x) { return reduce(gelu(x[0]), seed); },
                      {random_matrix(rng, 4, 5, 2.0)}));
  {
    const BoolMatrix allow = random_allow(rng, 6);
    add(check_gradients("masked_softmax_rows",
                        [&](auto&, const auto& x) { return reduce(masked_softmax_rows(x[0], allow), seed); },
                        {random_matrix(rng, 6, 6, 2.0)}));
  }
  add(check_gradients("slice_cols", [&](auto&, const auto& x) { return reduce(slice_cols(x[0], 1, 3), seed); },
                      {random_matrix(rng, 3, 5)}));
  add(check_gradients("slice_rows", [&](auto&, const auto& x) { return reduce(slice_rows(x[0], 2, 2), seed); },
                      {random_matrix(rng, 5, 3)}));
  add(check_gradients("concat_cols",
                      [&](auto&, const auto& x) { return reduce(concat_cols<double>({x[0], x[1], x[0]}), seed); },
                      {random_matrix(rng, 3, 2), random_matrix(rng, 3, 4)}));
  {
    const std::vector<int> targets = {3, -1, 0, 6};
    add(check_gradients("cross_entropy_rows",
                        [&](auto&, const auto& x) {
                          return reduce(cross_entropy_rows(x[0], std::span<const int>(targets)), seed);
                        },
                        {random_matrix(rng, 4, 7, 2.0)}));
  }
  add(check_gradients("cross_entropy", [&](auto&, const auto& x) { return cross_entropy(x[0], 2); },
                      {random_matrix(rng, 1, 5, 2.0)}));

  // Composed model losses on a 2-layer transformer.
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.max_len = 12;
  cfg.init_std = 0.5;
  auto model = Transformer<double>::initialized(cfg, seed);
  const Token mask_id = cfg.resolved_mask_id();

  std::vector<std::string> names;
  std::vector<Matrix<double>> inputs;
  for (const auto& [name, m] : model.params()) {
    names.push_back(name);
    Matrix<double> jittered = m;
    // break the ones/zeros of fresh gains and biases
    for (Index i = 0; i < jittered.size(); ++i) jittered.data()[i] += 0.3 * rng.normal();
    inputs.push_back(jittered);
  }
  auto bind_inputs = [names](const std::vector<Var<double>>& vars) {
    BoundParameters<double> b;
    for (std::size_t i = 0; i < names.size(); ++i) b.emplace(names[i], vars[i]);
    return b;
  };

  std::vector<TokenSeq> batch;
  for (int s = 0; s < 2; ++s) {
    TokenSeq seq;
    for (int i = 0; i < 6; ++i) seq.push_back(static_cast<Token>(rng.uniform_index(10)));
    batch.push_back(seq);
  }
  std::vector<CorruptionSample> samples;
  for (const auto& seq : batch) {
    Rng r = rng.fork(samples.size());
    auto cs = corrupt_full(seq, 0.5, r, mask_id);
    if (cs.masked_count() == 0) cs = corrupt_full(seq, 1.0, r, mask_id);
    samples.push_back(cs);
  }
  std::vector<CorruptionSample> block_samples;
  for (const auto& seq : batch) {
    Rng r = rng.fork(100 + block_samples.size());
    block_samples.push_back(corrupt_block(seq, 1, 2, 0.5, r, mask_id));
  }

  add(check_gradients("model.ar_loss",
                      [&](Tape<double>& t, const auto& x) {
                        return ar_loss(model, t, bind_inputs(x), std::span<const TokenSeq>(batch)).loss;
                      },
                      inputs));
  add(check_gradients("model.dllm_loss.bidirectional",
                      [&](Tape<double>& t, const auto& x) {
                        return dllm_loss(model, t, bind_inputs(x), std::span<const CorruptionSample>(samples),
                                         AttentionMaskSpec::bidirectional())
                            .loss;
                      },
                      inputs));
  add(check_gradients("model.dllm_loss.block_causal",
                      [&](Tape<double>& t, const auto& x) {
                        return dllm_loss(model, t, bind_inputs(x), std::span<const CorruptionSample>(block_samples),
                                         AttentionMaskSpec::block_causal(2))
                            .loss;
                      },
                      inputs));
  add(check_gradients("model.warmup_loss.causal",
                      [&](Tape<double>& t, const auto& x) {
                        return warmup_loss(model, t, bind_inputs(x), std::span<const CorruptionSample>(samples),
                                           AttentionMaskSpec::causal())
                            .loss;
                      },
                      inputs));
  return out;
}

}  // namespace blockdiff
