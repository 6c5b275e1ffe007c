#pragma once

// Small pre-norm decoder transformer with a pluggable attention mask.
//
// Unshifted parametrization: logits at position i describe the token at i
// (masked positions predict themselves).
//
// Shifted parametrization: logits at position i describe the token at i + 1
// given x_{<=i}. They are produced by a mask placeholder query placed at
// position i + 1 that sees exactly what clean position i sees plus itself.
// The clean tokens and the n placeholders run as one 2n-row pass, so a
// next-token prediction and a block-1 masked prediction of the same token are
// the same computation on the same weights.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockdiff/attention_mask.hpp"
#include "blockdiff/rng.hpp"
#include "blockdiff/tensor.hpp"
#include "blockdiff/vocab.hpp"

namespace blockdiff {

enum class Parametrization { shifted, unshifted };

inline const char* to_string(Parametrization p) {
  return p == Parametrization::shifted ? "shifted" : "unshifted";
}

struct ModelConfig {
  int vocab_size = 33;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_len = 256;
  Parametrization parametrization = Parametrization::unshifted;
  double init_std = 0.02;
  /// Reserved id used for masked positions; defaults to the last vocabulary id.
  int mask_id = -1;

  int resolved_mask_id() const { return mask_id >= 0 ? mask_id : vocab_size - 1; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (d_model < 1 || n_layers < 0 || n_heads < 1 || d_ff < 1 || max_len < 1) fail("sizes must be positive");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (!(init_std > 0)) fail("init_std must be positive");
    if (resolved_mask_id() >= vocab_size) fail("mask_id outside vocabulary");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
using Parameters = std::map<std::string, Matrix<Scalar>>;

template <typename Scalar>
using BoundParameters = std::map<std::string, Var<Scalar>>;

/// Shapes every parameter tensor must have for `cfg`.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg) {
  std::map<std::string, Shape> s;
  const Index d = cfg.d_model;
  s["embed"] = {cfg.vocab_size, d};
  s["pos"] = {cfg.max_len, d};
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    s[p + "attn_norm"] = {1, d};
    s[p + "wq"] = {d, d};
    s[p + "wk"] = {d, d};
    s[p + "wv"] = {d, d};
    s[p + "wo"] = {d, d};
    s[p + "mlp_norm"] = {1, d};
    s[p + "w1"] = {d, cfg.d_ff};
    s[p + "b1"] = {1, cfg.d_ff};
    s[p + "w2"] = {cfg.d_ff, d};
    s[p + "b2"] = {1, d};
  }
  s["final_norm"] = {1, d};
  s["head_bias"] = {1, cfg.vocab_size};
  return s;
}

/// Gains and biases: not decayed, not randomly initialized.
inline bool is_gain_or_bias(const std::string& name) {
  auto ends = [&](const char* suf) {
    const std::string s(suf);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends("norm") || ends("b1") || ends("b2") || ends("bias");
}

template <typename Scalar>
void check_parameters(const ModelConfig& cfg, const Parameters<Scalar>& params) {
  const auto shapes = parameter_shapes(cfg);
  if (shapes.size() != params.size()) {
    throw ShapeError("parameters: expected " + std::to_string(shapes.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("parameters: missing tensor '" + name + "'");
    const Shape got{it->second.rows(), it->second.cols()};
    if (got != shape) {
      throw ShapeError("parameters: '" + name + "' has shape " + shape_string(got) + ", expected " +
                       shape_string(shape));
    }
  }
}

template <typename Scalar>
Parameters<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Parameters<Scalar> params;
  Rng root(seed, 0x1a17);
  std::uint64_t k = 0;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Rng rng = root.fork(k++);
    Matrix<Scalar> m(shape[0], shape[1]);
    if (name.ends_with("norm")) {
      m.setOnes();
    } else if (is_gain_or_bias(name)) {
      m.setZero();
    } else {
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(cfg.init_std * rng.normal());
    }
    params.emplace(name, std::move(m));
  }
  return params;
}

template <typename Scalar>
class Transformer {
 public:
  Transformer(ModelConfig cfg, Parameters<Scalar> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    check_parameters(cfg_, params_);
  }

  static Transformer initialized(const ModelConfig& cfg, std::uint64_t seed) {
    return Transformer(cfg, init_params<Scalar>(cfg, seed));
  }

  const ModelConfig& config() const { return cfg_; }
  const Parameters<Scalar>& params() const { return params_; }
  Parameters<Scalar>& mutable_params() { return params_; }

  /// Same weights, different output parametrization.
  Transformer with_parametrization(Parametrization p) const {
    ModelConfig c = cfg_;
    c.parametrization = p;
    return Transformer(c, params_);
  }

  BoundParameters<Scalar> bind(Tape<Scalar>& tape, bool trainable) const {
    BoundParameters<Scalar> b;
    for (const auto& [name, m] : params_) {
      b.emplace(name, trainable ? tape.variable(m) : tape.constant(m));
    }
    return b;
  }

  /// Final-normalized hidden states for an explicit token/position layout.
  Var<Scalar> hidden(Tape<Scalar>&, const BoundParameters<Scalar>& p, std::span<const Token> tokens,
                     std::span<const int> positions, const BoolMatrix& allow) const {
    const Index n = static_cast<Index>(tokens.size());
    if (positions.size() != tokens.size()) throw ShapeError("hidden: positions/tokens length mismatch");
    if (allow.rows() != n || allow.cols() != n) {
      throw ShapeError("hidden: mask " + shape_string({allow.rows(), allow.cols()}) + " for " +
                       std::to_string(n) + " tokens");
    }
    for (int pos : positions) {
      if (pos < 0 || pos >= cfg_.max_len) {
        throw std::out_of_range("forward: position " + std::to_string(pos) + " exceeds max_len " +
                                std::to_string(cfg_.max_len));
      }
    }
    for (Token t : tokens) {
      if (t < 0 || t >= cfg_.vocab_size) {
        throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(cfg_.vocab_size));
      }
    }
    const Index dh = cfg_.d_model / cfg_.n_heads;
    const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

    Var<Scalar> x = embedding(p.at("embed"), tokens) + embedding(p.at("pos"), positions);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      Var<Scalar> h = rms_norm(x, p.at(pre + "attn_norm"));
      Var<Scalar> q = matmul(h, p.at(pre + "wq"));
      Var<Scalar> k = matmul(h, p.at(pre + "wk"));
      Var<Scalar> v = matmul(h, p.at(pre + "wv"));
      std::vector<Var<Scalar>> heads;
      heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
      for (int hd = 0; hd < cfg_.n_heads; ++hd) {
        Var<Scalar> qh = slice_cols(q, hd * dh, dh);
        Var<Scalar> kh = slice_cols(k, hd * dh, dh);
        Var<Scalar> vh = slice_cols(v, hd * dh, dh);
        Var<Scalar> att = masked_softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), allow);
        heads.push_back(matmul(att, vh));
      }
      Var<Scalar> attn = cfg_.n_heads == 1 ? heads.front() : concat_cols(heads);
      x = x + matmul(attn, p.at(pre + "wo"));
      Var<Scalar> h2 = rms_norm(x, p.at(pre + "mlp_norm"));
      Var<Scalar> f = gelu(add_row(matmul(h2, p.at(pre + "w1")), p.at(pre + "b1")));
      x = x + add_row(matmul(f, p.at(pre + "w2")), p.at(pre + "b2"));
    }
    return rms_norm(x, p.at("final_norm"));
  }

  /// Tied output head.
  Var<Scalar> head(const BoundParameters<Scalar>& p, const Var<Scalar>& h) const {
    return add_row(matmul_nt(h, p.at("embed")), p.at("head_bias"));
  }

  /// Logits per position under this model's parametrization (see file
  /// comment). Shifted mode needs a causal mask and max_len >= n + 1.
  Var<Scalar> forward(Tape<Scalar>& tape, const BoundParameters<Scalar>& p, std::span<const Token> tokens,
                      const AttentionMaskSpec& mask) const {
    return forward(tape, p, tokens, mask, cfg_.parametrization);
  }

  /// Explicit parametrization; lets one set of weights serve both heads.
  Var<Scalar> forward(Tape<Scalar>& tape, const BoundParameters<Scalar>& p, std::span<const Token> tokens,
                      const AttentionMaskSpec& mask, Parametrization param) const {
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw std::invalid_argument("forward: empty sequence");
    if (n > cfg_.max_len) {
      throw std::out_of_range("forward: sequence length " + std::to_string(n) + " exceeds max_len " +
                              std::to_string(cfg_.max_len));
    }
    const BoolMatrix allow = build_attention_mask(mask, n);
    std::vector<int> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

    if (param == Parametrization::unshifted) {
      return head(p, hidden(tape, p, tokens, positions, allow));
    }

    if (mask.kind != MaskKind::causal) {
      throw std::invalid_argument("forward: shifted parametrization requires a causal mask");
    }
    if (n + 1 > cfg_.max_len) {
      throw std::out_of_range("forward: shifted mode needs position " + std::to_string(n) +
                              " but max_len is " + std::to_string(cfg_.max_len));
    }
    std::vector<Token> layout(tokens.begin(), tokens.end());
    layout.resize(2 * static_cast<std::size_t>(n), cfg_.resolved_mask_id());
    positions.resize(2 * static_cast<std::size_t>(n));
    BoolMatrix full = BoolMatrix::Constant(2 * n, 2 * n, false);
    full.topLeftCorner(n, n) = allow;
    for (int i = 0; i < n; ++i) {
      positions[static_cast<std::size_t>(n + i)] = i + 1;
      full.block(n + i, 0, 1, n) = allow.row(i);
      full(n + i, n + i) = true;
    }
    Var<Scalar> h = hidden(tape, p, layout, positions, full);
    return head(p, slice_rows(h, n, n));
  }

  /// Value-only forward.
  Matrix<Scalar> logits(std::span<const Token> tokens, const AttentionMaskSpec& mask) const {
    return logits(tokens, mask, cfg_.parametrization);
  }

  Matrix<Scalar> logits(std::span<const Token> tokens, const AttentionMaskSpec& mask, Parametrization param) const {
    Tape<Scalar> tape;
    auto p = bind(tape, false);
    return forward(tape, p, tokens, mask, param).value();
  }

 private:
  ModelConfig cfg_;
  Parameters<Scalar> params_;
};

}  // namespace blockdiff
