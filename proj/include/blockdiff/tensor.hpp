#pragma once

// Dense 2-D tensors with a reverse-mode gradient tape.
//
// Every value is an Eigen row-major matrix templated on the scalar type
// (float for training, double for gradient verification). Operations are
// free functions that take `Var` handles, compute the forward value eagerly
// and, when any input requires a gradient, append a local backward rule to
// the owning tape. Nodes only ever reference earlier nodes, so a reverse
// sweep over node ids is a valid topological order.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace blockdiff {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using Shape = std::array<Index, 2>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[' << s[0] << 'x' << s[1] << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Matrix<Scalar> grad() const { return tape_->grad(id_); }
  Shape shape() const { return {value().rows(), value().cols()}; }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var<Scalar> variable(Mat value) { return push(std::move(value), true, nullptr); }

  /// Appends an op output. The backward rule is kept only when an input
  /// requires a gradient.
  Var<Scalar> record(Mat value, std::initializer_list<Var<Scalar>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  Var<Scalar> record(Mat value, std::span<const Var<Scalar>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  /// Reverse sweep from a scalar node. Gradients accumulate, so call once
  /// per tape.
  void backward(const Var<Scalar>& loss) {
    check_owner(loss);
    const Mat& lv = nodes_[loss.id()].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " +
                       shape_string({lv.rows(), lv.cols()}));
    }
    if (!nodes_[loss.id()].requires_grad) return;
    accumulate(loss, Mat::Ones(1, 1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  template <typename Derived>
  void accumulate(const Var<Scalar>& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  Mat grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (!n.has_grad) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var<Scalar> push(Mat value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(fn), requires_grad, false});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  void check_owner(const Var<Scalar>& v) const {
    if (&v.tape() != this || v.id() >= nodes_.size()) {
      throw std::invalid_argument("tape: variable belongs to a different tape");
    }
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Matrix<Scalar> out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

/// a * b^T, the attention-score product.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  }
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("add", a, b);
  Matrix<Scalar> out = a.value() + b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("sub", a, b);
  Matrix<Scalar> out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("mul", a, b);
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g * s);
  });
}

/// Adds a 1 x n bias row to every row of a. The only broadcast supported.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ShapeError("add_row: bias " + shape_string(bias.shape()) + " does not broadcast over " +
                     shape_string(a.shape()));
  }
  Matrix<Scalar> out = a.value().rowwise() + bias.value().row(0);
  return a.tape().record(std::move(out), {a, bias},
                         [a, bias](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(a, g);
                           if (bias.requires_grad()) t.accumulate(bias, g.colwise().sum());
                         });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, Matrix<Scalar>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

/// Sum of a .* w with w a constant of the same shape.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& a, const Matrix<Scalar>& w) {
  if (w.rows() != a.rows() || w.cols() != a.cols()) {
    throw ShapeError("weighted_sum: weights " + shape_string({w.rows(), w.cols()}) + " vs " +
                     shape_string(a.shape()));
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().cwiseProduct(w).sum();
  return a.tape().record(std::move(out), {a}, [a, w](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, w * g(0, 0));
  });
}

/// Gathers rows of `table` (vocab x d) for each id.
template <typename Scalar>
Var<Scalar> embedding(const Var<Scalar>& table, std::span<const int> ids) {
  Matrix<Scalar> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(table.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> copy(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table},
                             [table, copy](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                               Matrix<Scalar> gt = Matrix<Scalar>::Zero(table.rows(), table.cols());
                               for (std::size_t i = 0; i < copy.size(); ++i) {
                                 gt.row(copy[i]) += g.row(static_cast<Index>(i));
                               }
                               t.accumulate(table, gt);
                             });
}

/// Row-wise RMS normalization with a learned 1 x d gain.
template <typename Scalar>
Var<Scalar> rms_norm(const Var<Scalar>& x, const Var<Scalar>& gain, Scalar eps = Scalar(1e-6)) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    throw ShapeError("rms_norm: gain " + shape_string(gain.shape()) + " vs input " +
                     shape_string(x.shape()));
  }
  const Index n = x.rows();
  const Index d = x.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_rms(n);
  Matrix<Scalar> xhat(n, d);
  for (Index i = 0; i < n; ++i) {
    const Scalar ms = x.value().row(i).squaredNorm() / static_cast<Scalar>(d);
    inv_rms(i) = Scalar(1) / std::sqrt(ms + eps);
    xhat.row(i) = x.value().row(i) * inv_rms(i);
  }
  Matrix<Scalar> out = xhat.array().rowwise() * gain.value().row(0).array();
  return x.tape().record(
      std::move(out), {x, gain},
      [x, gain, xhat, inv_rms](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (gain.requires_grad()) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (!x.requires_grad()) return;
        const Index d = xhat.cols();
        Matrix<Scalar> gxhat = g.array().rowwise() * gain.value().row(0).array();
        Matrix<Scalar> gx(xhat.rows(), d);
        for (Index i = 0; i < xhat.rows(); ++i) {
          const Scalar proj = gxhat.row(i).dot(xhat.row(i)) / static_cast<Scalar>(d);
          gx.row(i) = (gxhat.row(i) - xhat.row(i) * proj) * inv_rms(i);
        }
        t.accumulate(x, gx);
      });
}

/// GELU, tanh approximation.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  constexpr Scalar c = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar k = Scalar(0.044715);
  const auto& xv = x.value().array();
  Matrix<Scalar> th = (c * (xv + k * xv.cube())).tanh().matrix();
  Matrix<Scalar> out = (Scalar(0.5) * xv * (Scalar(1) + th.array())).matrix();
  return x.tape().record(std::move(out), {x}, [x, th, c, k](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& xv = x.value().array();
    auto dy = Scalar(0.5) * (Scalar(1) + th.array()) +
              Scalar(0.5) * xv * (Scalar(1) - th.array().square()) * c *
                  (Scalar(1) + Scalar(3) * k * xv.square());
    t.accumulate(x, (g.array() * dy).matrix());
  });
}

/// Row softmax restricted to allowed entries. Disallowed entries are exactly
/// zero; every row needs at least one allowed entry.
template <typename Scalar>
Var<Scalar> masked_softmax_rows(const Var<Scalar>& x, const BoolMatrix& allow) {
  if (allow.rows() != x.rows() || allow.cols() != x.cols()) {
    throw ShapeError("masked_softmax_rows: mask " + shape_string({allow.rows(), allow.cols()}) +
                     " vs input " + shape_string(x.shape()));
  }
  const Matrix<Scalar>& xv = x.value();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(xv.rows(), xv.cols());
  for (Index i = 0; i < xv.rows(); ++i) {
    Scalar row_max = -std::numeric_limits<Scalar>::infinity();
    bool any = false;
    for (Index j = 0; j < xv.cols(); ++j) {
      if (allow(i, j)) {
        any = true;
        row_max = std::max(row_max, xv(i, j));
      }
    }
    if (!any) {
      throw std::invalid_argument("masked_softmax_rows: row " + std::to_string(i) +
                                  " has no allowed position");
    }
    Scalar z = 0;
    for (Index j = 0; j < xv.cols(); ++j) {
      if (allow(i, j)) {
        out(i, j) = std::exp(xv(i, j) - row_max);
        z += out(i, j);
      }
    }
    out.row(i) /= z;
  }
  Matrix<Scalar> y = out;
  return x.tape().record(std::move(out), {x}, [x, y](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> gy = g.cwiseProduct(y);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = gy.rowwise().sum();
    Matrix<Scalar> gx = gy - (y.array().colwise() * dots.array()).matrix();
    t.accumulate(x, gx);
  });
}

/// Columns [start, start + count).
template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + shape_string(x.shape()));
  }
  Matrix<Scalar> out = x.value().middleCols(start, count);
  return x.tape().record(std::move(out), {x},
                         [x, start, count](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> gx = Matrix<Scalar>::Zero(x.rows(), x.cols());
                           gx.middleCols(start, count) = g;
                           t.accumulate(x, gx);
                         });
}

/// Rows [start, start + count).
template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + shape_string(x.shape()));
  }
  Matrix<Scalar> out = x.value().middleRows(start, count);
  return x.tape().record(std::move(out), {x},
                         [x, start, count](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> gx = Matrix<Scalar>::Zero(x.rows(), x.cols());
                           gx.middleRows(start, count) = g;
                           t.accumulate(x, gx);
                         });
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " +
                       shape_string(p.shape()));
    }
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape().record(
      std::move(out), std::span<const Var<Scalar>>(parts),
      [parts](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Index at = 0;
        for (const auto& p : parts) {
          if (p.requires_grad()) t.accumulate(p, g.middleCols(at, p.cols()));
          at += p.cols();
        }
      });
}

/// Per-row cross-entropy -log softmax(logits_r)[target_r] as an n x 1
/// column. Rows whose target is negative are unsupervised and yield 0.
template <typename Scalar>
Var<Scalar> cross_entropy_rows(const Var<Scalar>& logits, std::span<const int> targets) {
  const Index n = logits.rows();
  const Index vocab = logits.cols();
  if (static_cast<Index>(targets.size()) != n) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                     shape_string(logits.shape()));
  }
  const Matrix<Scalar>& lv = logits.value();
  Matrix<Scalar> probs = Matrix<Scalar>::Zero(n, vocab);
  Matrix<Scalar> out = Matrix<Scalar>::Zero(n, 1);
  std::vector<int> tg(targets.begin(), targets.end());
  for (Index r = 0; r < n; ++r) {
    const int target = tg[static_cast<std::size_t>(r)];
    if (target < 0) continue;
    if (target >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(target) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    const Scalar m = lv.row(r).maxCoeff();
    probs.row(r) = (lv.row(r).array() - m).exp().matrix();
    const Scalar z = probs.row(r).sum();
    probs.row(r) /= z;
    out(r, 0) = (m + std::log(z)) - lv(r, target);
  }
  return logits.tape().record(
      std::move(out), {logits}, [logits, probs, tg](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> gl = probs;
        for (Index r = 0; r < gl.rows(); ++r) {
          const int target = tg[static_cast<std::size_t>(r)];
          if (target < 0) continue;
          gl(r, target) -= Scalar(1);
          gl.row(r) *= g(r, 0);
        }
        t.accumulate(logits, gl);
      });
}

/// Scalar cross-entropy for a single 1 x V logit row.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, int target) {
  if (logits.rows() != 1) {
    throw ShapeError("cross_entropy: expected one logit row, got " + shape_string(logits.shape()));
  }
  if (target < 0 || target >= logits.cols()) {
    throw std::out_of_range("cross_entropy: target " + std::to_string(target) +
                            " outside vocabulary of " + std::to_string(logits.cols()));
  }
  const int tg[1] = {target};
  return cross_entropy_rows(logits, std::span<const int>(tg, 1));
}

/// Value-only helpers shared by the model, decoder and tests.
template <typename Derived>
auto softmax_row(const Eigen::MatrixBase<Derived>& row) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = row.maxCoeff();
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> e = (row.array() - m).exp().matrix();
  return Eigen::Matrix<Scalar, 1, Eigen::Dynamic>(e / e.sum());
}

}  // namespace blockdiff
