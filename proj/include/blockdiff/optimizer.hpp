#pragma once

// AdamW with decoupled weight decay and global-norm clipping.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "blockdiff/model.hpp"

namespace blockdiff {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <typename Scalar>
struct AdamWState {
  Parameters<Scalar> m;
  Parameters<Scalar> v;
  long t = 0;
};

template <typename Scalar>
double global_norm(const Parameters<Scalar>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) s += g.template cast<double>().squaredNorm();
  return std::sqrt(s);
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before scaling.
template <typename Scalar>
double clip_global_norm(Parameters<Scalar>& grads, double max_norm) {
  const double n = global_norm(grads);
  if (max_norm > 0.0 && n > max_norm) {
    const Scalar f = static_cast<Scalar>(max_norm / n);
    for (auto& [name, g] : grads) g *= f;
  }
  return n;
}

using DecayPredicate = std::function<bool(const std::string&)>;

/// One step: clip, then moments, bias correction and decoupled decay
/// (applied to tensors for which `decay` returns true). Returns the gradient
/// norm before clipping.
template <typename Scalar>
double adamw_update(Parameters<Scalar>& params, AdamWState<Scalar>& state, Parameters<Scalar> grads, double lr,
                    const AdamWConfig& cfg, const DecayPredicate& decay = {}) {
  for (const auto& [name, g] : grads) {
    if (!g.allFinite()) throw std::domain_error("adamw_update: non-finite gradient for '" + name + "'");
  }
  const double norm = clip_global_norm(grads, cfg.clip_norm);
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("adamw_update: no gradient for '" + name + "'");
    const Matrix<Scalar>& g = git->second;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() == 0) {
      m = Matrix<Scalar>::Zero(p.rows(), p.cols());
      v = Matrix<Scalar>::Zero(p.rows(), p.cols());
    }
    m = b1 * m + (Scalar(1) - b1) * g;
    v = (b2 * v.array() + (Scalar(1) - b2) * g.array().square()).matrix();
    if (cfg.weight_decay != 0.0 && (!decay || decay(name))) {
      p *= static_cast<Scalar>(1.0 - lr * cfg.weight_decay);
    }
    const auto mhat = m.array() / static_cast<Scalar>(bc1);
    const auto vhat = v.array() / static_cast<Scalar>(bc2);
    p.array() -= static_cast<Scalar>(lr) * mhat / (vhat.sqrt() + static_cast<Scalar>(cfg.eps));
  }
  return norm;
}

}  // namespace blockdiff
