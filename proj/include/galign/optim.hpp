#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "galign/error.hpp"

namespace galign {

// Flat view over one parameter block; the optimizer is agnostic to how the
// blocks are owned (matrices, vectors, embeddings).
template <typename S>
struct ParamRef {
  S* data;
  int64_t n;
};

// AdamW with decoupled weight decay. Moments are kept in the parameter's own
// scalar type; state order must match the param list on every step.
template <typename S>
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<Eigen::Matrix<S, Eigen::Dynamic, 1>> m, v;

  void init(const std::vector<ParamRef<S>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(p.n));
      v.emplace_back(Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(p.n));
    }
    t = 0;
  }

  void step(double lr, double weight_decay, const std::vector<ParamRef<S>>& params,
            const std::vector<ParamRef<S>>& grads) {
    check(params.size() == m.size() && grads.size() == params.size(), ErrorKind::Config,
          "optimizer state does not match parameter list");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t i = 0; i < params.size(); ++i) {
      check(params[i].n == m[i].size() && grads[i].n == params[i].n, ErrorKind::Config,
            "optimizer block size mismatch");
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> p(params[i].data, params[i].n);
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> g(grads[i].data, grads[i].n);
      m[i] = S(beta1) * m[i] + S(1 - beta1) * g;
      v[i] = S(beta2) * v[i] + S(1 - beta2) * g.cwiseProduct(g);
      if (weight_decay > 0) p -= S(lr * weight_decay) * p;
      p -= (S(lr / bc1) * m[i].array() /
            ((v[i].array() / S(bc2)).sqrt() + S(eps)))
               .matrix();
    }
  }
};

// Half-cosine decay from lr_max to lr_max * floor_frac over total steps.
inline double cosine_lr(double lr_max, double floor_frac, int64_t step, int64_t total) {
  if (total <= 1) return lr_max;
  double x = std::min(1.0, double(step) / double(total - 1));
  double lo = lr_max * floor_frac;
  return lo + 0.5 * (lr_max - lo) * (1.0 + std::cos(M_PI * x));
}

}  // namespace galign
