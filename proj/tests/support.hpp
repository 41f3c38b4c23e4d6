#pragma once

// Shared helpers for the test binaries. The finite-difference gradient
// checker is the reference oracle: it evaluates the graph twice per probed
// entry with set_value + recompute, so it exercises exactly the same forward
// code the backward pass differentiates.

#include <cmath>
#include <span>
#include <vector>

#include "flowgm/tape.hpp"

namespace testsupport {

inline double rel_err(double got, double want) {
  const double denom = std::max({std::abs(got), std::abs(want), 1e-12});
  return std::abs(got - want) / denom;
}

// Central finite differences of a scalar loss w.r.t. one leaf node.
inline std::vector<double> fd_gradient(flowgm::tape::Graph& g,
                                       flowgm::tape::NodeId loss,
                                       flowgm::tape::NodeId leaf,
                                       double h = 1e-5) {
  const auto base_span = g.value(leaf);
  std::vector<double> base(base_span.begin(), base_span.end());
  std::vector<double> grad(base.size(), 0.0);
  std::vector<double> probe = base;
  for (std::size_t j = 0; j < base.size(); ++j) {
    probe[j] = base[j] + h;
    g.set_value(leaf, probe);
    g.recompute();
    const double up = g.scalar_value(loss);
    probe[j] = base[j] - h;
    g.set_value(leaf, probe);
    g.recompute();
    const double dn = g.scalar_value(loss);
    probe[j] = base[j];
    grad[j] = (up - dn) / (2.0 * h);
  }
  g.set_value(leaf, base);
  g.recompute();
  return grad;
}

// Largest relative error between an autodiff gradient and its FD oracle.
inline double max_grad_rel_err(flowgm::tape::Graph& g,
                               flowgm::tape::NodeId loss,
                               flowgm::tape::NodeId param,
                               double h = 1e-5) {
  const auto ad = g.backward(loss).at(param);
  const auto fd = fd_gradient(g, loss, param, h);
  double worst = 0.0;
  for (std::size_t j = 0; j < ad.size(); ++j) {
    worst = std::max(worst, rel_err(ad[j], fd[j]));
  }
  return worst;
}

// Mean and standard error of a sample vector.
struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(std::span<const double> xs) {
  const double n = static_cast<double>(xs.size());
  double m = 0.0;
  for (double x : xs) m += x;
  m /= n;
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  v /= (n - 1.0);
  return {m, std::sqrt(v / n)};
}

}  // namespace testsupport
