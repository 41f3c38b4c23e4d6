#pragma once

// Sample-quality metrics. Rows of every matrix are samples.

#include <Eigen/Dense>
#include <cstdint>
#include <string>

#include "flowgm/analytic.hpp"
#include "flowgm/field.hpp"
#include "flowgm/nets.hpp"
#include "flowgm/rng.hpp"

namespace flowgm {

struct MetricReport {
  std::string name;
  double value = 0.0;
  long n_a = 0;
  long n_b = 0;
  int projections = 0;
  std::uint64_t seed = 0;
};

// Average over random unit directions of the 1-D 2-Wasserstein distance
// between the projected samples, computed on the common grid of
// min(|a|, |b|) equally spaced quantile levels with linear interpolation.
double sliced_wasserstein(const Mat& a, const Mat& b, int n_projections,
                          Rng& rng);

// Energy distance V-statistic: 2 E|A-B| - E|A-A'| - E|B-B'| over the
// empirical distributions, so identical sample sets give exactly zero.
double energy_distance(const Mat& a, const Mat& b);

// Mean squared error between a field and the exact marginal field of the
// mixture, over t ~ dist and x_t ~ q_t.
double field_mse(const VelocityField& field, const GaussianMixture& q0,
                 int n, const TimeDistribution& tdist, Rng& rng);

// Interpolated empirical quantile at level p of a sorted vector, using the
// midpoint convention: sorted[j] sits at level (j + 0.5) / n.
double sorted_quantile(const Vec& sorted, double p);

}  // namespace flowgm
