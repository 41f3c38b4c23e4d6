#include "flowgm/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "flowgm/errors.hpp"

namespace flowgm {

double sorted_quantile(const Vec& sorted, double p) {
  const auto n = sorted.size();
  const double h = p * static_cast<double>(n) - 0.5;
  if (h <= 0.0) return sorted[0];
  if (h >= static_cast<double>(n - 1)) return sorted[n - 1];
  const auto i = static_cast<Eigen::Index>(h);
  const double frac = h - static_cast<double>(i);
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

double sliced_wasserstein(const Mat& a, const Mat& b, int n_projections,
                          Rng& rng) {
  if (a.rows() == 0 || b.rows() == 0) {
    throw DomainError("sliced_wasserstein: empty sample set");
  }
  if (a.cols() != b.cols()) {
    throw DomainError("sliced_wasserstein: dimension mismatch, " +
                      std::to_string(a.cols()) + " vs " +
                      std::to_string(b.cols()));
  }
  if (n_projections <= 0) {
    throw DomainError("sliced_wasserstein: need at least one projection");
  }
  const int d = static_cast<int>(a.cols());
  const auto levels = std::min(a.rows(), b.rows());
  double acc = 0.0;
  for (int k = 0; k < n_projections; ++k) {
    Vec dir(d);
    double norm2 = 0.0;
    do {
      for (int j = 0; j < d; ++j) dir[j] = rng.normal();
      norm2 = dir.squaredNorm();
    } while (norm2 == 0.0);
    dir /= std::sqrt(norm2);

    Vec pa = a * dir;
    Vec pb = b * dir;
    std::sort(pa.data(), pa.data() + pa.size());
    std::sort(pb.data(), pb.data() + pb.size());

    double w2 = 0.0;
    for (Eigen::Index j = 0; j < levels; ++j) {
      const double p = (static_cast<double>(j) + 0.5) /
                       static_cast<double>(levels);
      const double diff = sorted_quantile(pa, p) - sorted_quantile(pb, p);
      w2 += diff * diff;
    }
    acc += std::sqrt(w2 / static_cast<double>(levels));
  }
  return acc / n_projections;
}

namespace {

double mean_pair_distance(const Mat& a, const Mat& b) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    acc += (b.rowwise() - a.row(i)).rowwise().norm().sum();
  }
  return acc / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

}  // namespace

double energy_distance(const Mat& a, const Mat& b) {
  if (a.rows() == 0 || b.rows() == 0) {
    throw DomainError("energy_distance: empty sample set");
  }
  if (a.cols() != b.cols()) {
    throw DomainError("energy_distance: dimension mismatch, " +
                      std::to_string(a.cols()) + " vs " +
                      std::to_string(b.cols()));
  }
  return 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) -
         mean_pair_distance(b, b);
}

double field_mse(const VelocityField& field, const GaussianMixture& q0,
                 int n, const TimeDistribution& tdist, Rng& rng) {
  if (n <= 0) throw DomainError("field_mse: n must be positive");
  const int d = q0.dim();
  const Mat x0 = gmm_sample(q0, n, rng);
  Mat xt(n, d);
  Vec ts(n);
  for (int i = 0; i < n; ++i) {
    ts[i] = sample_time(tdist, rng);
    for (int j = 0; j < d; ++j) {
      xt(i, j) = (1.0 - ts[i]) * x0(i, j) + ts[i] * rng.normal();
    }
  }

  const Mat pred = field.velocity_batch_times(xt, ts);

  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vec truth = marginal_field(q0, xt.row(i).transpose(), ts[i]);
    acc += (pred.row(i).transpose() - truth).squaredNorm();
  }
  return acc / n;
}

}  // namespace flowgm
