#pragma once

// Closed-form reference objects for the linear interpolation path
// x_t = (1-t) x_0 + t x_1 with x_1 ~ N(0, I):
//
//  - diagonal Gaussian mixtures as data distributions, with the exact
//    time-t marginal mixture and the exact marginal velocity field
//    u_t(x) = (x - E[x_0 | x_t = x]) / t;
//  - linear generators x_0 = A z + b, z ~ N(0, I_k), whose induced marginal
//    velocity field is available in closed form;
//  - the conditional (pairwise) field (x_t - x_0) / t.
//
// These are the oracles that trained networks and Monte-Carlo identity
// checks are measured against.

#include <Eigen/Dense>
#include <vector>

#include "flowgm/errors.hpp"
#include "flowgm/field.hpp"
#include "flowgm/rng.hpp"
#include "flowgm/tape.hpp"

namespace flowgm {

// Mixture of Gaussians with diagonal covariances. Invariants are checked at
// construction: weights on the simplex (sum 1 within 1e-12, entries >= 0),
// strictly positive variances, consistent dimensions.
class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, std::vector<Vec> means,
                  std::vector<Vec> variances);

  int dim() const { return static_cast<int>(means_[0].size()); }
  int components() const { return static_cast<int>(weights_.size()); }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<Vec>& means() const { return means_; }
  const std::vector<Vec>& variances() const { return variances_; }

  Vec mean() const;  // mixture mean

 private:
  std::vector<double> weights_;
  std::vector<Vec> means_;
  std::vector<Vec> variances_;  // diagonal entries of each covariance
};

// The exact distribution of x_t when x_0 follows q0: component i becomes
// N((1-t) mu_i, (1-t)^2 Sigma_i + t^2 I). Requires t in [0, 1].
GaussianMixture marginal_path(const GaussianMixture& q0, double t);

// log q0(x) via log-sum-exp over components.
double gmm_log_density(const GaussianMixture& q0, const Vec& x);

// n iid draws from q0, one row per sample.
Mat gmm_sample(const GaussianMixture& q0, int n, Rng& rng);

// Marginal velocity u_t(x) = (x - E[x_0 | x_t = x]) / t. Requires
// t in (0, 1]; at t = 1 this reduces to x - E[x_0].
Vec marginal_field(const GaussianMixture& q0, const Vec& x, double t);
Mat marginal_field_batch(const GaussianMixture& q0, const Mat& x, double t);

// Conditional field (x_t - x_0) / t; the regression target whose posterior
// mean is the marginal field. t <= 0 is a domain error.
Vec conditional_field(const Vec& x_t, const Vec& x_0, double t);

// One-step linear generator x_0 = A z + b with z ~ N(0, I_k).
struct LinearGenerator {
  Mat a;  // d x k
  Vec b;  // d

  int dim() const { return static_cast<int>(b.size()); }
  int latent_dim() const { return static_cast<int>(a.cols()); }
  Vec forward(const Vec& z) const { return a * z + b; }
};

// Affine representation v(x) = c_mat * x + c_vec of the marginal field
// induced by a linear generator at a fixed time.
struct LinearFieldCoeffs {
  Mat c_mat;
  Vec c_vec;
};

LinearFieldCoeffs linear_field_coeffs(const LinearGenerator& gen, double t);

// The induced marginal field itself. Requires t in (0, 1].
Vec linear_generator_field(const LinearGenerator& gen, const Vec& x, double t);

// VelocityField adapters over the closed forms. Both bind into tape graphs
// with all of their own quantities as constants, so gradients flow only
// through the x argument.
class GmmField : public VelocityField {
 public:
  explicit GmmField(const GaussianMixture& q0) : q0_(q0) {}
  int dim() const override { return q0_.dim(); }
  Vec velocity(const Vec& x, double t) const override {
    return marginal_field(q0_, x, t);
  }
  Mat velocity_batch(const Mat& x, double t) const override {
    return marginal_field_batch(q0_, x, t);
  }
  std::unique_ptr<FieldBinding> bind(tape::Graph& g) const override;

 private:
  const GaussianMixture& q0_;
};

class LinearGenField : public VelocityField {
 public:
  explicit LinearGenField(const LinearGenerator& gen) : gen_(gen) {}
  int dim() const override { return gen_.dim(); }
  Vec velocity(const Vec& x, double t) const override {
    return linear_generator_field(gen_, x, t);
  }
  Mat velocity_batch(const Mat& x, double t) const override;
  std::unique_ptr<FieldBinding> bind(tape::Graph& g) const override;

 private:
  const LinearGenerator& gen_;
};

// In-graph conditional field (x_t - x_0) / t on existing nodes.
tape::NodeId conditional_field_node(tape::Graph& g, tape::NodeId x_t,
                                    tape::NodeId x_0, double t);

}  // namespace flowgm
