#include "flowgm/analytic.hpp"

#include <cmath>
#include <limits>
#include <span>

namespace flowgm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void check_time_closed(double t, const char* where) {
  if (!(t > 0.0) || t > 1.0) {
    throw DomainError(std::string(where) + ": t must be in (0, 1], got " +
                      std::to_string(t));
  }
}

}  // namespace

GaussianMixture::GaussianMixture(std::vector<double> weights,
                                 std::vector<Vec> means,
                                 std::vector<Vec> variances)
    : weights_(std::move(weights)),
      means_(std::move(means)),
      variances_(std::move(variances)) {
  if (weights_.empty() || weights_.size() != means_.size() ||
      weights_.size() != variances_.size()) {
    throw ConfigError("mixture: weights, means and variances must be "
                      "non-empty and equally sized");
  }
  const auto d = means_[0].size();
  if (d == 0) throw ConfigError("mixture: dimension must be positive");
  double sum = 0.0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (weights_[i] < 0.0) {
      throw ConfigError("mixture: weight " + std::to_string(i) +
                        " is negative");
    }
    sum += weights_[i];
    if (means_[i].size() != d || variances_[i].size() != d) {
      throw ConfigError("mixture: component " + std::to_string(i) +
                        " has inconsistent dimension");
    }
    if ((variances_[i].array() <= 0.0).any()) {
      throw ConfigError("mixture: component " + std::to_string(i) +
                        " has a non-positive variance");
    }
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw ConfigError("mixture: weights sum to " + std::to_string(sum) +
                      ", expected 1");
  }
}

Vec GaussianMixture::mean() const {
  Vec m = Vec::Zero(dim());
  for (int i = 0; i < components(); ++i) m += weights_[i] * means_[i];
  return m;
}

GaussianMixture marginal_path(const GaussianMixture& q0, double t) {
  if (t < 0.0 || t > 1.0) {
    throw DomainError("marginal_path: t must be in [0, 1], got " +
                      std::to_string(t));
  }
  const double s = 1.0 - t;
  std::vector<Vec> means(q0.components());
  std::vector<Vec> vars(q0.components());
  for (int i = 0; i < q0.components(); ++i) {
    means[i] = s * q0.means()[i];
    vars[i] = (s * s) * q0.variances()[i].array() + t * t;
  }
  return GaussianMixture(q0.weights(), std::move(means), std::move(vars));
}

double gmm_log_density(const GaussianMixture& q0, const Vec& x) {
  if (x.size() != q0.dim()) {
    throw DomainError("gmm_log_density: x has dimension " +
                      std::to_string(x.size()) + ", mixture has " +
                      std::to_string(q0.dim()));
  }
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> lps(q0.components());
  for (int i = 0; i < q0.components(); ++i) {
    if (q0.weights()[i] == 0.0) {
      lps[i] = -std::numeric_limits<double>::infinity();
      continue;
    }
    const Vec& mu = q0.means()[i];
    const Vec& var = q0.variances()[i];
    const double quad = ((x - mu).array().square() / var.array()).sum();
    const double logdet = var.array().log().sum();
    lps[i] = std::log(q0.weights()[i]) -
             0.5 * (quad + logdet + q0.dim() * kLog2Pi);
    best = std::max(best, lps[i]);
  }
  if (!std::isfinite(best)) return best;
  double acc = 0.0;
  for (double lp : lps) acc += std::exp(lp - best);
  return best + std::log(acc);
}

Mat gmm_sample(const GaussianMixture& q0, int n, Rng& rng) {
  Mat out(n, q0.dim());
  std::vector<double> cum(q0.components());
  double acc = 0.0;
  for (int i = 0; i < q0.components(); ++i) {
    acc += q0.weights()[i];
    cum[i] = acc;
  }
  cum.back() = 1.0;
  for (int r = 0; r < n; ++r) {
    const double u = rng.uniform();
    int comp = 0;
    while (u >= cum[comp]) ++comp;
    const Vec& mu = q0.means()[comp];
    const Vec& var = q0.variances()[comp];
    for (int j = 0; j < q0.dim(); ++j) {
      out(r, j) = mu[j] + std::sqrt(var[j]) * rng.normal();
    }
  }
  return out;
}

Mat marginal_field_batch(const GaussianMixture& q0, const Mat& x, double t) {
  check_time_closed(t, "marginal_field");
  if (x.cols() != q0.dim()) {
    throw DomainError("marginal_field: x has dimension " +
                      std::to_string(x.cols()) + ", mixture has " +
                      std::to_string(q0.dim()));
  }
  const double s = 1.0 - t;
  const int n = static_cast<int>(x.rows());
  const int c = q0.components();
  const int d = q0.dim();

  // Log-responsibilities per component under the time-t mixture, then the
  // responsibility-weighted posterior means m_i(x).
  Mat logp(n, c);
  std::vector<Vec> coeff(c);   // (1-t) sigma_i^2 / sbar_i elementwise
  std::vector<Vec> mu_bar(c);  // (1-t) mu_i
  for (int i = 0; i < c; ++i) {
    const Vec sbar = (s * s) * q0.variances()[i].array() + t * t;
    coeff[i] = s * q0.variances()[i].array() / sbar.array();
    mu_bar[i] = s * q0.means()[i];
    const double lognorm =
        (q0.weights()[i] > 0.0 ? std::log(q0.weights()[i])
                               : -std::numeric_limits<double>::infinity()) -
        0.5 * (sbar.array().log().sum() + d * kLog2Pi);
    const Mat delta = x.rowwise() - mu_bar[i].transpose();
    logp.col(i) =
        ((delta.array().square().matrix() * sbar.cwiseInverse()).array() *
             -0.5 +
         lognorm)
            .matrix();
  }
  const Vec rowmax = logp.rowwise().maxCoeff();
  Mat resp = ((logp.colwise() - rowmax).array().exp()).matrix();
  const Vec rowsum = resp.rowwise().sum();
  resp.array().colwise() /= rowsum.array();

  Mat post = Mat::Zero(n, d);
  for (int i = 0; i < c; ++i) {
    const Mat delta = x.rowwise() - mu_bar[i].transpose();
    Mat mi = delta * coeff[i].asDiagonal();
    mi.rowwise() += q0.means()[i].transpose();
    post += resp.col(i).asDiagonal() * mi;
  }
  return (x - post) / t;
}

Vec marginal_field(const GaussianMixture& q0, const Vec& x, double t) {
  Mat xs(1, x.size());
  xs.row(0) = x.transpose();
  return marginal_field_batch(q0, xs, t).row(0).transpose();
}

Vec conditional_field(const Vec& x_t, const Vec& x_0, double t) {
  if (!(t > 0.0)) {
    throw DomainError("conditional_field: t must be positive, got " +
                      std::to_string(t));
  }
  if (x_t.size() != x_0.size()) {
    throw DomainError("conditional_field: x_t and x_0 dimensions differ");
  }
  return (x_t - x_0) / t;
}

LinearFieldCoeffs linear_field_coeffs(const LinearGenerator& gen, double t) {
  check_time_closed(t, "linear_generator_field");
  const double s = 1.0 - t;
  const int d = gen.dim();
  const Mat cov = gen.a * gen.a.transpose();
  Mat sbar = (s * s) * cov;
  sbar.diagonal().array() += t * t;
  // G = (1-t) cov sbar^{-1}; posterior mean m(x) = G x + (b - (1-t) G b).
  const Mat g = s * cov * sbar.ldlt().solve(Mat::Identity(d, d));
  const Vec h = gen.b - s * (g * gen.b);
  LinearFieldCoeffs out;
  out.c_mat = (Mat::Identity(d, d) - g) / t;
  out.c_vec = -h / t;
  return out;
}

Vec linear_generator_field(const LinearGenerator& gen, const Vec& x,
                           double t) {
  const LinearFieldCoeffs cf = linear_field_coeffs(gen, t);
  return cf.c_mat * x + cf.c_vec;
}

Mat LinearGenField::velocity_batch(const Mat& x, double t) const {
  const LinearFieldCoeffs cf = linear_field_coeffs(gen_, t);
  Mat out = x * cf.c_mat.transpose();
  out.rowwise() += cf.c_vec.transpose();
  return out;
}

namespace {

using tape::Graph;
using tape::NodeId;
using tape::Shape;

std::span<const double> as_span(const Vec& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

class GmmFieldBinding : public FieldBinding {
 public:
  GmmFieldBinding(const GaussianMixture& q0, Graph& g) : q0_(q0), g_(g) {}

  NodeId velocity(NodeId x, double t) override {
    check_time_closed(t, "marginal_field");
    const double s = 1.0 - t;
    const int c = q0_.components();
    const int d = q0_.dim();

    // Softmax responsibilities are shifted by an x-independent bound on the
    // log weights (their value at delta = 0), so the same graph stays stable
    // when leaf values are overwritten and recomputed.
    std::vector<double> lognorm(c);
    double shift = -std::numeric_limits<double>::infinity();
    std::vector<Vec> inv_sbar(c), coeff(c), mu_bar(c);
    for (int i = 0; i < c; ++i) {
      const Vec sbar = (s * s) * q0_.variances()[i].array() + t * t;
      inv_sbar[i] = sbar.cwiseInverse();
      coeff[i] = s * q0_.variances()[i].array() / sbar.array();
      mu_bar[i] = s * q0_.means()[i];
      lognorm[i] =
          (q0_.weights()[i] > 0.0
               ? std::log(q0_.weights()[i])
               : -745.0) -
          0.5 * (sbar.array().log().sum() + d * kLog2Pi);
      shift = std::max(shift, lognorm[i]);
    }

    std::vector<NodeId> expo(c), post(c);
    for (int i = 0; i < c; ++i) {
      const NodeId delta = g_.sub(x, g_.constant(as_span(mu_bar[i])));
      const NodeId quad =
          g_.sum(g_.mul(g_.square(delta), g_.constant(as_span(inv_sbar[i]))));
      const NodeId logit = g_.add(g_.scale(quad, -0.5),
                                  g_.constant_scalar(lognorm[i] - shift));
      expo[i] = g_.exp(logit);
      post[i] = g_.add(g_.mul(g_.constant(as_span(coeff[i])), delta),
                       g_.constant(as_span(q0_.means()[i])));
    }
    NodeId z = expo[0];
    for (int i = 1; i < c; ++i) z = g_.add(z, expo[i]);
    const NodeId inv_z = g_.recip(z);
    NodeId mean = g_.scale(post[0], g_.mul(expo[0], inv_z));
    for (int i = 1; i < c; ++i) {
      mean = g_.add(mean, g_.scale(post[i], g_.mul(expo[i], inv_z)));
    }
    return g_.scale(g_.sub(x, mean), 1.0 / t);
  }

 private:
  const GaussianMixture& q0_;
  Graph& g_;
};

class LinearGenFieldBinding : public FieldBinding {
 public:
  LinearGenFieldBinding(const LinearGenerator& gen, Graph& g)
      : gen_(gen), g_(g) {}

  NodeId velocity(NodeId x, double t) override {
    const LinearFieldCoeffs cf = linear_field_coeffs(gen_, t);
    // Row-major copy for the tape's matvec layout.
    std::vector<double> w(cf.c_mat.size());
    const int d = static_cast<int>(cf.c_mat.rows());
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) w[i * d + j] = cf.c_mat(i, j);
    }
    const NodeId wn = g_.constant(
        w, Shape{static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(d)});
    const NodeId bn = g_.constant(as_span(cf.c_vec));
    return g_.affine(wn, x, bn);
  }

 private:
  const LinearGenerator& gen_;
  Graph& g_;
};

}  // namespace

std::unique_ptr<FieldBinding> GmmField::bind(tape::Graph& g) const {
  return std::make_unique<GmmFieldBinding>(q0_, g);
}

std::unique_ptr<FieldBinding> LinearGenField::bind(tape::Graph& g) const {
  return std::make_unique<LinearGenFieldBinding>(gen_, g);
}

tape::NodeId conditional_field_node(tape::Graph& g, tape::NodeId x_t,
                                    tape::NodeId x_0, double t) {
  if (!(t > 0.0)) {
    throw DomainError("conditional_field: t must be positive, got " +
                      std::to_string(t));
  }
  return g.scale(g.sub(x_t, x_0), 1.0 / t);
}

}  // namespace flowgm
