#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "flowgm/errors.hpp"
#include "flowgm/flowtrain.hpp"
#include "flowgm/metrics.hpp"
#include "support.hpp"

using namespace flowgm;

namespace {

GaussianMixture tight_gauss() {
  return GaussianMixture({1.0}, {Vec{{0.0, 0.0}}}, {Vec{{0.01, 0.01}}});
}

GaussianMixture ring8() {
  std::vector<double> w(8, 1.0 / 8.0);
  std::vector<Vec> mu, var;
  for (int i = 0; i < 8; ++i) {
    const double a = 2.0 * 3.14159265358979323846 * i / 8.0;
    mu.push_back(Vec{{4.0 * std::cos(a), 4.0 * std::sin(a)}});
    var.push_back(Vec{{0.09, 0.09}});
  }
  return GaussianMixture(w, mu, var);
}

}  // namespace

TEST_CASE("adam applies the bias-corrected update") {
  AdamConfig cfg{0.1, 0.0, 0.999, 1e-8};
  Adam opt(cfg, 2);
  std::vector<double> params{1.0, -2.0};
  const std::vector<double> grad{0.5, -3.0};
  opt.step(params, grad);
  // With beta1 = 0 the first step is lr * g / (|g| + eps).
  CHECK(params[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)));
  CHECK(params[1] == doctest::Approx(-2.0 + 0.1 * 3.0 / (3.0 + 1e-8)));
}

TEST_CASE("adam leaves parameters alone on a zero gradient") {
  Adam opt(AdamConfig{}, 3);
  std::vector<double> params{0.3, -0.7, 2.0};
  const auto before = params;
  const std::vector<double> grad{0.0, 0.0, 0.0};
  opt.step(params, grad);
  opt.step(params, grad);
  CHECK(params == before);
}

TEST_CASE("reflow loss of the zero field is the pair second moment") {
  const auto q0 = tight_gauss();
  const auto net = VectorFieldNet::init(MlpSpec{2, {16}, 4}, 1);
  Rng rng(2);
  const Mat x0 = gmm_sample(q0, 4096, rng);

  tape::Graph g;
  const auto p = net.make_tape_params(g, false);
  const auto loss =
      reflow_loss(g, net, p, x0, rng, TimeDistribution::uniform());
  // E||x1 - x0||^2 = d + E||x0||^2 = 2 + 0.02 for this mixture.
  CHECK(g.scalar_value(loss) == doctest::Approx(2.02).epsilon(0.08));
}

TEST_CASE("reflow loss gradient matches finite differences") {
  const auto q0 = tight_gauss();
  auto net = VectorFieldNet::init(MlpSpec{2, {6}, 2}, 3);
  Rng rng(4);
  for (auto& p : net.params()) p += 0.1 * rng.normal();
  const Mat x0 = gmm_sample(q0, 16, rng);

  tape::Graph g;
  const auto p = net.make_tape_params(g, false);
  const auto loss =
      reflow_loss(g, net, p, x0, rng, TimeDistribution::uniform(0.05, 0.95));
  for (const auto pid : p.raw) {
    CHECK(testsupport::max_grad_rel_err(g, loss, pid, 1e-5) < 1e-4);
  }
}

TEST_CASE("marginal field is the least-squares optimum of the pair target") {
  // At v = u the residual is the conditional variance, which equals
  // E||x1 - x0||^2 - E||u(x_t)||^2 by orthogonality of the regression
  // residual. Both sides estimated on common draws.
  const auto q0 = ring8();
  Rng rng(5);
  const int n = 40000;
  const Mat x0 = gmm_sample(q0, n, rng);
  double resid = 0.0, pair2 = 0.0, field2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double t = 0.05 + 0.9 * rng.uniform();
    Vec x1(2), xt(2);
    for (int j = 0; j < 2; ++j) {
      x1[j] = rng.normal();
      xt[j] = (1 - t) * x0(i, j) + t * x1[j];
    }
    const Vec u = marginal_field(q0, xt, t);
    const Vec target = x1 - x0.row(i).transpose();
    resid += (target - u).squaredNorm();
    pair2 += target.squaredNorm();
    field2 += u.squaredNorm();
  }
  resid /= n;
  pair2 /= n;
  field2 /= n;
  CHECK(resid == doctest::Approx(pair2 - field2).epsilon(0.02));
}

TEST_CASE("one euler step from the terminal time is z minus v(z, 1)") {
  const auto q0 = tight_gauss();
  GmmField field(q0);
  Rng rng(6);
  const Mat got = euler_sample(field, 3, 1, rng);

  Rng replay(6);
  Mat z(3, 2);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) z(i, j) = replay.normal();
  }
  const Mat want = z - field.velocity_batch(z, 1.0);
  CHECK((got - want).norm() < 1e-14);
}

TEST_CASE("euler sampling of a gaussian recovers mean and spread") {
  const Vec mu{{1.5, -0.5}};
  const double sigma = 0.6;
  GaussianMixture q0({1.0}, {mu}, {Vec{{sigma * sigma, sigma * sigma}}});
  GmmField field(q0);
  Rng rng(7);
  const Mat xs = euler_sample(field, 10000, 500, rng);
  for (int j = 0; j < 2; ++j) {
    CHECK(std::abs(xs.col(j).mean() - mu[j]) < 0.02);
    const double sd = std::sqrt(
        (xs.col(j).array() - xs.col(j).mean()).square().mean());
    CHECK(std::abs(sd - sigma) < 0.02);
  }
}

TEST_CASE("trajectories record the uniform grid from one to zero") {
  const auto q0 = tight_gauss();
  GmmField field(q0);
  Rng rng(8);
  SampleTrajectory traj;
  const Mat xs = euler_sample(field, 5, 4, rng, &traj);
  REQUIRE(traj.times.size() == 5);
  REQUIRE(traj.states.size() == 5);
  CHECK(traj.times[0] == 1.0);
  CHECK(traj.times[1] == doctest::Approx(0.75));
  CHECK(traj.times[4] == 0.0);
  for (std::size_t k = 1; k < traj.times.size(); ++k) {
    CHECK(traj.times[k] < traj.times[k - 1]);
  }
  CHECK((traj.states.back() - xs).norm() == 0.0);

  Rng replay(8);
  Mat z(5, 2);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 2; ++j) z(i, j) = replay.normal();
  }
  CHECK((traj.states[0] - z).norm() == 0.0);
}

TEST_CASE("euler aborts with the offending step on non-finite states") {
  struct BlowUp : VelocityField {
    int dim() const override { return 2; }
    Vec velocity(const Vec&, double t) const override {
      Vec v = Vec::Zero(2);
      if (t < 0.6) v[0] = std::numeric_limits<double>::quiet_NaN();
      return v;
    }
    std::unique_ptr<FieldBinding> bind(tape::Graph&) const override {
      return nullptr;
    }
  } field;

  Rng rng(9);
  CHECK_THROWS_AS(euler_sample(field, 2, 10, rng), NumericalError);
  try {
    Rng rng2(9);
    euler_sample(field, 2, 10, rng2);
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step 6") != std::string::npos);
  }
  CHECK_THROWS_AS(euler_sample(field, 2, 0, rng), DomainError);
}

TEST_CASE("more euler steps improve the sliced distance on the ring") {
  const auto q0 = ring8();
  GmmField field(q0);
  Rng data_rng(10);
  const Mat data = gmm_sample(q0, 4000, data_rng);

  std::vector<double> w2;
  for (int steps : {8, 32, 128, 512}) {
    Rng rng(11);
    const Mat xs = euler_sample(field, 4000, steps, rng);
    Rng proj(12);
    w2.push_back(sliced_wasserstein(xs, data, 64, proj));
  }
  for (std::size_t k = 1; k < w2.size(); ++k) {
    CHECK(w2[k] < w2[k - 1] * 1.25);  // never degrades beyond noise
  }
  CHECK(w2.back() < w2.front());
  CHECK(w2.back() < 0.2);
}

TEST_CASE("pretrain with zero steps returns the fresh initialization") {
  PretrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 13;
  const MlpSpec spec{2, {16, 16}, 4};
  const auto got = pretrain(tight_gauss(), spec, cfg);
  const auto fresh = VectorFieldNet::init(spec, 13);
  CHECK(got.net.params() == fresh.params());
  CHECK(got.ema.params() == fresh.params());
  CHECK(got.log.empty());
}

TEST_CASE("pretraining is deterministic in the seed") {
  PretrainConfig cfg;
  cfg.steps = 20;
  cfg.batch = 8;
  cfg.log_interval = 5;
  cfg.seed = 14;
  cfg.probe_samples = 64;
  const MlpSpec spec{2, {12}, 3};
  const auto a = pretrain(tight_gauss(), spec, cfg);
  const auto b = pretrain(tight_gauss(), spec, cfg);
  CHECK(a.net.params() == b.net.params());
  CHECK(a.ema.params() == b.ema.params());
  REQUIRE(a.log.size() == b.log.size());
  CHECK(a.log.size() == 4);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].field_err == b.log[i].field_err);
  }
}

TEST_CASE("ema decay zero tracks the raw parameters exactly") {
  PretrainConfig cfg;
  cfg.steps = 10;
  cfg.batch = 8;
  cfg.ema_decay = 0.0;
  cfg.seed = 15;
  cfg.log_interval = 10;
  cfg.probe_samples = 32;
  const auto r = pretrain(tight_gauss(), MlpSpec{2, {12}, 3}, cfg);
  CHECK(r.net.params() == r.ema.params());
}

TEST_CASE("a short run learns the near-linear field of a tight gaussian") {
  PretrainConfig cfg;
  cfg.steps = 3000;
  cfg.batch = 96;
  cfg.adam.lr = 3e-3;
  cfg.ema_decay = 0.995;
  cfg.seed = 16;
  cfg.log_interval = 500;
  cfg.probe_samples = 1500;
  const auto r = pretrain(tight_gauss(), MlpSpec{2, {32, 32}, 4}, cfg);
  REQUIRE(!r.log.empty());
  CHECK(r.log.back().field_err <= 0.01);
  CHECK(r.log.back().field_err < r.log.front().field_err);
}

TEST_CASE("pretraining aborts when the loss diverges") {
  PretrainConfig cfg;
  cfg.steps = 50;
  cfg.batch = 8;
  cfg.adam.lr = 1e300;
  cfg.seed = 17;
  CHECK_THROWS_AS(pretrain(tight_gauss(), MlpSpec{2, {8}, 2}, cfg),
                  NumericalError);
}
