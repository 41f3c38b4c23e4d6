#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "flowgm/analytic.hpp"
#include "flowgm/distill.hpp"
#include "flowgm/errors.hpp"
#include "flowgm/metrics.hpp"
#include "support.hpp"

using namespace flowgm;

namespace {

// u(x) = a x + a0 in one dimension, with everything constant in the graph
// except the x path.
struct AffineTeacher final : VelocityField {
  double a = 1.0, a0 = 0.0;
  AffineTeacher(double a_, double a0_) : a(a_), a0(a0_) {}
  int dim() const override { return 1; }
  Vec velocity(const Vec& x, double) const override {
    return Vec{{a * x[0] + a0}};
  }
  std::unique_ptr<FieldBinding> bind(tape::Graph& g) const override {
    struct B final : FieldBinding {
      tape::Graph& g;
      double a, a0;
      B(tape::Graph& g_, double a_, double a0_) : g(g_), a(a_), a0(a0_) {}
      tape::NodeId velocity(tape::NodeId x, double) override {
        return g.add(g.scale(x, a), g.constant(std::vector<double>{a0}));
      }
    };
    return std::make_unique<B>(g, a, a0);
  }
};

// Binds a net with direct access to the parameter nodes, so tests can both
// freeze them and inspect their gradient entries.
struct BoundNet final : FieldBinding {
  tape::Graph& g;
  const VectorFieldNet& net;
  VectorFieldNet::TapeParams p;
  BoundNet(tape::Graph& g_, const VectorFieldNet& n, bool frozen)
      : g(g_), net(n), p(n.make_tape_params(g_, frozen)) {}
  tape::NodeId velocity(tape::NodeId x, double t) override {
    return net.build(g, x, t, p);
  }
};

// One-parameter-per-slot linear nets: MlpSpec{1, {}, 0} is a single affine
// layer over [x, t], so v(x, t) = p0 x + p1 t + p2 exactly.
VectorFieldNet linear_net(double px, double pt, double b) {
  VectorFieldNet net(MlpSpec{1, {}, 0});
  net.params() = {px, pt, b};
  return net;
}

struct Scenario {
  OneStepGenerator gen;
  VectorFieldNet online;
  AffineTeacher teacher{1.3, -0.2};
  double theta = 0.8, shift = -0.25, c = 0.6;

  Scenario() {
    // g(z) = z - B(z, 0.3) with B(x, t) = 0.2 x + 0.5 t + 0.1, so
    // g(z) = 0.8 z - 0.25.
    gen.backbone = linear_net(0.2, 0.5, 0.1);
    gen.t_star = 0.97;
    gen.c_in = 1.0;
    gen.c_skip = 1.0;
    gen.c_out = 1.0;
    gen.c_noise = 0.3;
    online = linear_net(0.6, 0.0, 0.0);
  }

  double x0(double z) const { return theta * z + shift; }
  double xt(double z, double e, double t) const {
    return (1 - t) * x0(z) + t * e;
  }
  double u(double x) const { return teacher.a * x + teacher.a0; }
  double v(double x) const { return c * x; }
  double ucond(double z, double e) const { return e - x0(z); }
};

void draw_batch(int n, Mat& z, Mat& eps, std::vector<double>& ts, Rng& rng) {
  z.resize(n, 1);
  eps.resize(n, 1);
  ts.resize(n);
  for (int i = 0; i < n; ++i) {
    z(i, 0) = rng.normal();
    eps(i, 0) = rng.normal();
    ts[i] = 0.05 + 0.9 * rng.uniform();
  }
}

GaussianMixture shifted_gauss() {
  return GaussianMixture({1.0}, {Vec{{1.0, -1.0}}}, {Vec{{0.25, 0.25}}});
}

}  // namespace

TEST_CASE("generator loss terms match their defining expectations row by row") {
  Scenario s;
  Rng rng(21);
  Mat z, eps;
  std::vector<double> ts;
  draw_batch(32, z, eps, ts, rng);

  tape::Graph g;
  const auto gen_p = s.gen.backbone.make_tape_params(g, false);
  BoundNet online(g, s.online, /*frozen=*/true);
  const auto teacher_b = s.teacher.bind(g);
  const auto terms = fgm_terms(g, s.gen, gen_p, online, *teacher_b, z, eps, ts);

  double l1 = 0, l2 = 0;
  for (int i = 0; i < 32; ++i) {
    const double x = s.xt(z(i, 0), eps(i, 0), ts[i]);
    const double diff = s.u(x) - s.v(x);
    l1 += diff * diff;
    l2 += 2.0 * diff * (s.v(x) - s.ucond(z(i, 0), eps(i, 0)));
  }
  l1 /= 32;
  l2 /= 32;
  CHECK(testsupport::rel_err(g.scalar_value(terms.l1), l1) < 1e-12);
  CHECK(testsupport::rel_err(g.scalar_value(terms.l2), l2) < 1e-12);

  const auto loss = fgm_loss(g, terms, FgmWeights{0.7, 1.9});
  CHECK(testsupport::rel_err(g.scalar_value(loss), 0.7 * l1 + 1.9 * l2) <
        1e-12);
}

TEST_CASE("generator gradients match the hand derivative through live paths") {
  Scenario s;
  Rng rng(22);
  Mat z, eps;
  std::vector<double> ts;
  const int n = 64;
  draw_batch(n, z, eps, ts, rng);

  tape::Graph g;
  const auto gen_p = s.gen.backbone.make_tape_params(g, false);
  BoundNet online(g, s.online, true);
  const auto teacher_b = s.teacher.bind(g);
  const auto terms = fgm_terms(g, s.gen, gen_p, online, *teacher_b, z, eps, ts);

  const auto g1 = s.gen.backbone.flatten_grad(g.backward(terms.l1), gen_p);
  const auto g2 = s.gen.backbone.flatten_grad(g.backward(terms.l2), gen_p);

  // Backbone parameter p moves x0 by s_i per row: dx0/dw_x = -z,
  // dx0/dw_t = -c_noise, dx0/db = -1 (with c_out = c_in = 1). Then
  //   dl1/dp = 2 (u - v)(a - c)(1 - t) s_i
  //   dl2/dp = 2 (a - c)(1 - t) s_i (v - ucond) + 2 (u - v) s_i (c (1 - t) + 1)
  // because du/dp, dv/dp follow x_t while ducond/dp = -s_i.
  const double a = s.teacher.a, c = s.c;
  for (int param = 0; param < 3; ++param) {
    double want1 = 0, want2 = 0;
    for (int i = 0; i < n; ++i) {
      const double si = param == 0   ? -z(i, 0)
                        : param == 1 ? -s.gen.c_noise
                                     : -1.0;
      const double t = ts[i];
      const double x = s.xt(z(i, 0), eps(i, 0), t);
      const double diff = s.u(x) - s.v(x);
      const double resid = s.v(x) - s.ucond(z(i, 0), eps(i, 0));
      want1 += 2 * diff * (a - c) * (1 - t) * si;
      want2 += 2 * (a - c) * (1 - t) * si * resid +
               2 * diff * si * (c * (1 - t) + 1);
    }
    want1 /= n;
    want2 /= n;
    CHECK(testsupport::rel_err(g1[param], want1) < 1e-10);
    CHECK(testsupport::rel_err(g2[param], want2) < 1e-10);
  }
}

TEST_CASE("the mean correction gradient matches its closed form in expectation") {
  // With g(z) = theta z, u = a x + a0, v = c x and a fixed time, the
  // expected derivative of the correction term over z, eps ~ N(0,1) is
  //   4 (a - c)(1 - t) theta (c (1 - t) + 1),
  // independent of a0. Estimated with the exact per-sample derivative.
  const double theta = 0.8, a = 1.3, a0 = -0.2, c = 0.6, t = 0.3;
  Rng rng(23);
  const int n = 400000;
  testsupport::MeanSe acc;
  std::vector<double> samples;
  samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal(), e = rng.normal();
    const double x0 = theta * z;
    const double x = (1 - t) * x0 + t * e;
    const double diff = (a - c) * x + a0;
    const double resid = c * x - (e - x0);
    // d/dtheta with dx/dtheta = (1 - t) z and ducond/dtheta = -z.
    samples.push_back(2 * (a - c) * (1 - t) * z * resid +
                      2 * diff * z * (c * (1 - t) + 1));
  }
  const auto [mean, se] = testsupport::mean_se(samples);
  const double want = 4 * (a - c) * (1 - t) * theta * (c * (1 - t) + 1);
  CHECK(std::abs(mean - want) < 3 * se);
  CHECK(se < 0.02);
}

TEST_CASE("loss weights act linearly on the generator gradient") {
  const auto q0 = shifted_gauss();
  GmmField teacher(q0);
  auto backbone = VectorFieldNet::init(MlpSpec{2, {8}, 2}, 24);
  auto online_net = VectorFieldNet::init(MlpSpec{2, {8}, 2}, 25);
  Rng rng(26);
  for (auto& p : backbone.params()) p += 0.05 * rng.normal();
  for (auto& p : online_net.params()) p += 0.05 * rng.normal();
  const auto gen = init_generator(backbone, 0.97);

  Mat z(16, 2), eps(16, 2);
  std::vector<double> ts(16);
  for (int i = 0; i < 16; ++i) {
    ts[i] = 0.05 + 0.9 * rng.uniform();
    for (int j = 0; j < 2; ++j) {
      z(i, j) = rng.normal();
      eps(i, j) = rng.normal();
    }
  }

  tape::Graph g;
  const auto gen_p = gen.backbone.make_tape_params(g, false);
  BoundNet online(g, online_net, true);
  const auto teacher_b = teacher.bind(g);
  const auto terms = fgm_terms(g, gen, gen_p, online, *teacher_b, z, eps, ts);
  const FgmWeights w{0.35, 1.45};
  const auto loss = fgm_loss(g, terms, w);

  const auto g1 = gen.backbone.flatten_grad(g.backward(terms.l1), gen_p);
  const auto g2 = gen.backbone.flatten_grad(g.backward(terms.l2), gen_p);
  const auto gw = gen.backbone.flatten_grad(g.backward(loss), gen_p);
  for (std::size_t i = 0; i < gw.size(); ++i) {
    const double want = w.l1 * g1[i] + w.l2 * g2[i];
    CHECK(std::abs(gw[i] - want) <=
          1e-12 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("frozen online parameters receive exactly zero gradient") {
  const auto q0 = shifted_gauss();
  GmmField teacher(q0);
  auto backbone = VectorFieldNet::init(MlpSpec{2, {8}, 2}, 27);
  auto online_net = VectorFieldNet::init(MlpSpec{2, {8}, 2}, 28);
  Rng rng(29);
  for (auto& p : online_net.params()) p += 0.1 * rng.normal();
  for (auto& p : backbone.params()) p += 0.1 * rng.normal();
  const auto gen = init_generator(backbone, 0.97);

  Mat z(8, 2), eps(8, 2);
  std::vector<double> ts(8);
  for (int i = 0; i < 8; ++i) {
    ts[i] = 0.1 + 0.8 * rng.uniform();
    for (int j = 0; j < 2; ++j) {
      z(i, j) = rng.normal();
      eps(i, j) = rng.normal();
    }
  }

  tape::Graph g;
  const auto gen_p = gen.backbone.make_tape_params(g, false);
  BoundNet online(g, online_net, /*frozen=*/true);
  const auto teacher_b = teacher.bind(g);
  const auto terms = fgm_terms(g, gen, gen_p, online, *teacher_b, z, eps, ts);
  const auto map = g.backward(fgm_loss(g, terms, FgmWeights{1.0, 1.0}));

  for (const auto id : online.p.raw) {
    for (const double v : map.at(id)) CHECK(v == 0.0);
  }
  double gen_norm = 0.0;
  for (const auto id : gen_p.raw) {
    for (const double v : map.at(id)) gen_norm += v * v;
  }
  CHECK(gen_norm > 0.0);
}

TEST_CASE("online loss overloads agree and sever the generator exactly") {
  auto backbone = VectorFieldNet::init(MlpSpec{2, {8}, 2}, 50);
  auto online_net = VectorFieldNet::init(MlpSpec{2, {8}, 2}, 51);
  Rng rng(52);
  for (auto& p : backbone.params()) p += 0.1 * rng.normal();
  for (auto& p : online_net.params()) p += 0.1 * rng.normal();
  const auto gen = init_generator(backbone, 0.97);

  Mat z(12, 2), eps(12, 2);
  std::vector<double> ts(12);
  for (int i = 0; i < 12; ++i) {
    ts[i] = 0.05 + 0.9 * rng.uniform();
    for (int j = 0; j < 2; ++j) {
      z(i, j) = rng.normal();
      eps(i, j) = rng.normal();
    }
  }

  tape::Graph ga;
  const auto pa = online_net.make_tape_params(ga, false);
  const auto la = online_flow_loss(ga, online_net, pa, gen, z, eps, ts);

  tape::Graph gb;
  const auto gen_p = gen.backbone.make_tape_params(gb, false);
  const auto pb = online_net.make_tape_params(gb, false);
  const auto lb = online_flow_loss(gb, online_net, pb, gen, gen_p, z, eps, ts);

  CHECK(testsupport::rel_err(ga.scalar_value(la), gb.scalar_value(lb)) <
        1e-14);

  // Generator parameters sit in the graph but behind the severed sample, so
  // their gradient entries are exactly zero while the online net trains.
  const auto map = gb.backward(lb);
  for (const auto id : gen_p.raw) {
    for (const double v : map.at(id)) CHECK(v == 0.0);
  }
  double online_norm = 0.0;
  for (const auto id : pb.raw) {
    for (const double v : map.at(id)) online_norm += v * v;
  }
  CHECK(online_norm > 0.0);
}

TEST_CASE("a trained auxiliary field recovers the field of linear pairs") {
  // Pairs drawn from x0 = A z + b have a closed-form induced field; the
  // regression minimizer over unrestricted functions is exactly that field,
  // so a small trained net should approach it on probe points.
  LinearGenerator lin;
  lin.a = Mat{{0.9, 0.3}, {-0.2, 0.7}};
  lin.b = Vec{{0.4, -0.6}};

  auto net = VectorFieldNet::init(MlpSpec{2, {32, 32}, 4}, 53);
  Adam opt(AdamConfig{3e-3, 0.0, 0.999, 1e-8}, net.param_count());
  Rng rng(54);
  const int batch = 128;
  Mat z(batch, 2), x1(batch, 2);
  std::vector<double> ts(batch);
  for (int step = 0; step < 1500; ++step) {
    for (int i = 0; i < batch; ++i) {
      ts[i] = 0.02 + 0.96 * rng.uniform();
      for (int j = 0; j < 2; ++j) {
        z(i, j) = rng.normal();
        x1(i, j) = rng.normal();
      }
    }
    const Mat x0 = (z * lin.a.transpose()).rowwise() + lin.b.transpose();
    tape::Graph g;
    const auto p = net.make_tape_params(g, false);
    const auto loss = reflow_loss(g, net, p, x0, x1, ts);
    const auto grad = net.flatten_grad(g.backward(loss), p);
    opt.step(net.params(), grad);
  }

  double mse = 0.0;
  int count = 0;
  for (const double t : {0.25, 0.5, 0.75}) {
    for (int i = 0; i < 400; ++i) {
      Vec zv(2), ev(2);
      for (int j = 0; j < 2; ++j) {
        zv[j] = rng.normal();
        ev[j] = rng.normal();
      }
      const Vec x0 = lin.a * zv + lin.b;
      const Vec xt = (1 - t) * x0 + t * ev;
      mse += (net.eval(xt, t) - linear_generator_field(lin, xt, t))
                 .squaredNorm();
      ++count;
    }
  }
  CHECK(mse / count <= 0.05);
}

TEST_CASE("a fresh backbone makes the generator the identity map") {
  const auto backbone = VectorFieldNet::init(MlpSpec{2, {16, 16}, 4}, 30);
  const auto gen = init_generator(backbone, 0.97);
  Rng rng(31);
  Mat z(5, 2);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 2; ++j) z(i, j) = rng.normal();
  CHECK((gen.forward_batch(z) - z).norm() == 0.0);
  CHECK(gen.c_out == 0.97);
  CHECK(gen.c_noise == 0.97);
}

TEST_CASE("distillation is deterministic in the seed") {
  const auto q0 = shifted_gauss();
  GmmField teacher(q0);
  DistillConfig cfg;
  cfg.steps = 6;
  cfg.batch = 8;
  cfg.log_interval = 2;
  cfg.seed = 32;
  const MlpSpec spec{2, {8}, 2};
  const auto run = [&] {
    return distill(teacher, VectorFieldNet::init(spec, cfg.seed),
                   VectorFieldNet::init(spec, cfg.seed + 1), cfg);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.gen.backbone.params() == b.gen.backbone.params());
  CHECK(a.gen_ema.backbone.params() == b.gen_ema.backbone.params());
  CHECK(a.online.params() == b.online.params());
  REQUIRE(a.log.size() == b.log.size());
  CHECK(a.log.size() == 3);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].gen_loss == b.log[i].gen_loss);
    CHECK(a.log[i].online_loss == b.log[i].online_loss);
  }
}

TEST_CASE("zero online updates leave the auxiliary field untouched") {
  const auto q0 = shifted_gauss();
  GmmField teacher(q0);
  DistillConfig cfg;
  cfg.steps = 4;
  cfg.batch = 8;
  cfg.online_updates = 0;
  cfg.seed = 33;
  const MlpSpec spec{2, {8}, 2};
  const auto online0 = VectorFieldNet::init(spec, 34);
  const auto r = distill(teacher, VectorFieldNet::init(spec, 33), online0, cfg);
  CHECK(r.online.params() == online0.params());
  CHECK(r.log.back().online_loss == 0.0);
}

TEST_CASE("distilling a gaussian teacher sharpens one-step samples") {
  const auto q0 = shifted_gauss();
  GmmField teacher(q0);
  DistillConfig cfg;
  cfg.steps = 800;
  cfg.batch = 64;
  cfg.gen_adam.lr = 3e-3;
  cfg.online_adam.lr = 3e-3;
  cfg.weights = {0.0, 1.0};  // pure correction-term training
  cfg.fgm_tdist = TimeDistribution::uniform(0.02, 0.98);
  cfg.online_tdist = TimeDistribution::uniform(0.02, 0.98);
  cfg.seed = 35;
  cfg.log_interval = 200;
  const MlpSpec spec{2, {16, 16}, 2};
  const auto r = distill(teacher, VectorFieldNet::init(spec, 35),
                         VectorFieldNet::init(spec, 36), cfg);

  Rng rng(37);
  Mat z(3000, 2);
  for (int i = 0; i < 3000; ++i)
    for (int j = 0; j < 2; ++j) z(i, j) = rng.normal();
  const Mat data = gmm_sample(q0, 3000, rng);
  const double before = energy_distance(z, data);  // identity-map samples
  const double after = energy_distance(r.gen.forward_batch(z), data);
  CHECK(after < before / 4);
  CHECK(after < 0.05);
}

TEST_CASE("distillation aborts when a loss diverges") {
  const auto q0 = shifted_gauss();
  GmmField teacher(q0);
  DistillConfig cfg;
  cfg.steps = 10;
  cfg.batch = 8;
  cfg.gen_adam.lr = 1e300;
  cfg.seed = 38;
  const MlpSpec spec{2, {8}, 2};
  CHECK_THROWS_AS(distill(teacher, VectorFieldNet::init(spec, 38),
                          VectorFieldNet::init(spec, 39), cfg),
                  NumericalError);
}

TEST_CASE("distillation validates dimensions") {
  const auto q0 = shifted_gauss();
  GmmField teacher(q0);
  DistillConfig cfg;
  CHECK_THROWS_AS(distill(teacher, VectorFieldNet::init(MlpSpec{3, {8}, 2}, 1),
                          VectorFieldNet::init(MlpSpec{3, {8}, 2}, 2), cfg),
                  ConfigError);
}
