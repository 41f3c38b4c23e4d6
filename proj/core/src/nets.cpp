#include "flowgm/nets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>

#include "flowgm/errors.hpp"

namespace flowgm {

namespace {

using tape::Graph;
using tape::NodeId;
using tape::Shape;

using RowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>;

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Keep samples strictly inside the open interval.
double into_unit_interval(double t) {
  const double hi = std::nextafter(1.0, 0.0);
  const double lo = std::numeric_limits<double>::min();
  return std::min(std::max(t, lo), hi);
}

}  // namespace

std::vector<double> time_embed(double t, int pairs) {
  std::vector<double> e;
  e.reserve(2 * pairs + 1);
  e.push_back(t);
  double freq = std::numbers::pi;
  for (int j = 0; j < pairs; ++j) {
    e.push_back(std::sin(freq * t));
    e.push_back(std::cos(freq * t));
    freq *= 2.0;
  }
  return e;
}

VectorFieldNet::VectorFieldNet(const MlpSpec& spec) : spec_(spec) {
  if (spec.data_dim <= 0 || spec.embed_pairs < 0) {
    throw ConfigError("network: data_dim and embed_pairs must be valid");
  }
  int in = spec.input_dim();
  std::size_t off = 0;
  for (std::size_t l = 0; l <= spec.hidden.size(); ++l) {
    const int out = l < spec.hidden.size() ? spec.hidden[l] : spec.data_dim;
    if (out <= 0) throw ConfigError("network: hidden width must be positive");
    Layer layer;
    layer.in = in;
    layer.out = out;
    layer.w_off = off;
    off += static_cast<std::size_t>(in) * out;
    layer.b_off = off;
    off += out;
    layers_.push_back(layer);
    in = out;
  }
  params_.assign(off, 0.0);
}

VectorFieldNet VectorFieldNet::init(const MlpSpec& spec, std::uint64_t seed) {
  VectorFieldNet net(spec);
  Rng rng(seed, /*stream=*/0x6e657473);
  for (std::size_t l = 0; l + 1 < net.layers_.size(); ++l) {
    const Layer& lay = net.layers_[l];
    const double sd = 1.0 / std::sqrt(static_cast<double>(lay.in));
    for (int i = 0; i < lay.in * lay.out; ++i) {
      net.params_[lay.w_off + i] = sd * rng.normal();
    }
  }
  // Final layer stays zero: a fresh net is the zero field.
  return net;
}

Vec VectorFieldNet::eval(const Vec& x, double t) const {
  Mat xs(1, x.size());
  xs.row(0) = x.transpose();
  return eval_batch(xs, t).row(0).transpose();
}

Mat VectorFieldNet::eval_batch(const Mat& x, double t) const {
  return eval_batch(x, Vec::Constant(x.rows(), t));
}

Mat VectorFieldNet::eval_batch(const Mat& x, const Vec& ts) const {
  if (x.cols() != spec_.data_dim) {
    throw DomainError("network: input has dimension " +
                      std::to_string(x.cols()) + ", expected " +
                      std::to_string(spec_.data_dim));
  }
  if (ts.size() != x.rows()) {
    throw DomainError("network: one time per input row required");
  }
  const int n = static_cast<int>(x.rows());
  Mat h(n, spec_.input_dim());
  h.leftCols(spec_.data_dim) = x;
  for (int i = 0; i < n; ++i) {
    const auto e = time_embed(ts[i], spec_.embed_pairs);
    for (int j = 0; j < spec_.embed_dim(); ++j) {
      h(i, spec_.data_dim + j) = e[j];
    }
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& lay = layers_[l];
    RowMajorMap w(params_.data() + lay.w_off, lay.out, lay.in);
    Eigen::Map<const Vec> b(params_.data() + lay.b_off, lay.out);
    Mat next = h * w.transpose();
    next.rowwise() += b.transpose();
    if (l + 1 < layers_.size()) next = next.array().tanh();
    h = std::move(next);
  }
  return h;
}

VectorFieldNet::TapeParams VectorFieldNet::make_tape_params(
    Graph& g, bool frozen) const {
  TapeParams p;
  p.frozen = frozen;
  for (const Layer& lay : layers_) {
    const NodeId w = g.parameter(
        std::span<const double>(params_.data() + lay.w_off,
                                static_cast<std::size_t>(lay.in) * lay.out),
        Shape{static_cast<std::uint32_t>(lay.out),
              static_cast<std::uint32_t>(lay.in)});
    const NodeId b = g.parameter(
        std::span<const double>(params_.data() + lay.b_off, lay.out));
    p.raw.push_back(w);
    p.raw.push_back(b);
    p.used.push_back(frozen ? g.stop_gradient(w) : w);
    p.used.push_back(frozen ? g.stop_gradient(b) : b);
  }
  return p;
}

tape::NodeId VectorFieldNet::build(Graph& g, NodeId x, NodeId t,
                                   const TapeParams& p) const {
  if (!g.shape(t).is_scalar()) {
    throw DomainError("network: t node must be scalar");
  }
  NodeId e = t;
  double freq = std::numbers::pi;
  for (int j = 0; j < spec_.embed_pairs; ++j) {
    const NodeId a = g.scale(t, freq);
    e = g.concat(e, g.concat(g.sin(a), g.cos(a)));
    freq *= 2.0;
  }
  NodeId h = g.concat(x, e);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = g.affine(p.used[2 * l], h, p.used[2 * l + 1]);
    if (l + 1 < layers_.size()) h = g.tanh(h);
  }
  return h;
}

tape::NodeId VectorFieldNet::build(Graph& g, NodeId x, double t,
                                   const TapeParams& p) const {
  return build(g, x, g.constant_scalar(t), p);
}

std::vector<double> VectorFieldNet::flatten_grad(const tape::GradientMap& map,
                                                 const TapeParams& p) const {
  std::vector<double> flat(params_.size(), 0.0);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& lay = layers_[l];
    const auto& gw = map.at(p.raw[2 * l]);
    const auto& gb = map.at(p.raw[2 * l + 1]);
    std::copy(gw.begin(), gw.end(), flat.begin() + lay.w_off);
    std::copy(gb.begin(), gb.end(), flat.begin() + lay.b_off);
  }
  return flat;
}

void VectorFieldNet::upload_params(Graph& g, const TapeParams& p) const {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& lay = layers_[l];
    g.set_value(p.raw[2 * l],
                std::span<const double>(
                    params_.data() + lay.w_off,
                    static_cast<std::size_t>(lay.in) * lay.out));
    g.set_value(p.raw[2 * l + 1],
                std::span<const double>(params_.data() + lay.b_off, lay.out));
  }
}

namespace {

class NetFieldBinding : public FieldBinding {
 public:
  NetFieldBinding(const VectorFieldNet& net, Graph& g)
      : net_(net), g_(g), params_(net.make_tape_params(g, /*frozen=*/true)) {}

  NodeId velocity(NodeId x, double t) override {
    return net_.build(g_, x, t, params_);
  }

 private:
  const VectorFieldNet& net_;
  Graph& g_;
  VectorFieldNet::TapeParams params_;
};

}  // namespace

std::unique_ptr<FieldBinding> NetField::bind(tape::Graph& g) const {
  return std::make_unique<NetFieldBinding>(net_, g);
}

Vec OneStepGenerator::forward(const Vec& z) const {
  return c_skip * z - c_out * backbone.eval(c_in * z, c_noise);
}

Mat OneStepGenerator::forward_batch(const Mat& z) const {
  return c_skip * z - c_out * backbone.eval_batch(c_in * z, c_noise);
}

tape::NodeId OneStepGenerator::build(
    Graph& g, NodeId z, const VectorFieldNet::TapeParams& p) const {
  const NodeId v = backbone.build(g, g.scale(z, c_in), c_noise, p);
  return g.sub(g.scale(z, c_skip), g.scale(v, c_out));
}

OneStepGenerator init_generator(const VectorFieldNet& teacher, double t_star,
                                double c_in, double c_skip,
                                std::optional<double> c_out,
                                std::optional<double> c_noise) {
  OneStepGenerator gen;
  gen.backbone = teacher;
  gen.t_star = t_star;
  gen.c_in = c_in;
  gen.c_skip = c_skip;
  gen.c_out = c_out.value_or(t_star);
  gen.c_noise = c_noise.value_or(t_star);
  return gen;
}

TimeDistribution TimeDistribution::uniform(std::optional<double> lo,
                                           std::optional<double> hi) {
  TimeDistribution d;
  d.kind = Kind::kUniform;
  d.clamp_lo = lo;
  d.clamp_hi = hi;
  return d;
}

TimeDistribution TimeDistribution::logit_normal(double m, double s,
                                                std::optional<double> lo,
                                                std::optional<double> hi) {
  TimeDistribution d;
  d.kind = Kind::kLogitNormal;
  d.m = m;
  d.s = s;
  d.clamp_lo = lo;
  d.clamp_hi = hi;
  return d;
}

double TimeDistribution::median() const {
  double med = kind == Kind::kUniform ? 0.5 : stable_sigmoid(m);
  if (clamp_lo) med = std::max(med, *clamp_lo);
  if (clamp_hi) med = std::min(med, *clamp_hi);
  return med;
}

double sample_time(const TimeDistribution& dist, Rng& rng) {
  double t;
  if (dist.kind == TimeDistribution::Kind::kUniform) {
    do {
      t = rng.uniform();
    } while (t == 0.0);
  } else {
    t = stable_sigmoid(dist.m + dist.s * rng.normal());
  }
  t = into_unit_interval(t);
  if (dist.clamp_lo) t = std::max(t, *dist.clamp_lo);
  if (dist.clamp_hi) t = std::min(t, *dist.clamp_hi);
  return t;
}

}  // namespace flowgm
