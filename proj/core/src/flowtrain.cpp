#include "flowgm/flowtrain.hpp"

#include <cmath>

#include "flowgm/errors.hpp"
#include "flowgm/metrics.hpp"

namespace flowgm {

void Adam::step(std::span<double> params, std::span<const double> grad,
                double lr_scale) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw DomainError("Adam: parameter/gradient size mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  const double lr = cfg_.lr * lr_scale;
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
  }
}

tape::NodeId reflow_loss(tape::Graph& g, const VectorFieldNet& net,
                         const VectorFieldNet::TapeParams& p, const Mat& x0,
                         Rng& rng, const TimeDistribution& tdist) {
  const int n = static_cast<int>(x0.rows());
  const int d = static_cast<int>(x0.cols());
  Mat x1(n, d);
  std::vector<double> ts(n);
  for (int i = 0; i < n; ++i) {
    ts[i] = sample_time(tdist, rng);
    for (int j = 0; j < d; ++j) x1(i, j) = rng.normal();
  }
  return reflow_loss(g, net, p, x0, x1, ts);
}

tape::NodeId reflow_loss(tape::Graph& g, const VectorFieldNet& net,
                         const VectorFieldNet::TapeParams& p, const Mat& x0,
                         const Mat& x1, std::span<const double> ts) {
  const int n = static_cast<int>(x0.rows());
  const int d = static_cast<int>(x0.cols());
  if (n == 0) throw DomainError("reflow_loss: empty batch");
  if (x1.rows() != n || x1.cols() != d ||
      ts.size() != static_cast<std::size_t>(n)) {
    throw DomainError("reflow_loss: batch shape mismatch");
  }

  tape::NodeId acc = tape::kNoNode;
  std::vector<double> xt(d), target(d);
  for (int i = 0; i < n; ++i) {
    const double t = ts[i];
    for (int j = 0; j < d; ++j) {
      xt[j] = (1.0 - t) * x0(i, j) + t * x1(i, j);
      target[j] = x1(i, j) - x0(i, j);
    }
    const auto v = net.build(g, g.constant(xt), g.constant_scalar(t), p);
    const auto item = g.sum(g.square(g.sub(v, g.constant(target))));
    acc = (acc == tape::kNoNode) ? item : g.add(acc, item);
  }
  return g.scale(acc, 1.0 / n);
}

CondLossGraph build_cond_loss_graph(tape::Graph& g, const VectorFieldNet& net,
                                    const VectorFieldNet::TapeParams& p,
                                    int batch, int dim) {
  CondLossGraph slots;
  const std::vector<double> zero_x(dim, 0.0);
  tape::NodeId acc = tape::kNoNode;
  for (int i = 0; i < batch; ++i) {
    const auto xt = g.constant(zero_x);
    const auto t = g.constant_scalar(0.5);
    const auto target = g.constant(zero_x);
    const auto v = net.build(g, xt, t, p);
    const auto item = g.sum(g.square(g.sub(v, target)));
    acc = (acc == tape::kNoNode) ? item : g.add(acc, item);
    slots.xt.push_back(xt);
    slots.t.push_back(t);
    slots.target.push_back(target);
  }
  slots.loss = g.scale(acc, 1.0 / batch);
  return slots;
}

void load_cond_batch(tape::Graph& g, const CondLossGraph& slots, const Mat& x0,
                     const Mat& x1, std::span<const double> ts) {
  const int n = static_cast<int>(x0.rows());
  const int d = static_cast<int>(x0.cols());
  if (x1.rows() != n || x1.cols() != d ||
      ts.size() != static_cast<std::size_t>(n) ||
      slots.xt.size() != static_cast<std::size_t>(n)) {
    throw DomainError("load_cond_batch: batch shape mismatch");
  }
  std::vector<double> xt(d), target(d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      xt[j] = (1.0 - ts[i]) * x0(i, j) + ts[i] * x1(i, j);
      target[j] = x1(i, j) - x0(i, j);
    }
    g.set_value(slots.xt[i], xt);
    g.set_value(slots.t[i], ts[i]);
    g.set_value(slots.target[i], target);
  }
}

PretrainResult pretrain(const GaussianMixture& q0, const MlpSpec& spec,
                        const PretrainConfig& cfg) {
  if (spec.data_dim != q0.dim()) {
    throw ConfigError("pretrain: network dimension " +
                      std::to_string(spec.data_dim) +
                      " does not match mixture dimension " +
                      std::to_string(q0.dim()));
  }
  PretrainResult out;
  out.net = VectorFieldNet::init(spec, cfg.seed);
  out.ema = out.net;
  if (cfg.steps == 0) return out;
  if (cfg.steps < 0 || cfg.batch <= 0) {
    throw ConfigError("pretrain: steps and batch must be positive");
  }

  Rng rng(cfg.seed, /*stream=*/0x7072657472);
  Adam opt(cfg.adam, out.net.param_count());
  const int d = q0.dim();

  tape::Graph g;
  const auto params = out.net.make_tape_params(g, /*frozen=*/false);
  const auto slots = build_cond_loss_graph(g, out.net, params, cfg.batch, d);

  Mat x1(cfg.batch, d);
  std::vector<double> ts(cfg.batch);
  for (long step = 1; step <= cfg.steps; ++step) {
    const Mat x0 = gmm_sample(q0, cfg.batch, rng);
    for (int i = 0; i < cfg.batch; ++i) {
      ts[i] = sample_time(cfg.tdist, rng);
      for (int j = 0; j < d; ++j) x1(i, j) = rng.normal();
    }
    load_cond_batch(g, slots, x0, x1, ts);
    g.recompute();
    const double loss = g.scalar_value(slots.loss);
    if (!std::isfinite(loss)) {
      throw NumericalError("pretrain: non-finite loss at step " +
                           std::to_string(step));
    }
    const auto grad = out.net.flatten_grad(g.backward(slots.loss), params);
    opt.step(out.net.params(), grad);
    out.net.upload_params(g, params);

    for (std::size_t i = 0; i < out.ema.params().size(); ++i) {
      out.ema.params()[i] = cfg.ema_decay * out.ema.params()[i] +
                            (1.0 - cfg.ema_decay) * out.net.params()[i];
    }

    if (step % cfg.log_interval == 0 || step == cfg.steps) {
      Rng probe_rng(cfg.seed ^ 0x70726f6265, static_cast<std::uint64_t>(step));
      NetField f(out.ema);
      const double err =
          field_mse(f, q0, cfg.probe_samples,
                    TimeDistribution::uniform(0.05, 0.95), probe_rng);
      out.log.push_back({step, loss, err});
    }
  }
  return out;
}

Mat euler_sample(const VelocityField& field, int n, int steps, Rng& rng,
                 SampleTrajectory* trajectory) {
  if (steps <= 0) {
    throw DomainError("euler_sample: steps must be positive, got " +
                      std::to_string(steps));
  }
  if (n <= 0) throw DomainError("euler_sample: n must be positive");
  const int d = field.dim();
  Mat x(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = rng.normal();
  }
  if (trajectory) {
    trajectory->times.assign(1, 1.0);
    trajectory->states.assign(1, x);
  }
  const double dt = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - k * dt;
    x -= dt * field.velocity_batch(x, t);
    if (!x.allFinite()) {
      throw NumericalError("euler_sample: non-finite state at step " +
                           std::to_string(k + 1) + " of " +
                           std::to_string(steps));
    }
    if (trajectory) {
      trajectory->times.push_back(k + 1 == steps ? 0.0 : t - dt);
      trajectory->states.push_back(x);
    }
  }
  return x;
}

}  // namespace flowgm
