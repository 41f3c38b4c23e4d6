#include "flowgm/distill.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "flowgm/analytic.hpp"
#include "flowgm/errors.hpp"

namespace flowgm {

FgmTerms fgm_terms(tape::Graph& g, const OneStepGenerator& gen,
                   const VectorFieldNet::TapeParams& gen_p,
                   FieldBinding& online, FieldBinding& teacher, const Mat& z,
                   const Mat& eps, std::span<const double> ts) {
  const int n = static_cast<int>(z.rows());
  const int d = static_cast<int>(z.cols());
  if (n == 0) throw DomainError("fgm_terms: empty batch");
  if (eps.rows() != n || eps.cols() != d ||
      ts.size() != static_cast<std::size_t>(n)) {
    throw DomainError("fgm_terms: batch shape mismatch");
  }
  std::vector<double> zi(d), ei(d);
  tape::NodeId acc1 = tape::kNoNode;
  tape::NodeId acc2 = tape::kNoNode;
  for (int i = 0; i < n; ++i) {
    const double t = ts[i];
    if (!(t > 0.0 && t <= 1.0)) {
      throw DomainError("fgm_terms: time must lie in (0, 1], got " +
                        std::to_string(t));
    }
    for (int j = 0; j < d; ++j) {
      zi[j] = z(i, j);
      ei[j] = eps(i, j);
    }
    const auto x0 = gen.build(g, g.constant(zi), gen_p);
    const auto xt = g.add(g.scale(x0, 1.0 - t), g.scale(g.constant(ei), t));
    const auto v = online.velocity(xt, t);
    const auto u = teacher.velocity(xt, t);
    const auto u_cond = conditional_field_node(g, xt, x0, t);
    const auto diff = g.sub(u, v);
    const auto i1 = g.sum(g.square(diff));
    const auto i2 = g.scale(g.dot(diff, g.sub(v, u_cond)), 2.0);
    acc1 = (acc1 == tape::kNoNode) ? i1 : g.add(acc1, i1);
    acc2 = (acc2 == tape::kNoNode) ? i2 : g.add(acc2, i2);
  }
  return {g.scale(acc1, 1.0 / n), g.scale(acc2, 1.0 / n)};
}

tape::NodeId fgm_loss(tape::Graph& g, const FgmTerms& terms,
                      const FgmWeights& w) {
  return g.add(g.scale(terms.l1, w.l1), g.scale(terms.l2, w.l2));
}

tape::NodeId online_flow_loss(tape::Graph& g, const VectorFieldNet& online,
                              const VectorFieldNet::TapeParams& online_p,
                              const OneStepGenerator& gen, const Mat& z,
                              const Mat& eps, std::span<const double> ts) {
  return reflow_loss(g, online, online_p, gen.forward_batch(z), eps, ts);
}

tape::NodeId online_flow_loss(tape::Graph& g, const VectorFieldNet& online,
                              const VectorFieldNet::TapeParams& online_p,
                              const OneStepGenerator& gen,
                              const VectorFieldNet::TapeParams& gen_p,
                              const Mat& z, const Mat& eps,
                              std::span<const double> ts) {
  const int n = static_cast<int>(z.rows());
  const int d = static_cast<int>(z.cols());
  if (n == 0) throw DomainError("online_flow_loss: empty batch");
  if (eps.rows() != n || eps.cols() != d ||
      ts.size() != static_cast<std::size_t>(n)) {
    throw DomainError("online_flow_loss: batch shape mismatch");
  }
  std::vector<double> zi(d), ei(d);
  tape::NodeId acc = tape::kNoNode;
  for (int i = 0; i < n; ++i) {
    const double t = ts[i];
    for (int j = 0; j < d; ++j) {
      zi[j] = z(i, j);
      ei[j] = eps(i, j);
    }
    const auto x0 = g.stop_gradient(gen.build(g, g.constant(zi), gen_p));
    const auto x1 = g.constant(ei);
    const auto xt = g.add(g.scale(x0, 1.0 - t), g.scale(x1, t));
    const auto v = online.build(g, xt, g.constant_scalar(t), online_p);
    const auto item = g.sum(g.square(g.sub(v, g.sub(x1, x0))));
    acc = (acc == tape::kNoNode) ? item : g.add(acc, item);
  }
  return g.scale(acc, 1.0 / n);
}

DistillResult distill(const VelocityField& teacher, VectorFieldNet gen_backbone,
                      VectorFieldNet online, const DistillConfig& cfg) {
  const int d = gen_backbone.spec().data_dim;
  if (teacher.dim() != d || online.spec().data_dim != d) {
    throw ConfigError("distill: teacher, generator and online dimensions "
                      "must agree");
  }
  if (cfg.steps < 0 || cfg.batch <= 0 || cfg.online_updates < 0) {
    throw ConfigError("distill: steps, batch and online_updates must be "
                      "non-negative (batch positive)");
  }
  if (!(cfg.final_lr_fraction > 0.0 && cfg.final_lr_fraction <= 1.0)) {
    throw ConfigError("distill: final_lr_fraction must lie in (0, 1]");
  }

  DistillResult out;
  out.gen = init_generator(gen_backbone, cfg.t_star, cfg.c_in, cfg.c_skip,
                           cfg.c_out, cfg.c_noise);
  out.gen_ema = out.gen;
  out.online = std::move(online);
  if (cfg.steps == 0) return out;

  Adam gen_opt(cfg.gen_adam, out.gen.backbone.param_count());
  Adam online_opt(cfg.online_adam, out.online.param_count());
  Rng rng(cfg.seed, /*stream=*/0x64697374);

  // The online regression reuses one graph across all steps; the generator
  // graph is rebuilt per step because the teacher binding folds each row's
  // time into its coefficients.
  tape::Graph og;
  const auto online_p = out.online.make_tape_params(og, /*frozen=*/false);
  const auto slots =
      build_cond_loss_graph(og, out.online, online_p, cfg.batch, d);

  Mat z(cfg.batch, d), eps(cfg.batch, d);
  std::vector<double> ts(cfg.batch);
  const auto draw = [&](const TimeDistribution& tdist) {
    for (int i = 0; i < cfg.batch; ++i) {
      ts[i] = sample_time(tdist, rng);
      for (int j = 0; j < d; ++j) {
        z(i, j) = rng.normal();
        eps(i, j) = rng.normal();
      }
    }
  };

  for (long step = 1; step <= cfg.steps; ++step) {
    // One cosine arc from 1 down to final_lr_fraction across the run; the
    // online and generator updates of a step share the same scale.
    const double progress = static_cast<double>(step - 1) / cfg.steps;
    const double lr_scale =
        cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 *
                                    (1.0 + std::cos(M_PI * progress));
    double online_loss = 0.0;
    for (int k = 0; k < cfg.online_updates; ++k) {
      draw(cfg.online_tdist);
      const Mat x0 = out.gen.forward_batch(z);
      load_cond_batch(og, slots, x0, eps, ts);
      out.online.upload_params(og, online_p);
      og.recompute();
      online_loss = og.scalar_value(slots.loss);
      if (!std::isfinite(online_loss)) {
        throw NumericalError("distill: non-finite online loss at step " +
                             std::to_string(step));
      }
      const auto grad =
          out.online.flatten_grad(og.backward(slots.loss), online_p);
      online_opt.step(out.online.params(), grad, lr_scale);
    }

    draw(cfg.fgm_tdist);
    tape::Graph gg;
    const auto gen_p = out.gen.backbone.make_tape_params(gg, /*frozen=*/false);
    NetField online_field(out.online);
    const auto online_b = online_field.bind(gg);
    const auto teacher_b = teacher.bind(gg);
    const auto terms =
        fgm_terms(gg, out.gen, gen_p, *online_b, *teacher_b, z, eps, ts);
    const auto loss = gg.scale(fgm_loss(gg, terms, cfg.weights),
                               cfg.loss_scale);
    const double gen_loss = gg.scalar_value(loss);
    if (!std::isfinite(gen_loss)) {
      throw NumericalError("distill: non-finite generator loss at step " +
                           std::to_string(step));
    }
    const auto grad = out.gen.backbone.flatten_grad(gg.backward(loss), gen_p);
    gen_opt.step(out.gen.backbone.params(), grad, lr_scale);

    auto& ema = out.gen_ema.backbone.params();
    const auto& cur = out.gen.backbone.params();
    for (std::size_t i = 0; i < ema.size(); ++i) {
      ema[i] = cfg.ema_decay * ema[i] + (1.0 - cfg.ema_decay) * cur[i];
    }

    if (step % cfg.log_interval == 0 || step == cfg.steps) {
      out.log.push_back({step, online_loss, gen_loss,
                         gg.scalar_value(terms.l1), gg.scalar_value(terms.l2)});
    }
  }
  return out;
}

}  // namespace flowgm
