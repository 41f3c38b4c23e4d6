#pragma once

// One-step generator distillation. The generator g(z) is trained so that
// the velocity field induced by its own noising path matches a teacher
// field, without integrating the teacher at training time. Each step
// alternates two updates:
//
//   1. online update: an auxiliary field v is regressed onto the
//      conditional target (x_t - x_0)/t along x_t = (1-t) x_0 + t x_1,
//      where x_0 = g(z) is held fixed and x_1 is fresh noise;
//   2. generator update: descend w1 * l1 + w2 * l2 with
//        l1 = E ||u(x_t) - v(x_t)||^2
//        l2 = E 2 (u(x_t) - v(x_t)) . (v(x_t) - (x_t - x_0)/t)
//      where u is the teacher and x_t stays differentiable through the
//      generator, while the online and teacher parameters are frozen.
//
// The l2 gradient equals the gradient of the generator-marginal matching
// objective at the current point even though v is only an approximation of
// the generator's own field; l1 contributes the remaining curvature term.

#include <cstdint>
#include <optional>
#include <vector>

#include "flowgm/field.hpp"
#include "flowgm/flowtrain.hpp"
#include "flowgm/nets.hpp"
#include "flowgm/rng.hpp"
#include "flowgm/tape.hpp"

namespace flowgm {

struct FgmWeights {
  double l1 = 1.0;
  double l2 = 1.0;
};

struct FgmTerms {
  tape::NodeId l1 = tape::kNoNode;
  tape::NodeId l2 = tape::kNoNode;
};

// Builds both generator-loss terms over explicit draws (z, eps, ts); row i
// uses x_0 = g(z_i), x_t = (1-ts[i]) x_0 + ts[i] eps_i. Gradients flow into
// the generator parameters behind gen_p and through every x_t path; the
// online and teacher bindings must keep their own parameters frozen.
// Requires ts[i] in (0, 1].
FgmTerms fgm_terms(tape::Graph& g, const OneStepGenerator& gen,
                   const VectorFieldNet::TapeParams& gen_p,
                   FieldBinding& online, FieldBinding& teacher, const Mat& z,
                   const Mat& eps, std::span<const double> ts);

// w1 * l1 + w2 * l2 as a scalar node.
tape::NodeId fgm_loss(tape::Graph& g, const FgmTerms& terms,
                      const FgmWeights& w);

// Regression loss for the auxiliary field along the generator's own pairs:
// x_0 = g(z) with no gradient back into the generator, x_1 = eps. The
// second overload builds x_0 inside the graph behind a stop-gradient, so
// the generator parameters appear in gradient maps with exactly zero
// entries; the first evaluates x_0 numerically (same values, no generator
// nodes).
tape::NodeId online_flow_loss(tape::Graph& g, const VectorFieldNet& online,
                              const VectorFieldNet::TapeParams& online_p,
                              const OneStepGenerator& gen, const Mat& z,
                              const Mat& eps, std::span<const double> ts);
tape::NodeId online_flow_loss(tape::Graph& g, const VectorFieldNet& online,
                              const VectorFieldNet::TapeParams& online_p,
                              const OneStepGenerator& gen,
                              const VectorFieldNet::TapeParams& gen_p,
                              const Mat& z, const Mat& eps,
                              std::span<const double> ts);

struct DistillConfig {
  int steps = 10000;
  int batch = 512;
  int online_updates = 3;  // online steps per generator step
  AdamConfig gen_adam{1e-3, 0.0, 0.999, 1e-8};
  AdamConfig online_adam{1e-3, 0.0, 0.999, 1e-8};
  FgmWeights weights;
  double loss_scale = 1.0;  // multiplies the generator loss
  // Both losses share one mid-weighted time law: the auxiliary field is then
  // most accurate exactly where the generator loss queries it, and the
  // clamps keep x_t away from the endpoints where neither loss carries
  // useful signal.
  TimeDistribution fgm_tdist = TimeDistribution::logit_normal(0.0, 1.0, 0.02,
                                                              0.98);
  TimeDistribution online_tdist =
      TimeDistribution::logit_normal(0.0, 1.0, 0.02, 0.98);
  // Cosine decay of both learning rates over the outer steps, ending at
  // this fraction of the configured rate; 1 keeps them constant. The high
  // initial rate places the modes, the low final rate sharpens them and
  // stops the generator from orbiting the optimum.
  double final_lr_fraction = 0.01;
  double t_star = 0.97;
  // Generator wrapper constants; unset c_out / c_noise default to t_star.
  double c_in = 1.0;
  double c_skip = 1.0;
  std::optional<double> c_out;
  std::optional<double> c_noise;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  int log_interval = 100;
};

struct DistillLogRow {
  long step = 0;
  double online_loss = 0.0;  // last online regression batch loss
  double gen_loss = 0.0;     // weighted generator loss
  double l1 = 0.0;
  double l2 = 0.0;
};

struct DistillResult {
  OneStepGenerator gen;
  OneStepGenerator gen_ema;
  VectorFieldNet online;
  std::vector<DistillLogRow> log;
};

// Runs the alternating loop. The generator starts as the one-step wrapper
// around gen_backbone and the auxiliary field starts from online. Pass fresh
// nets when the teacher is analytic (the generator then starts as the
// identity map); pass copies of a pretrained net when distilling it.
// Deterministic given cfg.seed; throws NumericalError when a loss goes
// non-finite and ConfigError on dimension mismatches.
DistillResult distill(const VelocityField& teacher, VectorFieldNet gen_backbone,
                      VectorFieldNet online, const DistillConfig& cfg);

}  // namespace flowgm
