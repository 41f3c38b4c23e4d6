#pragma once

// Pretraining of vector-field networks on the linear interpolation path,
// plus the Euler sampler that integrates any velocity field from t = 1
// down to t = 0.

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

#include "flowgm/analytic.hpp"
#include "flowgm/field.hpp"
#include "flowgm/nets.hpp"
#include "flowgm/rng.hpp"
#include "flowgm/tape.hpp"

namespace flowgm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over one flat parameter vector.
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, std::size_t n)
      : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  const AdamConfig& config() const { return cfg_; }
  long steps_taken() const { return t_; }
  // lr_scale multiplies the configured rate for this update only, so a
  // caller can run a schedule without mutating the optimizer state.
  void step(std::span<double> params, std::span<const double> grad,
            double lr_scale = 1.0);

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

struct PretrainConfig {
  int steps = 20000;
  int batch = 256;
  AdamConfig adam{1e-3, 0.0, 0.999, 1e-8};
  double ema_decay = 0.999;
  TimeDistribution tdist = TimeDistribution::uniform(1e-3, 1.0 - 1e-3);
  std::uint64_t seed = 0;
  int log_interval = 100;
  int probe_samples = 2000;  // field-error probe size per logged row
};

struct TrainLogRow {
  long step = 0;
  double loss = 0.0;
  double field_err = 0.0;  // EMA-weights probe MSE vs the exact marginal field
};

struct PretrainResult {
  VectorFieldNet net;
  VectorFieldNet ema;
  std::vector<TrainLogRow> log;
};

// Regression of v(x_t, t) onto x_1 - x_0 along x_t = (1-t) x_0 + t x_1.
// Draws (x_1, t) per row of x0 from rng, builds the batch-mean loss in g,
// and returns the scalar loss node (differentiable w.r.t. the parameters
// behind `p`).
tape::NodeId reflow_loss(tape::Graph& g, const VectorFieldNet& net,
                         const VectorFieldNet::TapeParams& p, const Mat& x0,
                         Rng& rng, const TimeDistribution& tdist);

// Same loss over explicit draws: row i pairs x0 with x1 at time ts[i].
tape::NodeId reflow_loss(tape::Graph& g, const VectorFieldNet& net,
                         const VectorFieldNet::TapeParams& p, const Mat& x0,
                         const Mat& x1, std::span<const double> ts);

// One reusable conditional-regression graph: per-row leaf slots for
// (x_t, t, target) plus the batch-mean squared-residual loss node. Built
// once, then refilled with load_cond_batch + Graph::recompute each step.
struct CondLossGraph {
  std::vector<tape::NodeId> xt, t, target;
  tape::NodeId loss = tape::kNoNode;
};

CondLossGraph build_cond_loss_graph(tape::Graph& g, const VectorFieldNet& net,
                                    const VectorFieldNet::TapeParams& p,
                                    int batch, int dim);

// Writes x_t = (1-t) x0 + t x1 and target = x1 - x0 into the slots. Does
// not recompute.
void load_cond_batch(tape::Graph& g, const CondLossGraph& slots, const Mat& x0,
                     const Mat& x1, std::span<const double> ts);

// Full pretraining loop; deterministic given cfg.seed. Throws
// NumericalError if the loss goes non-finite.
PretrainResult pretrain(const GaussianMixture& q0, const MlpSpec& spec,
                        const PretrainConfig& cfg);

struct SampleTrajectory {
  std::vector<double> times;  // descending, 1 -> 0, steps + 1 entries
  std::vector<Mat> states;    // same length; states[0] is the initial noise
};

// Explicit Euler from x ~ N(0, I) at t = 1 down to t = 0 on a uniform grid.
// Throws DomainError for steps <= 0 and NumericalError (naming the step) if
// the state goes non-finite.
Mat euler_sample(const VelocityField& field, int n, int steps, Rng& rng,
                 SampleTrajectory* trajectory = nullptr);

}  // namespace flowgm
