#pragma once

// Trainable networks. A VectorFieldNet is a tanh MLP v(x, t) over the
// concatenation of x with a sinusoidal embedding of t. It evaluates two
// ways: a fast Eigen path for samplers/metrics and a tape path for
// training and identity checks. Both share one flat parameter vector.
//
// A OneStepGenerator wraps a backbone as g(z) = c_skip z - c_out v(c_in z,
// c_noise), so a generator initialized from a pretrained field is one Euler
// step of that field in disguise.

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <vector>

#include "flowgm/field.hpp"
#include "flowgm/rng.hpp"
#include "flowgm/tape.hpp"

namespace flowgm {

// Sinusoidal features [t, sin(2^j pi t), cos(2^j pi t)] for j < pairs.
std::vector<double> time_embed(double t, int pairs);

struct MlpSpec {
  int data_dim = 2;
  std::vector<int> hidden = {128, 128, 128};
  int embed_pairs = 8;

  int embed_dim() const { return 2 * embed_pairs + 1; }
  int input_dim() const { return data_dim + embed_dim(); }
  bool operator==(const MlpSpec&) const = default;
};

class VectorFieldNet {
 public:
  // Parameter node ids for one graph. `used` are what forward passes read
  // (stop-gradient wrapped when frozen); `raw` are the parameter leaves that
  // appear in GradientMaps and accept set_value.
  struct TapeParams {
    std::vector<tape::NodeId> raw;
    std::vector<tape::NodeId> used;
    bool frozen = false;
  };

  VectorFieldNet() = default;
  explicit VectorFieldNet(const MlpSpec& spec);

  // Hidden weights ~ N(0, 1/fan_in), hidden biases zero, final layer zero,
  // so a fresh network is the zero field.
  static VectorFieldNet init(const MlpSpec& spec, std::uint64_t seed);

  const MlpSpec& spec() const { return spec_; }
  std::size_t param_count() const { return params_.size(); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  Vec eval(const Vec& x, double t) const;
  Mat eval_batch(const Mat& x, double t) const;
  Mat eval_batch(const Mat& x, const Vec& ts) const;

  // Creates one parameter node per layer tensor, in flat-layout order.
  TapeParams make_tape_params(tape::Graph& g, bool frozen) const;

  // Forward through the tape; differentiable w.r.t. x, t and (when not
  // frozen) the parameters.
  tape::NodeId build(tape::Graph& g, tape::NodeId x, tape::NodeId t,
                     const TapeParams& p) const;
  tape::NodeId build(tape::Graph& g, tape::NodeId x, double t,
                     const TapeParams& p) const;

  // Gradient map -> flat vector aligned with params().
  std::vector<double> flatten_grad(const tape::GradientMap& map,
                                   const TapeParams& p) const;

  // Push current params() into existing parameter nodes (for graph reuse).
  void upload_params(tape::Graph& g, const TapeParams& p) const;

 private:
  struct Layer {
    int in = 0, out = 0;
    std::size_t w_off = 0, b_off = 0;
  };

  MlpSpec spec_;
  std::vector<Layer> layers_;
  std::vector<double> params_;
};

// VelocityField adapter; bind() freezes the parameters inside the graph.
class NetField : public VelocityField {
 public:
  explicit NetField(const VectorFieldNet& net) : net_(net) {}
  int dim() const override { return net_.spec().data_dim; }
  Vec velocity(const Vec& x, double t) const override {
    return net_.eval(x, t);
  }
  Mat velocity_batch(const Mat& x, double t) const override {
    return net_.eval_batch(x, t);
  }
  Mat velocity_batch_times(const Mat& x, const Vec& ts) const override {
    return net_.eval_batch(x, ts);
  }
  std::unique_ptr<FieldBinding> bind(tape::Graph& g) const override;

 private:
  const VectorFieldNet& net_;
};

struct OneStepGenerator {
  VectorFieldNet backbone;
  double t_star = 0.97;
  double c_in = 1.0;
  double c_skip = 1.0;
  double c_out = 0.97;
  double c_noise = 0.97;

  int dim() const { return backbone.spec().data_dim; }
  Vec forward(const Vec& z) const;
  Mat forward_batch(const Mat& z) const;
  tape::NodeId build(tape::Graph& g, tape::NodeId z,
                     const VectorFieldNet::TapeParams& p) const;
};

// Deep-copies the teacher backbone into the one-step wrapper; c_out and
// c_noise default to t_star when unset.
OneStepGenerator init_generator(const VectorFieldNet& teacher, double t_star,
                                double c_in = 1.0, double c_skip = 1.0,
                                std::optional<double> c_out = std::nullopt,
                                std::optional<double> c_noise = std::nullopt);

struct TimeDistribution {
  enum class Kind { kUniform, kLogitNormal };

  Kind kind = Kind::kUniform;
  double m = 0.0;  // logit-normal location
  double s = 1.0;  // logit-normal scale
  std::optional<double> clamp_lo;
  std::optional<double> clamp_hi;

  static TimeDistribution uniform(std::optional<double> lo = std::nullopt,
                                  std::optional<double> hi = std::nullopt);
  static TimeDistribution logit_normal(
      double m, double s, std::optional<double> lo = std::nullopt,
      std::optional<double> hi = std::nullopt);

  // Median of the unclamped law pushed through the clamp.
  double median() const;
};

// Draws from the distribution; samples always land strictly inside (0, 1)
// before any clamp is applied.
double sample_time(const TimeDistribution& dist, Rng& rng);

}  // namespace flowgm
