#pragma once

// Experiment configuration: one structured-text document covering the
// target mixture, network, training, distillation, metric, and verification
// settings. Parsing is strict — unknown or missing fields raise ConfigError
// naming the full field path — and serialization is canonical (sorted keys,
// shortest round-trip numbers), so parse -> serialize -> parse is a
// fixpoint and the shipped presets are bytewise stable.

#include <cstdint>
#include <string>
#include <vector>

#include "flowgm/analytic.hpp"
#include "flowgm/distill.hpp"
#include "flowgm/flowtrain.hpp"
#include "flowgm/nets.hpp"
#include "flowgm/verify.hpp"

namespace flowgm {

struct MixtureSpec {
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> variances;

  // Validates simplex weights, positive variances, consistent dimensions.
  GaussianMixture build() const;
};

struct MetricConfig {
  long samples = 10000;
  int projections = 256;
  int teacher_steps = 50;  // sampler steps when the reference is a field
};

struct ExperimentConfig {
  MixtureSpec mixture;
  MlpSpec network{2, {64, 64, 64}, 4};
  PretrainConfig pretrain;
  DistillConfig distill;
  MetricConfig metrics;
  VerifySuiteConfig verify;
  std::string out_dir = "runs/out";
  std::uint64_t seed = 0;
};

// Strict parse of the serialized form; error messages carry the field path.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Canonical text form with a trailing newline.
std::string serialize_config(const ExperimentConfig& cfg);
void save_config(const ExperimentConfig& cfg, const std::string& path);

// FNV-1a 64 of the canonical serialization with out_dir blanked (artifacts
// must not depend on where they are written), as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

// Shipped presets (presets/*.json are these, serialized).
ExperimentConfig ring8_preset();
ExperimentConfig two_moons_preset();
ExperimentConfig single_gauss_preset();

}  // namespace flowgm
