#pragma once

// Binary model snapshots. File layout: the 8-byte magic "FGMCKPT1", a
// little-endian u64 header length, a structured-text header declaring the
// model kind, an architecture echo, the array names with their sizes, the
// training step and the config hash, then each declared array as raw
// little-endian 64-bit floats, in header order. Loading a file this module
// wrote and saving it again reproduces the bytes exactly.

#include <cstdint>
#include <string>
#include <vector>

#include "flowgm/nets.hpp"

namespace flowgm {

struct Checkpoint {
  std::string kind;  // "teacher" | "online-flow" | "generator"
  MlpSpec spec;
  // Wrapper constants; serialized only for generator checkpoints.
  double t_star = 0.97;
  double c_in = 1.0;
  double c_skip = 1.0;
  double c_out = 0.97;
  double c_noise = 0.97;
  long step = 0;
  std::string config_hash;        // 16 hex digits, may be empty
  std::vector<double> params;
  std::vector<double> ema;        // empty when the file carries no EMA array

  bool has_ema() const { return !ema.empty(); }
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_net_checkpoint(const std::string& kind,
                               const VectorFieldNet& net,
                               const VectorFieldNet* ema, long step,
                               const std::string& config_hash);
Checkpoint make_generator_checkpoint(const OneStepGenerator& gen,
                                     const OneStepGenerator* ema, long step,
                                     const std::string& config_hash);

// Rebuild models from a snapshot; prefer_ema picks the EMA array when the
// file carries one. The kind must match what the caller expects.
VectorFieldNet net_from_checkpoint(const Checkpoint& c, bool prefer_ema);
OneStepGenerator generator_from_checkpoint(const Checkpoint& c,
                                           bool prefer_ema);

// Raises ConfigError when the checkpoint's architecture echo differs from
// the spec the caller is about to pair it with.
void require_arch(const Checkpoint& c, const MlpSpec& spec);

}  // namespace flowgm
