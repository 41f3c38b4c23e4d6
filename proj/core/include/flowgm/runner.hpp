#pragma once
// Drivers behind the command-line subcommands, linkable from tests. Each
// driver writes its artifacts into an output directory and is byte-for-byte
// deterministic given (config, seed); wall-clock timestamps go only to the
// sidecar run.log.

#include <cstdint>
#include <optional>
#include <string>

#include "flowgm/config.hpp"

namespace flowgm {

// Trains the velocity field on the configured mixture. Writes teacher.ckpt
// (raw + EMA weights), pretrain_curve.csv (step, loss, field_mse), and
// teacher_samples.csv drawn with the metric sampler's Euler step count.
void run_pretrain(const ExperimentConfig& cfg);

// Distills a one-step generator from a pretrained checkpoint, or from the
// exact mixture field when teacher_ckpt is empty. Writes generator.ckpt,
// online_flow.ckpt, distill_curve.csv, and generator scatters before/after
// training (gen_before.csv, gen_after.csv).
void run_distill(const ExperimentConfig& cfg, const std::string& teacher_ckpt);

// Draws n samples from a checkpoint into <out_dir>/samples.csv. Generators
// take one forward pass (a supplied step count other than 1 is ignored with
// a warning); velocity-field checkpoints run an Euler rollout with the given
// number of steps (default 50). n = 0 writes just the header line.
void run_sample(const std::string& ckpt_path, long n, std::optional<int> steps,
                std::uint64_t seed, const std::string& out_dir);

// Runs the distribution-identity suite, prints one table row per check,
// writes verify_report.json, and returns whether every check passed.
bool run_verify(const ExperimentConfig& cfg);

// Compares the sample file csv_a against csv_b, or against fresh draws from
// the configured mixture when csv_b is empty (oracle_n <= 0 falls back to
// cfg.metrics.samples). Prints sliced 2-Wasserstein and energy distance and
// writes them to <out_dir>/eval.csv.
void run_eval(const std::string& csv_a, const std::string& csv_b,
              const ExperimentConfig* cfg, long oracle_n, std::uint64_t seed,
              const std::string& out_dir);

}  // namespace flowgm
