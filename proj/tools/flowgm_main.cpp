// Command-line front end: pretrain / distill / sample / verify / eval.
// Exit codes: 0 success, 1 configuration or usage error, 2 numerical abort,
// 3 identity-suite failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "flowgm/config.hpp"
#include "flowgm/errors.hpp"
#include "flowgm/runner.hpp"

namespace {

// A --config value is a file path, or one of the built-in preset names when
// no file of that name exists.
flowgm::ExperimentConfig config_from_arg(const std::string& arg) {
  if (!std::filesystem::exists(arg)) {
    if (arg == "ring8") return flowgm::ring8_preset();
    if (arg == "two-moons-gmm") return flowgm::two_moons_preset();
    if (arg == "single-gauss") return flowgm::single_gauss_preset();
  }
  return flowgm::load_config(arg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flow-matching pretraining, one-step generator distillation, "
               "and distribution-identity verification"};
  app.require_subcommand(1);
  static const char* kConfigHelp =
      "config file, or a preset name: ring8, two-moons-gmm, single-gauss";

  auto* pre = app.add_subcommand(
      "pretrain", "train a velocity field on the configured mixture");
  std::string pre_config;
  std::uint64_t pre_seed = 0;
  std::string pre_out;
  pre->add_option("--config", pre_config, kConfigHelp)->required();
  auto* pre_seed_opt =
      pre->add_option("--seed", pre_seed, "override the config seed");
  auto* pre_out_opt =
      pre->add_option("--out", pre_out, "override the output directory");

  auto* dis = app.add_subcommand(
      "distill", "distill a one-step generator from a teacher field");
  std::string dis_config;
  std::string dis_ckpt;
  bool dis_analytic = false;
  std::uint64_t dis_seed = 0;
  std::string dis_out;
  dis->add_option("teacher", dis_ckpt, "pretrained teacher checkpoint");
  dis->add_option("--config", dis_config, kConfigHelp)->required();
  dis->add_flag("--analytic-teacher", dis_analytic,
                "distill from the exact mixture field instead of a "
                "checkpoint");
  auto* dis_seed_opt =
      dis->add_option("--seed", dis_seed, "override the config seed");
  auto* dis_out_opt =
      dis->add_option("--out", dis_out, "override the output directory");

  auto* smp =
      app.add_subcommand("sample", "draw samples from a checkpoint");
  std::string smp_ckpt;
  long smp_n = 10000;
  int smp_steps = 0;
  std::uint64_t smp_seed = 0;
  std::string smp_out = "runs/sample";
  smp->add_option("checkpoint", smp_ckpt, "checkpoint to sample from")
      ->required();
  smp->add_option("--n", smp_n, "number of samples (default 10000)");
  auto* smp_steps_opt = smp->add_option(
      "--steps", smp_steps,
      "Euler steps for velocity-field checkpoints (default 50)");
  smp->add_option("--seed", smp_seed, "noise seed (default 0)");
  smp->add_option("--out", smp_out,
                  "output directory (default runs/sample)");

  auto* ver = app.add_subcommand(
      "verify", "run the distribution-identity suite against closed forms");
  std::string ver_config;
  long ver_n = 0;
  std::uint64_t ver_seed = 0;
  std::string ver_out;
  ver->add_option("--config", ver_config,
                  "optional config; defaults to the built-in suite settings");
  auto* ver_n_opt =
      ver->add_option("--n", ver_n, "Monte-Carlo samples per check");
  auto* ver_seed_opt = ver->add_option("--seed", ver_seed, "suite seed");
  auto* ver_out_opt =
      ver->add_option("--out", ver_out, "override the output directory");

  auto* evl = app.add_subcommand(
      "eval",
      "compare a sample file against a reference file or the configured "
      "mixture");
  std::string evl_a;
  std::string evl_b;
  std::string evl_config;
  long evl_n = 0;
  std::uint64_t evl_seed = 0;
  std::string evl_out = "runs/eval";
  evl->add_option("samples", evl_a, "sample CSV to evaluate")->required();
  evl->add_option("reference", evl_b, "reference sample CSV");
  evl->add_option("--config", evl_config,
                  "config providing the mixture and metric settings");
  evl->add_option("--n", evl_n,
                  "mixture oracle sample count (default: metrics.samples)");
  evl->add_option("--seed", evl_seed,
                  "seed for oracle draws and projections (default 0)");
  evl->add_option("--out", evl_out, "output directory (default runs/eval)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (pre->parsed()) {
      flowgm::ExperimentConfig cfg = config_from_arg(pre_config);
      if (pre_seed_opt->count() > 0) cfg.seed = pre_seed;
      if (pre_out_opt->count() > 0) cfg.out_dir = pre_out;
      flowgm::run_pretrain(cfg);
    } else if (dis->parsed()) {
      flowgm::ExperimentConfig cfg = config_from_arg(dis_config);
      if (dis_seed_opt->count() > 0) cfg.seed = dis_seed;
      if (dis_out_opt->count() > 0) cfg.out_dir = dis_out;
      if (dis_analytic && !dis_ckpt.empty()) {
        throw flowgm::ConfigError(
            "distill: pass either a teacher checkpoint or "
            "--analytic-teacher, not both");
      }
      if (!dis_analytic && dis_ckpt.empty()) {
        throw flowgm::ConfigError(
            "distill: provide a teacher checkpoint or pass "
            "--analytic-teacher");
      }
      flowgm::run_distill(cfg, dis_ckpt);
    } else if (smp->parsed()) {
      std::optional<int> steps;
      if (smp_steps_opt->count() > 0) steps = smp_steps;
      flowgm::run_sample(smp_ckpt, smp_n, steps, smp_seed, smp_out);
    } else if (ver->parsed()) {
      flowgm::ExperimentConfig cfg;
      cfg.out_dir = "runs/verify";
      if (!ver_config.empty()) cfg = config_from_arg(ver_config);
      if (ver_n_opt->count() > 0) cfg.verify.n = ver_n;
      if (ver_seed_opt->count() > 0) cfg.verify.seed = ver_seed;
      if (ver_out_opt->count() > 0) cfg.out_dir = ver_out;
      if (!flowgm::run_verify(cfg)) return 3;
    } else if (evl->parsed()) {
      std::optional<flowgm::ExperimentConfig> cfg;
      if (!evl_config.empty()) cfg = config_from_arg(evl_config);
      flowgm::run_eval(evl_a, evl_b, cfg ? &*cfg : nullptr, evl_n, evl_seed,
                       evl_out);
    }
  } catch (const flowgm::NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const flowgm::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const flowgm::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
