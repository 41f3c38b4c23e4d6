// End-to-end driver behavior: artifact determinism, checkpoint handoff
// between subcommands, trivial-path identities, and abort conditions.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>

#include <json.hpp>

#include "flowgm/checkpoint.hpp"
#include "flowgm/config.hpp"
#include "flowgm/csvio.hpp"
#include "flowgm/errors.hpp"
#include "flowgm/nets.hpp"
#include "flowgm/rng.hpp"
#include "flowgm/runner.hpp"

using namespace flowgm;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("flowgm_run_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Single-Gaussian experiment small enough that every driver finishes in
// well under a second.
ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig cfg = single_gauss_preset();
  cfg.network = MlpSpec{2, {16, 16}, 2};
  cfg.pretrain.steps = 10;
  cfg.pretrain.batch = 32;
  cfg.pretrain.probe_samples = 200;
  cfg.pretrain.log_interval = 5;
  cfg.distill.steps = 5;
  cfg.distill.batch = 16;
  cfg.distill.log_interval = 2;
  cfg.metrics.samples = 50;
  cfg.metrics.projections = 16;
  cfg.metrics.teacher_steps = 4;
  cfg.verify.configs = 1;
  cfg.verify.n = 4000;
  cfg.verify.times = {0.5};
  cfg.verify.seed = 1;
  cfg.out_dir = out.string();
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("PretrainArtifactsAreDeterministicAcrossOutDirs") {
  const fs::path root = scratch_dir("pre");
  ExperimentConfig a = tiny_config(root / "a");
  ExperimentConfig b = tiny_config(root / "b");
  run_pretrain(a);
  run_pretrain(b);

  for (const char* name :
       {"teacher.ckpt", "pretrain_curve.csv", "teacher_samples.csv"}) {
    CHECK(slurp(root / "a" / name) == slurp(root / "b" / name));
  }

  const std::string curve = slurp(root / "a" / "pretrain_curve.csv");
  CHECK(curve.rfind("step,loss,field_mse\n", 0) == 0);

  const SampleSet scatter =
      read_samples_csv((root / "a" / "teacher_samples.csv").string());
  CHECK(scatter.dim == 2);
  CHECK(scatter.seed == 3);
  CHECK(scatter.source == "teacher-4step");
  CHECK(scatter.count() == 50);

  const Checkpoint ck = load_checkpoint((root / "a" / "teacher.ckpt").string());
  CHECK(ck.kind == "teacher");
  CHECK(ck.step == 10);
  CHECK(ck.has_ema());
  CHECK(ck.config_hash == config_hash(a));
  CHECK(ck.config_hash == config_hash(b));  // out_dir does not enter the key
}

TEST_CASE("PretrainRejectsMixtureNetworkDimensionMismatch") {
  ExperimentConfig cfg = tiny_config(scratch_dir("dim"));
  cfg.network.data_dim = 3;
  CHECK_THROWS_AS(run_pretrain(cfg), ConfigError);
}

TEST_CASE("DistillZeroStepsKeepsTeacherWeights") {
  const fs::path root = scratch_dir("dis0");
  ExperimentConfig cfg = tiny_config(root / "pre");
  run_pretrain(cfg);
  const std::string teacher = (root / "pre" / "teacher.ckpt").string();

  cfg.distill.steps = 0;
  cfg.out_dir = (root / "dis").string();
  run_distill(cfg, teacher);

  // Generator backbone must be exactly the teacher's EMA weights, and the
  // before/after scatters coincide because nothing moved.
  const Checkpoint tck = load_checkpoint(teacher);
  const Checkpoint gck =
      load_checkpoint((root / "dis" / "generator.ckpt").string());
  CHECK(gck.kind == "generator");
  CHECK(gck.params == tck.ema);
  CHECK(gck.ema == tck.ema);

  const SampleSet before =
      read_samples_csv((root / "dis" / "gen_before.csv").string());
  const SampleSet after =
      read_samples_csv((root / "dis" / "gen_after.csv").string());
  CHECK(before.source == "generator-init");
  CHECK(after.source == "generator-1step");
  CHECK(before.x == after.x);
}

TEST_CASE("DistillIsDeterministicAcrossOutDirs") {
  const fs::path root = scratch_dir("disdet");
  ExperimentConfig cfg = tiny_config(root / "pre");
  run_pretrain(cfg);
  const std::string teacher = (root / "pre" / "teacher.ckpt").string();

  ExperimentConfig da = cfg;
  da.out_dir = (root / "a").string();
  ExperimentConfig db = cfg;
  db.out_dir = (root / "b").string();
  run_distill(da, teacher);
  run_distill(db, teacher);
  for (const char* name : {"generator.ckpt", "online_flow.ckpt",
                           "distill_curve.csv", "gen_before.csv",
                           "gen_after.csv"}) {
    CHECK(slurp(root / "a" / name) == slurp(root / "b" / name));
  }
  const std::string curve = slurp(root / "a" / "distill_curve.csv");
  CHECK(curve.rfind("step,online_loss,gen_loss,l1,l2\n", 0) == 0);
}

TEST_CASE("DistillRejectsBadTeacherCheckpoints") {
  const fs::path root = scratch_dir("disbad");
  ExperimentConfig cfg = tiny_config(root / "pre");
  run_pretrain(cfg);
  const std::string teacher = (root / "pre" / "teacher.ckpt").string();

  SUBCASE("architecture mismatch") {
    ExperimentConfig other = cfg;
    other.network.hidden = {16, 8};
    other.out_dir = (root / "dis").string();
    CHECK_THROWS_AS(run_distill(other, teacher), ConfigError);
  }
  SUBCASE("generator checkpoint is not a teacher") {
    cfg.distill.steps = 0;
    cfg.out_dir = (root / "dis").string();
    run_distill(cfg, teacher);
    ExperimentConfig again = cfg;
    again.out_dir = (root / "dis2").string();
    CHECK_THROWS_AS(
        run_distill(again, (root / "dis" / "generator.ckpt").string()),
        ConfigError);
  }
}

TEST_CASE("AnalyticTeacherDistillRunsWithoutCheckpoint") {
  const fs::path root = scratch_dir("disan");
  ExperimentConfig cfg = tiny_config(root / "dis");
  run_distill(cfg, "");
  CHECK(fs::exists(root / "dis" / "generator.ckpt"));
  CHECK(fs::exists(root / "dis" / "online_flow.ckpt"));
  const Checkpoint ock =
      load_checkpoint((root / "dis" / "online_flow.ckpt").string());
  CHECK(ock.kind == "online-flow");
  CHECK_FALSE(ock.has_ema());
}

TEST_CASE("OneStepRolloutMatchesGeneratorAtInit") {
  // With t* = 1 and unit wrapper constants, the freshly initialized
  // generator is z - v(z, 1), exactly one Euler step of the teacher.
  const fs::path root = scratch_dir("onestep");
  ExperimentConfig cfg = tiny_config(root / "pre");
  run_pretrain(cfg);
  const std::string teacher = (root / "pre" / "teacher.ckpt").string();

  cfg.distill.steps = 0;
  cfg.distill.t_star = 1.0;
  cfg.out_dir = (root / "dis").string();
  run_distill(cfg, teacher);

  run_sample((root / "dis" / "generator.ckpt").string(), 7, std::nullopt, 9,
             (root / "sg").string());
  run_sample(teacher, 7, 1, 9, (root / "st").string());

  const SampleSet g = read_samples_csv((root / "sg" / "samples.csv").string());
  const SampleSet t = read_samples_csv((root / "st" / "samples.csv").string());
  CHECK(g.source == "generator-1step");
  CHECK(t.source == "teacher-1step");
  CHECK(g.x == t.x);
}

TEST_CASE("SampleHandlesEdgeCounts") {
  const fs::path root = scratch_dir("sedge");
  ExperimentConfig cfg = tiny_config(root / "pre");
  run_pretrain(cfg);
  const std::string teacher = (root / "pre" / "teacher.ckpt").string();

  SUBCASE("zero rows writes just the header") {
    run_sample(teacher, 0, std::nullopt, 5, (root / "s0").string());
    const std::string text = slurp(root / "s0" / "samples.csv");
    CHECK(text == "dim=2,seed=5,source=teacher-50step\n");
  }
  SUBCASE("negative count rejected") {
    CHECK_THROWS_AS(
        run_sample(teacher, -1, std::nullopt, 5, (root / "sn").string()),
        ConfigError);
  }
  SUBCASE("non-positive steps rejected") {
    CHECK_THROWS_AS(run_sample(teacher, 4, 0, 5, (root / "ss").string()),
                    ConfigError);
  }
  SUBCASE("missing checkpoint rejected") {
    CHECK_THROWS_AS(run_sample((root / "nope.ckpt").string(), 4, std::nullopt,
                               5, (root / "sm").string()),
                    ConfigError);
  }
}

TEST_CASE("SampleAbortsOnNonFiniteRollout") {
  // Saturating activations keep even absurdly large weights finite, so the
  // guaranteed way to poison the rollout is a NaN parameter.
  const fs::path root = scratch_dir("sabort");
  const MlpSpec spec{2, {8}, 2};
  VectorFieldNet net = VectorFieldNet::init(spec, 1);
  std::ranges::fill(net.params(), std::numeric_limits<double>::quiet_NaN());
  save_checkpoint(make_net_checkpoint("teacher", net, nullptr, 0, "0"),
                  (root / "huge.ckpt").string());
  CHECK_THROWS_AS(run_sample((root / "huge.ckpt").string(), 4, 3, 0,
                             (root / "out").string()),
                  NumericalError);
}

TEST_CASE("VerifyDriverWritesStructuredReport") {
  const fs::path root = scratch_dir("ver");
  ExperimentConfig cfg = tiny_config(root / "ver");
  const bool ok = run_verify(cfg);

  const nlohmann::json doc =
      nlohmann::json::parse(slurp(root / "ver" / "verify_report.json"));
  CHECK(doc.at("all_pass").get<bool>() == ok);
  CHECK(doc.at("suite").at("n").get<long>() == 4000);
  const auto& reports = doc.at("reports");
  REQUIRE(reports.size() == 4);  // product x2, gradient, full_gradient
  bool all = true;
  for (const auto& r : reports) {
    all = all && r.at("pass").get<bool>();
    // Product checks carry one entry per output component, gradient checks
    // one per generator parameter (2x2 matrix + 2 offsets).
    const std::size_t want = r.at("check") == "product" ? 2 : 6;
    CHECK(r.at("lhs").size() == want);
    CHECK(r.at("rhs").size() == want);
    CHECK(r.at("se_lhs").size() == want);
    CHECK(r.at("se_rhs").size() == want);
    CHECK(r.at("n").get<long>() >= 4000);
  }
  CHECK(all == ok);
}

TEST_CASE("EvalIdenticalFilesGiveZeroDistances") {
  const fs::path root = scratch_dir("eval0");
  Mat x(40, 2);
  Rng rng(11, 0);
  for (int i = 0; i < 40; ++i) {
    x(i, 0) = rng.normal();
    x(i, 1) = rng.normal();
  }
  const std::string path = (root / "a.csv").string();
  write_samples_csv(path, SampleSet{2, 11, "generator-1step", x});

  run_eval(path, path, nullptr, 0, 0, (root / "out").string());
  const std::string table = slurp(root / "out" / "eval.csv");
  CHECK(table.rfind("metric,value,n_a,n_b,projections,seed\n", 0) == 0);
  CHECK(table.find("sliced_w2,0,40,40") != std::string::npos);
  CHECK(table.find("energy_distance,0,40,40") != std::string::npos);
}

TEST_CASE("EvalAgainstConfiguredMixture") {
  const fs::path root = scratch_dir("evalmix");
  ExperimentConfig cfg = tiny_config(root / "out");

  GaussianMixture q0 = cfg.mixture.build();
  Rng rng(13, 1);
  Mat x = gmm_sample(q0, 300, rng);
  const std::string path = (root / "a.csv").string();
  write_samples_csv(path, SampleSet{2, 13, "oracle", x});

  run_eval(path, "", &cfg, 300, 0, (root / "out").string());
  const std::string table = slurp(root / "out" / "eval.csv");
  // Two draws from one Gaussian: distances are small but nonzero.
  CHECK(table.find("sliced_w2,") != std::string::npos);
  CHECK(table.find("energy_distance,") != std::string::npos);
  CHECK(table.find(",300,300,16,0") != std::string::npos);
}

TEST_CASE("EvalRejectsBadInputs") {
  const fs::path root = scratch_dir("evalbad");
  Mat a(5, 2);
  a.setZero();
  Mat b(5, 3);
  b.setZero();
  const std::string pa = (root / "a.csv").string();
  const std::string pb = (root / "b.csv").string();
  write_samples_csv(pa, SampleSet{2, 0, "x", a});
  write_samples_csv(pb, SampleSet{3, 0, "y", b});

  SUBCASE("dimension mismatch between files") {
    CHECK_THROWS_AS(run_eval(pa, pb, nullptr, 0, 0, (root / "o").string()),
                    ConfigError);
  }
  SUBCASE("mixture comparison needs a config") {
    CHECK_THROWS_AS(run_eval(pa, "", nullptr, 0, 0, (root / "o").string()),
                    ConfigError);
  }
  SUBCASE("mixture dimension mismatch") {
    ExperimentConfig cfg = tiny_config(root / "o");
    CHECK_THROWS_AS(run_eval(pb, "", &cfg, 0, 0, (root / "o").string()),
                    ConfigError);
  }
  SUBCASE("malformed row names its line") {
    std::ofstream((root / "bad.csv").string())
        << "dim=2,seed=0,source=x\n1.0,2.0\n1.0,zz\n";
    try {
      run_eval((root / "bad.csv").string(), pa, nullptr, 0, 0,
               (root / "o").string());
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }
  }
}
