#include "flowgm/config.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string_view>

#include "json.hpp"

#include "flowgm/errors.hpp"

namespace flowgm {

namespace {

using nlohmann::json;

// Read-side cursor keeping the field path for error messages.
struct Cursor {
  const json* node;
  std::string path;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("config: " + (path.empty() ? "<root>" : path) + ": " +
                      msg);
  }

  Cursor key(std::string_view k) const {
    if (!node->is_object()) fail("expected an object");
    const auto it = node->find(k);
    if (it == node->end()) fail("missing field '" + std::string(k) + "'");
    return {&*it, path.empty() ? std::string(k) : path + "." + std::string(k)};
  }

  void allow_only(std::initializer_list<std::string_view> keys) const {
    if (!node->is_object()) fail("expected an object");
    for (const auto& item : node->items()) {
      bool known = false;
      for (const auto k : keys) known = known || item.key() == k;
      if (!known) fail("unknown field '" + item.key() + "'");
    }
  }

  Cursor item(std::size_t i) const {
    return {&(*node)[i], path + "[" + std::to_string(i) + "]"};
  }

  std::size_t array_size() const {
    if (!node->is_array()) fail("expected an array");
    return node->size();
  }

  double num() const {
    if (!node->is_number()) fail("expected a number");
    return node->get<double>();
  }

  long integer() const {
    if (!node->is_number_integer()) fail("expected an integer");
    return node->get<long>();
  }

  std::uint64_t u64() const {
    if (node->is_number_unsigned()) return node->get<std::uint64_t>();
    if (node->is_number_integer() && node->get<long long>() >= 0) {
      return static_cast<std::uint64_t>(node->get<long long>());
    }
    fail("expected a non-negative integer");
  }

  std::string str() const {
    if (!node->is_string()) fail("expected a string");
    return node->get<std::string>();
  }

  std::optional<double> opt_num() const {
    if (node->is_null()) return std::nullopt;
    return num();
  }

  std::vector<double> num_vec() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < array_size(); ++i) out.push_back(item(i).num());
    return out;
  }

  std::vector<int> int_vec() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < array_size(); ++i) {
      out.push_back(static_cast<int>(item(i).integer()));
    }
    return out;
  }
};

json opt_to_json(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

json tdist_to_json(const TimeDistribution& d) {
  json j;
  j["kind"] = d.kind == TimeDistribution::Kind::kUniform ? "uniform"
                                                         : "logit_normal";
  j["location"] = d.m;
  j["scale"] = d.s;
  j["clamp_lo"] = opt_to_json(d.clamp_lo);
  j["clamp_hi"] = opt_to_json(d.clamp_hi);
  return j;
}

TimeDistribution tdist_from(const Cursor& c) {
  c.allow_only({"kind", "location", "scale", "clamp_lo", "clamp_hi"});
  const std::string kind = c.key("kind").str();
  const double m = c.key("location").num();
  const double s = c.key("scale").num();
  const auto lo = c.key("clamp_lo").opt_num();
  const auto hi = c.key("clamp_hi").opt_num();
  if (kind == "uniform") {
    auto d = TimeDistribution::uniform(lo, hi);
    d.m = m;
    d.s = s;
    return d;
  }
  if (kind == "logit_normal") return TimeDistribution::logit_normal(m, s, lo, hi);
  c.key("kind").fail("expected 'uniform' or 'logit_normal'");
}

json adam_to_json(const AdamConfig& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

AdamConfig adam_from(const Cursor& c) {
  c.allow_only({"lr", "beta1", "beta2", "eps"});
  AdamConfig a;
  a.lr = c.key("lr").num();
  a.beta1 = c.key("beta1").num();
  a.beta2 = c.key("beta2").num();
  a.eps = c.key("eps").num();
  return a;
}

json mixture_to_json(const MixtureSpec& m) {
  return {{"weights", m.weights}, {"means", m.means},
          {"variances", m.variances}};
}

MixtureSpec mixture_from(const Cursor& c) {
  c.allow_only({"weights", "means", "variances"});
  MixtureSpec m;
  m.weights = c.key("weights").num_vec();
  const auto means = c.key("means");
  for (std::size_t i = 0; i < means.array_size(); ++i) {
    m.means.push_back(means.item(i).num_vec());
  }
  const auto variances = c.key("variances");
  for (std::size_t i = 0; i < variances.array_size(); ++i) {
    m.variances.push_back(variances.item(i).num_vec());
  }
  return m;
}

json network_to_json(const MlpSpec& s) {
  return {{"data_dim", s.data_dim}, {"hidden", s.hidden},
          {"embed_pairs", s.embed_pairs}};
}

MlpSpec network_from(const Cursor& c) {
  c.allow_only({"data_dim", "hidden", "embed_pairs"});
  MlpSpec s;
  s.data_dim = static_cast<int>(c.key("data_dim").integer());
  s.hidden = c.key("hidden").int_vec();
  s.embed_pairs = static_cast<int>(c.key("embed_pairs").integer());
  return s;
}

json pretrain_to_json(const PretrainConfig& p) {
  json j;
  j["steps"] = p.steps;
  j["batch"] = p.batch;
  j["adam"] = adam_to_json(p.adam);
  j["ema_decay"] = p.ema_decay;
  j["tdist"] = tdist_to_json(p.tdist);
  j["log_interval"] = p.log_interval;
  j["probe_samples"] = p.probe_samples;
  return j;
}

PretrainConfig pretrain_from(const Cursor& c) {
  c.allow_only({"steps", "batch", "adam", "ema_decay", "tdist",
                "log_interval", "probe_samples"});
  PretrainConfig p;
  p.steps = static_cast<int>(c.key("steps").integer());
  p.batch = static_cast<int>(c.key("batch").integer());
  p.adam = adam_from(c.key("adam"));
  p.ema_decay = c.key("ema_decay").num();
  p.tdist = tdist_from(c.key("tdist"));
  p.log_interval = static_cast<int>(c.key("log_interval").integer());
  p.probe_samples = static_cast<int>(c.key("probe_samples").integer());
  return p;
}

json distill_to_json(const DistillConfig& d) {
  json j;
  j["steps"] = d.steps;
  j["batch"] = d.batch;
  j["online_updates"] = d.online_updates;
  j["gen_adam"] = adam_to_json(d.gen_adam);
  j["online_adam"] = adam_to_json(d.online_adam);
  j["lambda1"] = d.weights.l1;
  j["lambda2"] = d.weights.l2;
  j["loss_scale"] = d.loss_scale;
  j["fgm_tdist"] = tdist_to_json(d.fgm_tdist);
  j["online_tdist"] = tdist_to_json(d.online_tdist);
  j["final_lr_fraction"] = d.final_lr_fraction;
  j["t_star"] = d.t_star;
  j["c_in"] = d.c_in;
  j["c_skip"] = d.c_skip;
  j["c_out"] = opt_to_json(d.c_out);
  j["c_noise"] = opt_to_json(d.c_noise);
  j["ema_decay"] = d.ema_decay;
  j["log_interval"] = d.log_interval;
  return j;
}

DistillConfig distill_from(const Cursor& c) {
  c.allow_only({"steps", "batch", "online_updates", "gen_adam", "online_adam",
                "lambda1", "lambda2", "loss_scale", "fgm_tdist",
                "online_tdist", "final_lr_fraction", "t_star", "c_in",
                "c_skip", "c_out", "c_noise", "ema_decay", "log_interval"});
  DistillConfig d;
  d.steps = static_cast<int>(c.key("steps").integer());
  d.batch = static_cast<int>(c.key("batch").integer());
  d.online_updates = static_cast<int>(c.key("online_updates").integer());
  d.gen_adam = adam_from(c.key("gen_adam"));
  d.online_adam = adam_from(c.key("online_adam"));
  d.weights.l1 = c.key("lambda1").num();
  d.weights.l2 = c.key("lambda2").num();
  d.loss_scale = c.key("loss_scale").num();
  d.fgm_tdist = tdist_from(c.key("fgm_tdist"));
  d.online_tdist = tdist_from(c.key("online_tdist"));
  d.final_lr_fraction = c.key("final_lr_fraction").num();
  d.t_star = c.key("t_star").num();
  d.c_in = c.key("c_in").num();
  d.c_skip = c.key("c_skip").num();
  d.c_out = c.key("c_out").opt_num();
  d.c_noise = c.key("c_noise").opt_num();
  d.ema_decay = c.key("ema_decay").num();
  d.log_interval = static_cast<int>(c.key("log_interval").integer());
  return d;
}

json metrics_to_json(const MetricConfig& m) {
  return {{"samples", m.samples}, {"projections", m.projections},
          {"teacher_steps", m.teacher_steps}};
}

MetricConfig metrics_from(const Cursor& c) {
  c.allow_only({"samples", "projections", "teacher_steps"});
  MetricConfig m;
  m.samples = c.key("samples").integer();
  m.projections = static_cast<int>(c.key("projections").integer());
  m.teacher_steps = static_cast<int>(c.key("teacher_steps").integer());
  return m;
}

json verify_to_json(const VerifySuiteConfig& v) {
  json j;
  j["configs"] = v.configs;
  j["n"] = v.n;
  j["times"] = v.times;
  j["fd_step"] = v.fd_step;
  j["seed"] = v.seed;
  return j;
}

VerifySuiteConfig verify_from(const Cursor& c) {
  c.allow_only({"configs", "n", "times", "fd_step", "seed"});
  VerifySuiteConfig v;
  v.configs = static_cast<int>(c.key("configs").integer());
  v.n = c.key("n").integer();
  v.times = c.key("times").num_vec();
  v.fd_step = c.key("fd_step").num();
  v.seed = c.key("seed").u64();
  return v;
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["mixture"] = mixture_to_json(cfg.mixture);
  j["network"] = network_to_json(cfg.network);
  j["pretrain"] = pretrain_to_json(cfg.pretrain);
  j["distill"] = distill_to_json(cfg.distill);
  j["metrics"] = metrics_to_json(cfg.metrics);
  j["verify"] = verify_to_json(cfg.verify);
  j["out_dir"] = cfg.out_dir;
  j["seed"] = cfg.seed;
  return j;
}

}  // namespace

GaussianMixture MixtureSpec::build() const {
  std::vector<Vec> mu, var;
  for (const auto& m : means) {
    mu.push_back(Eigen::Map<const Vec>(m.data(), static_cast<long>(m.size())));
  }
  for (const auto& v : variances) {
    var.push_back(Eigen::Map<const Vec>(v.data(), static_cast<long>(v.size())));
  }
  return GaussianMixture(weights, mu, var);
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not parseable: ") + e.what());
  }
  const Cursor root{&j, ""};
  root.allow_only({"mixture", "network", "pretrain", "distill", "metrics",
                   "verify", "out_dir", "seed"});
  ExperimentConfig cfg;
  cfg.mixture = mixture_from(root.key("mixture"));
  cfg.network = network_from(root.key("network"));
  cfg.pretrain = pretrain_from(root.key("pretrain"));
  cfg.distill = distill_from(root.key("distill"));
  cfg.metrics = metrics_from(root.key("metrics"));
  cfg.verify = verify_from(root.key("verify"));
  cfg.out_dir = root.key("out_dir").str();
  cfg.seed = root.key("seed").u64();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("config: cannot write '" + path + "'");
  out << serialize_config(cfg);
}

std::string config_hash(const ExperimentConfig& cfg) {
  // Where the artifacts land must not change what was trained, so the
  // output directory is excluded before hashing.
  ExperimentConfig keyed = cfg;
  keyed.out_dir.clear();
  const std::string s = serialize_config(keyed);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = hex[h & 0xf];
    h >>= 4;
  }
  return out;
}

ExperimentConfig ring8_preset() {
  ExperimentConfig cfg;
  const int k = 8;
  const double radius = 4.0;
  const double sigma = 0.3;
  for (int i = 0; i < k; ++i) {
    const double angle = 2.0 * M_PI * static_cast<double>(i) / k;
    cfg.mixture.weights.push_back(1.0 / k);
    cfg.mixture.means.push_back({radius * std::cos(angle),
                                 radius * std::sin(angle)});
    cfg.mixture.variances.push_back({sigma * sigma, sigma * sigma});
  }
  cfg.out_dir = "runs/ring8";
  return cfg;
}

ExperimentConfig two_moons_preset() {
  ExperimentConfig cfg;
  const int per_moon = 5;
  const double sigma = 0.15;
  for (int i = 0; i < per_moon; ++i) {
    const double angle = M_PI * (static_cast<double>(i) + 0.5) / per_moon;
    cfg.mixture.weights.push_back(0.1);
    cfg.mixture.means.push_back({2.0 * std::cos(angle),
                                 2.0 * std::sin(angle) - 0.5});
    cfg.mixture.variances.push_back({sigma * sigma, sigma * sigma});
  }
  for (int i = 0; i < per_moon; ++i) {
    const double angle = M_PI * (static_cast<double>(i) + 0.5) / per_moon;
    cfg.mixture.weights.push_back(0.1);
    cfg.mixture.means.push_back({2.0 - 2.0 * std::cos(angle),
                                 0.5 - 2.0 * std::sin(angle)});
    cfg.mixture.variances.push_back({sigma * sigma, sigma * sigma});
  }
  cfg.out_dir = "runs/two-moons-gmm";
  return cfg;
}

ExperimentConfig single_gauss_preset() {
  ExperimentConfig cfg;
  cfg.mixture.weights = {1.0};
  cfg.mixture.means = {{1.5, -0.5}};
  cfg.mixture.variances = {{0.25, 0.25}};
  cfg.out_dir = "runs/single-gauss";
  return cfg;
}

}  // namespace flowgm
