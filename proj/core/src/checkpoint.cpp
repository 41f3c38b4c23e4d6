#include "flowgm/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "flowgm/errors.hpp"

namespace flowgm {

namespace {

using nlohmann::json;

constexpr char kMagic[9] = "FGMCKPT1";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

std::uint64_t get_u64(const std::string& bytes, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(
             static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw ConfigError("checkpoint: " + path + ": " + msg);
}

bool known_kind(const std::string& kind) {
  return kind == "teacher" || kind == "online-flow" || kind == "generator";
}

std::size_t expected_params(const MlpSpec& spec, const std::string& path) {
  try {
    return VectorFieldNet(spec).param_count();
  } catch (const std::exception& e) {
    fail(path, std::string("invalid architecture echo: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  if (!known_kind(c.kind)) fail(path, "unknown kind '" + c.kind + "'");
  if (c.params.empty()) fail(path, "no parameters to save");
  if (!c.ema.empty() && c.ema.size() != c.params.size()) {
    fail(path, "EMA array size differs from the parameter array");
  }

  json arch;
  arch["data_dim"] = c.spec.data_dim;
  arch["hidden"] = c.spec.hidden;
  arch["embed_pairs"] = c.spec.embed_pairs;
  if (c.kind == "generator") {
    arch["t_star"] = c.t_star;
    arch["c_in"] = c.c_in;
    arch["c_skip"] = c.c_skip;
    arch["c_out"] = c.c_out;
    arch["c_noise"] = c.c_noise;
  }

  json header;
  header["kind"] = c.kind;
  header["arch"] = arch;
  header["arrays"] = c.has_ema() ? json::array({"params", "ema"})
                                 : json::array({"params"});
  header["sizes"] = c.has_ema()
                        ? json::array({c.params.size(), c.ema.size()})
                        : json::array({c.params.size()});
  header["step"] = c.step;
  header["config_hash"] = c.config_hash;

  const std::string text = header.dump();
  std::string bytes;
  bytes.reserve(16 + text.size() + 8 * (c.params.size() + c.ema.size()));
  bytes.append(kMagic, 8);
  put_u64(bytes, text.size());
  bytes += text;
  for (const double d : c.params) put_u64(bytes, std::bit_cast<std::uint64_t>(d));
  for (const double d : c.ema) put_u64(bytes, std::bit_cast<std::uint64_t>(d));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(path, "write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();

  if (bytes.size() < 16 || bytes.compare(0, 8, kMagic, 8) != 0) {
    fail(path, "not a checkpoint file (bad magic)");
  }
  const std::uint64_t header_len = get_u64(bytes, 8);
  if (16 + header_len > bytes.size()) fail(path, "truncated header");

  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::parse_error& e) {
    fail(path, std::string("unreadable header: ") + e.what());
  }

  Checkpoint c;
  try {
    c.kind = header.at("kind").get<std::string>();
    const json& arch = header.at("arch");
    c.spec.data_dim = arch.at("data_dim").get<int>();
    c.spec.hidden = arch.at("hidden").get<std::vector<int>>();
    c.spec.embed_pairs = arch.at("embed_pairs").get<int>();
    if (c.kind == "generator") {
      c.t_star = arch.at("t_star").get<double>();
      c.c_in = arch.at("c_in").get<double>();
      c.c_skip = arch.at("c_skip").get<double>();
      c.c_out = arch.at("c_out").get<double>();
      c.c_noise = arch.at("c_noise").get<double>();
    }
    c.step = header.at("step").get<long>();
    c.config_hash = header.at("config_hash").get<std::string>();
  } catch (const json::exception& e) {
    fail(path, std::string("malformed header: ") + e.what());
  }
  if (!known_kind(c.kind)) fail(path, "unknown kind '" + c.kind + "'");

  const auto arrays = header.value("arrays", json::array());
  const auto sizes = header.value("sizes", json::array());
  if (!arrays.is_array() || !sizes.is_array() ||
      arrays.size() != sizes.size() || arrays.empty() || arrays.size() > 2 ||
      arrays[0] != "params" || (arrays.size() == 2 && arrays[1] != "ema")) {
    fail(path, "malformed array declaration");
  }

  std::size_t need = 0;
  std::vector<std::size_t> counts;
  for (const auto& s : sizes) {
    if (!s.is_number_unsigned()) fail(path, "malformed array sizes");
    counts.push_back(s.get<std::size_t>());
    need += counts.back();
  }
  if (bytes.size() != 16 + header_len + 8 * need) {
    fail(path, "array bytes do not match the declared sizes");
  }

  const std::size_t expect = expected_params(c.spec, path);
  if (counts[0] != expect) {
    fail(path, "parameter count " + std::to_string(counts[0]) +
                   " does not match the architecture echo (expected " +
                   std::to_string(expect) + ")");
  }
  if (counts.size() == 2 && counts[1] != counts[0]) {
    fail(path, "EMA array size differs from the parameter array");
  }

  std::size_t pos = 16 + header_len;
  c.params.resize(counts[0]);
  for (double& d : c.params) {
    d = std::bit_cast<double>(get_u64(bytes, pos));
    pos += 8;
  }
  if (counts.size() == 2) {
    c.ema.resize(counts[1]);
    for (double& d : c.ema) {
      d = std::bit_cast<double>(get_u64(bytes, pos));
      pos += 8;
    }
  }
  return c;
}

Checkpoint make_net_checkpoint(const std::string& kind,
                               const VectorFieldNet& net,
                               const VectorFieldNet* ema, long step,
                               const std::string& config_hash) {
  Checkpoint c;
  c.kind = kind;
  c.spec = net.spec();
  c.step = step;
  c.config_hash = config_hash;
  c.params = net.params();
  if (ema != nullptr) {
    if (!(ema->spec() == net.spec())) {
      throw ConfigError("checkpoint: EMA network architecture differs");
    }
    c.ema = ema->params();
  }
  return c;
}

Checkpoint make_generator_checkpoint(const OneStepGenerator& gen,
                                     const OneStepGenerator* ema, long step,
                                     const std::string& config_hash) {
  Checkpoint c = make_net_checkpoint(
      "generator", gen.backbone, ema != nullptr ? &ema->backbone : nullptr,
      step, config_hash);
  c.t_star = gen.t_star;
  c.c_in = gen.c_in;
  c.c_skip = gen.c_skip;
  c.c_out = gen.c_out;
  c.c_noise = gen.c_noise;
  return c;
}

VectorFieldNet net_from_checkpoint(const Checkpoint& c, bool prefer_ema) {
  VectorFieldNet net(c.spec);
  net.params() = (prefer_ema && c.has_ema()) ? c.ema : c.params;
  return net;
}

OneStepGenerator generator_from_checkpoint(const Checkpoint& c,
                                           bool prefer_ema) {
  if (c.kind != "generator") {
    throw ConfigError("checkpoint: kind '" + c.kind +
                      "' is not a generator checkpoint");
  }
  OneStepGenerator gen;
  gen.backbone = net_from_checkpoint(c, prefer_ema);
  gen.t_star = c.t_star;
  gen.c_in = c.c_in;
  gen.c_skip = c.c_skip;
  gen.c_out = c.c_out;
  gen.c_noise = c.c_noise;
  return gen;
}

void require_arch(const Checkpoint& c, const MlpSpec& spec) {
  if (!(c.spec == spec)) {
    throw ConfigError(
        "checkpoint: architecture echo does not match the configured "
        "network (data_dim " +
        std::to_string(c.spec.data_dim) + " vs " + std::to_string(spec.data_dim) +
        ", hidden layers " + std::to_string(c.spec.hidden.size()) + " vs " +
        std::to_string(spec.hidden.size()) + ", embed_pairs " +
        std::to_string(c.spec.embed_pairs) + " vs " +
        std::to_string(spec.embed_pairs) + ")");
  }
}

}  // namespace flowgm
