#include "flowgm/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

#include "flowgm/errors.hpp"
#include "flowgm/tape.hpp"

namespace flowgm {

namespace {

using tape::Graph;
using tape::NodeId;

void check_time(double t) {
  if (!(t > 0.0 && t <= 1.0)) {
    throw DomainError("verify: time must lie in (0, 1], got " +
                      std::to_string(t));
  }
}

int param_count(const LinearGenerator& gen) {
  return gen.dim() * gen.latent_dim() + gen.dim();
}

// Parameters are ordered A row-major, then b.
LinearGenerator bump(const LinearGenerator& gen, int j, double step) {
  LinearGenerator out = gen;
  const int k = gen.latent_dim();
  const int na = gen.dim() * k;
  if (j < na) {
    out.a(j / k, j % k) += step;
  } else {
    out.b[j - na] += step;
  }
  return out;
}

void draw_block(Rng& rng, Mat& z, Mat& eps) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = rng.normal();
    for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = rng.normal();
  }
}

Mat push_forward(const LinearGenerator& gen, const Mat& z) {
  return (z * gen.a.transpose()).rowwise() + gen.b.transpose();
}

Mat apply_affine(const Mat& m, const Vec& v, const Mat& x) {
  Mat out = x * m.transpose();
  out.rowwise() += v.transpose();
  return out;
}

// Mean and standard error from a list of equally weighted block means.
void reduce_blocks(const std::vector<std::vector<double>>& blocks,
                   std::vector<double>& mean, std::vector<double>& se) {
  const std::size_t c = blocks.size();
  const std::size_t p = blocks.front().size();
  mean.assign(p, 0.0);
  se.assign(p, 0.0);
  for (const auto& b : blocks) {
    for (std::size_t j = 0; j < p; ++j) mean[j] += b[j];
  }
  for (std::size_t j = 0; j < p; ++j) mean[j] /= static_cast<double>(c);
  if (c < 2) return;
  for (const auto& b : blocks) {
    for (std::size_t j = 0; j < p; ++j) {
      const double d = b[j] - mean[j];
      se[j] += d * d;
    }
  }
  for (std::size_t j = 0; j < p; ++j) {
    se[j] = std::sqrt(se[j] / static_cast<double>(c - 1) /
                      static_cast<double>(c));
  }
}

void finish_pass(IdentityReport& r) {
  r.pass = true;
  for (std::size_t j = 0; j < r.lhs.size(); ++j) {
    const double cse =
        std::sqrt(r.se_lhs[j] * r.se_lhs[j] + r.se_rhs[j] * r.se_rhs[j]);
    if (std::abs(r.lhs[j] - r.rhs[j]) > 3.0 * cse) r.pass = false;
  }
}

// One reusable block graph evaluating the distillation loss terms for a
// linear generator: x_0 = A z + b with live (A, b), x_t reparameterized,
// the field snapshot frozen as constants, the teacher bound with live x.
struct BlockGraph {
  Graph g;
  std::vector<NodeId> z_leaf, eps_leaf;
  NodeId a_param = tape::kNoNode;
  NodeId b_param = tape::kNoNode;
  NodeId loss = tape::kNoNode;

  BlockGraph(const LinearGenerator& gen, const VelocityField& teacher,
             double t, long rows, bool include_l1) {
    const int d = gen.dim();
    const int k = gen.latent_dim();
    std::vector<double> a_flat(static_cast<std::size_t>(d) * k);
    for (int r = 0; r < d; ++r) {
      for (int cidx = 0; cidx < k; ++cidx) a_flat[r * k + cidx] = gen.a(r, cidx);
    }
    a_param = g.parameter(a_flat, tape::Shape{static_cast<std::uint32_t>(d),
                                              static_cast<std::uint32_t>(k)});
    std::vector<double> b_flat(gen.b.data(), gen.b.data() + d);
    b_param = g.parameter(b_flat);

    const auto coeffs = linear_field_coeffs(gen, t);
    std::vector<double> c_flat(static_cast<std::size_t>(d) * d);
    for (int r = 0; r < d; ++r) {
      for (int cidx = 0; cidx < d; ++cidx) c_flat[r * d + cidx] = coeffs.c_mat(r, cidx);
    }
    const auto c_mat = g.constant(c_flat, tape::Shape{
                                              static_cast<std::uint32_t>(d),
                                              static_cast<std::uint32_t>(d)});
    const auto c_vec = g.constant(
        std::vector<double>(coeffs.c_vec.data(), coeffs.c_vec.data() + d));

    auto binding = teacher.bind(g);
    const std::vector<double> zero_k(k, 0.0), zero_d(d, 0.0);
    NodeId acc = tape::kNoNode;
    for (long i = 0; i < rows; ++i) {
      const auto z = g.constant(zero_k);
      const auto eps = g.constant(zero_d);
      z_leaf.push_back(z);
      eps_leaf.push_back(eps);
      const auto x0 = g.affine(a_param, z, b_param);
      const auto xt = g.add(g.scale(x0, 1.0 - t), g.scale(eps, t));
      const auto snap = g.affine(c_mat, xt, c_vec);
      const auto u = binding->velocity(xt, t);
      const auto u_cond = conditional_field_node(g, xt, x0, t);
      const auto diff = g.sub(u, snap);
      const auto l2 = g.scale(g.dot(diff, g.sub(snap, u_cond)), 2.0);
      const auto item = include_l1 ? g.add(g.sum(g.square(diff)), l2) : l2;
      acc = (acc == tape::kNoNode) ? item : g.add(acc, item);
    }
    loss = g.scale(acc, 1.0 / static_cast<double>(rows));
  }

  // Loads a block of draws, recomputes, and returns the mean parameter
  // gradient (A row-major, then b).
  std::vector<double> block_grad(const Mat& z, const Mat& eps) {
    std::vector<double> zi(z.cols()), ei(eps.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      for (Eigen::Index j = 0; j < z.cols(); ++j) zi[j] = z(i, j);
      for (Eigen::Index j = 0; j < eps.cols(); ++j) ei[j] = eps(i, j);
      g.set_value(z_leaf[static_cast<std::size_t>(i)], zi);
      g.set_value(eps_leaf[static_cast<std::size_t>(i)], ei);
    }
    g.recompute();
    const auto map = g.backward(loss);
    const auto& ga = map.at(a_param);
    const auto& gb = map.at(b_param);
    std::vector<double> flat(ga.begin(), ga.end());
    flat.insert(flat.end(), gb.begin(), gb.end());
    return flat;
  }
};

long pick_block(long n) {
  return std::max<long>(1, std::min<long>(8192, n / 8));
}

std::string fmt_t(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

std::string param_names(const LinearGenerator& gen) {
  std::string s = "params=[";
  for (int r = 0; r < gen.dim(); ++r) {
    for (int c = 0; c < gen.latent_dim(); ++c) {
      s += "a" + std::to_string(r) + std::to_string(c) + " ";
    }
  }
  for (int r = 0; r < gen.dim(); ++r) s += "b" + std::to_string(r) + " ";
  s.back() = ']';
  return s;
}

}  // namespace

TestFunctionSpec TestFunctionSpec::random(int d, int k, bool param_dependent,
                                          Rng& rng) {
  TestFunctionSpec f;
  f.m.resize(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) f.m(i, j) = 0.6 * rng.normal();
  }
  f.c.resize(d);
  for (int i = 0; i < d; ++i) f.c[i] = 0.5 * rng.normal();
  f.h = Vec::Zero(k);
  if (param_dependent) {
    f.alpha = 0.7;
    for (int i = 0; i < k; ++i) f.h[i] = rng.normal();
    f.s = 0.5 * rng.normal();
  }
  return f;
}

Vec TestFunctionSpec::offset(const LinearGenerator& gen) const {
  Vec off = c;
  if (alpha != 0.0) off += alpha * (gen.a * h + s * gen.b);
  return off;
}

double IdentityReport::max_sigma() const {
  double worst = 0.0;
  for (std::size_t j = 0; j < lhs.size(); ++j) {
    const double cse =
        std::sqrt(se_lhs[j] * se_lhs[j] + se_rhs[j] * se_rhs[j]);
    const double diff = std::abs(lhs[j] - rhs[j]);
    if (diff == 0.0) continue;
    worst = std::max(
        worst, cse > 0.0 ? diff / cse : std::numeric_limits<double>::infinity());
  }
  return worst;
}

IdentityReport check_product_identity(const LinearGenerator& gen,
                                      const TestFunctionSpec& f, double t,
                                      long n, Rng& rng) {
  check_time(t);
  if (n < 2) throw DomainError("check_product_identity: n must be >= 2");
  const int d = gen.dim();
  const int k = gen.latent_dim();
  if (f.m.rows() != d || f.m.cols() != d || f.c.size() != d ||
      (f.alpha != 0.0 && f.h.size() != k)) {
    throw DomainError("check_product_identity: probe dimensions mismatch");
  }

  const auto coeffs = linear_field_coeffs(gen, t);
  const Vec off = f.offset(gen);
  const std::uint64_t base = rng.bits();

  Vec sum_l = Vec::Zero(d), sq_l = Vec::Zero(d);
  Vec sum_r = Vec::Zero(d), sq_r = Vec::Zero(d);
  const long block = 65536;
  long done = 0;
  std::uint64_t blk = 0;
  while (done < n) {
    const long m = std::min(block, n - done);
    Mat z(m, k), eps(m, d);
    Rng block_rng(base, blk++);
    draw_block(block_rng, z, eps);
    const Mat x0 = push_forward(gen, z);
    const Mat xt = (1.0 - t) * x0 + t * eps;
    const Mat v = apply_affine(coeffs.c_mat, coeffs.c_vec, xt);
    const Mat uc = (xt - x0) / t;
    const Mat fx = apply_affine(f.m, off, xt);
    for (int j = 0; j < d; ++j) {
      const auto lj = (fx.col(j).array() * v.col(j).array()).eval();
      const auto rj = (fx.col(j).array() * uc.col(j).array()).eval();
      sum_l[j] += lj.sum();
      sq_l[j] += lj.square().sum();
      sum_r[j] += rj.sum();
      sq_r[j] += rj.square().sum();
    }
    done += m;
  }

  IdentityReport rep;
  rep.check = "product";
  rep.detail = "d=" + std::to_string(d) + " k=" + std::to_string(k) +
               " t=" + fmt_t(t) +
               (f.alpha != 0.0 ? " f=param-coupled" : " f=fixed");
  rep.n = n;
  const double nn = static_cast<double>(n);
  for (int j = 0; j < d; ++j) {
    const double ml = sum_l[j] / nn, mr = sum_r[j] / nn;
    rep.lhs.push_back(ml);
    rep.rhs.push_back(mr);
    const double vl = std::max(0.0, (sq_l[j] - nn * ml * ml) / (nn - 1.0));
    const double vr = std::max(0.0, (sq_r[j] - nn * mr * mr) / (nn - 1.0));
    rep.se_lhs.push_back(std::sqrt(vl / nn));
    rep.se_rhs.push_back(std::sqrt(vr / nn));
  }
  finish_pass(rep);
  return rep;
}

IdentityReport check_gradient_identity(const LinearGenerator& gen,
                                       const VelocityField& teacher, double t,
                                       long n, double fd_step, Rng& rng) {
  check_time(t);
  if (fd_step <= 0.0) {
    throw DomainError("check_gradient_identity: fd_step must be positive");
  }
  if (n < 2) throw DomainError("check_gradient_identity: n must be >= 2");
  if (teacher.dim() != gen.dim()) {
    throw DomainError("check_gradient_identity: teacher dimension mismatch");
  }
  const int d = gen.dim();
  const int k = gen.latent_dim();
  const int p = param_count(gen);

  const auto coeffs = linear_field_coeffs(gen, t);
  // Parameter Jacobian of the closed-form field at fixed evaluation points.
  std::vector<Mat> dmat(p);
  std::vector<Vec> dvec(p);
  for (int j = 0; j < p; ++j) {
    const auto cp = linear_field_coeffs(bump(gen, j, fd_step), t);
    const auto cm = linear_field_coeffs(bump(gen, j, -fd_step), t);
    dmat[j] = (cp.c_mat - cm.c_mat) / (2.0 * fd_step);
    dvec[j] = (cp.c_vec - cm.c_vec) / (2.0 * fd_step);
  }

  const long block = pick_block(n);
  const long blocks = (n + block - 1) / block;
  BlockGraph tape_side(gen, teacher, t, block, /*include_l1=*/false);

  const std::uint64_t base = rng.bits();
  std::vector<std::vector<double>> lhs_blocks, rhs_blocks;
  for (long c = 0; c < blocks; ++c) {
    Mat z(block, k), eps(block, d);
    Rng block_rng(base, static_cast<std::uint64_t>(c));
    draw_block(block_rng, z, eps);

    const Mat x0 = push_forward(gen, z);
    const Mat xt = (1.0 - t) * x0 + t * eps;
    const Mat v = apply_affine(coeffs.c_mat, coeffs.c_vec, xt);
    const Mat r = v - teacher.velocity_batch(xt, t);
    std::vector<double> lhs(p);
    for (int j = 0; j < p; ++j) {
      const Mat w = apply_affine(dmat[j], dvec[j], xt);
      lhs[j] = 2.0 * r.cwiseProduct(w).sum() / static_cast<double>(block);
    }
    lhs_blocks.push_back(std::move(lhs));
    rhs_blocks.push_back(tape_side.block_grad(z, eps));
  }

  IdentityReport rep;
  rep.check = "gradient";
  rep.detail = "d=" + std::to_string(d) + " k=" + std::to_string(k) +
               " t=" + fmt_t(t) + " " + param_names(gen);
  rep.n = blocks * block;
  reduce_blocks(lhs_blocks, rep.lhs, rep.se_lhs);
  reduce_blocks(rhs_blocks, rep.rhs, rep.se_rhs);
  finish_pass(rep);
  return rep;
}

IdentityReport check_full_gradient(const LinearGenerator& gen,
                                   const VelocityField& teacher,
                                   const std::vector<double>& t_grid, long n,
                                   double fd_step, Rng& rng) {
  if (t_grid.empty()) {
    throw DomainError("check_full_gradient: empty time grid");
  }
  for (const double t : t_grid) check_time(t);
  if (fd_step <= 0.0) {
    throw DomainError("check_full_gradient: fd_step must be positive");
  }
  if (n < 2) throw DomainError("check_full_gradient: n must be >= 2");
  if (teacher.dim() != gen.dim()) {
    throw DomainError("check_full_gradient: teacher dimension mismatch");
  }
  const int d = gen.dim();
  const int k = gen.latent_dim();
  const int p = param_count(gen);
  const double grid_w = 1.0 / static_cast<double>(t_grid.size());

  const long block = pick_block(n);
  const long blocks = (n + block - 1) / block;
  std::vector<std::unique_ptr<BlockGraph>> tapes;
  for (const double t : t_grid) {
    tapes.push_back(std::make_unique<BlockGraph>(gen, teacher, t, block,
                                                 /*include_l1=*/true));
  }

  // Objective mean over one block at given parameters and time.
  const auto objective = [&](const LinearGenerator& gg, double t, const Mat& z,
                             const Mat& eps) {
    const auto cf = linear_field_coeffs(gg, t);
    const Mat x0 = push_forward(gg, z);
    const Mat xt = (1.0 - t) * x0 + t * eps;
    const Mat v = apply_affine(cf.c_mat, cf.c_vec, xt);
    const Mat r = v - teacher.velocity_batch(xt, t);
    return r.cwiseProduct(r).sum() / static_cast<double>(z.rows());
  };

  const std::uint64_t base = rng.bits();
  std::vector<std::vector<double>> lhs_blocks, rhs_blocks;
  for (long c = 0; c < blocks; ++c) {
    Mat z(block, k), eps(block, d);
    Rng block_rng(base, static_cast<std::uint64_t>(c));
    draw_block(block_rng, z, eps);

    std::vector<double> lhs(p, 0.0);
    for (int j = 0; j < p; ++j) {
      const auto gp = bump(gen, j, fd_step);
      const auto gm = bump(gen, j, -fd_step);
      double hi = 0.0, lo = 0.0;
      for (const double t : t_grid) {
        hi += grid_w * objective(gp, t, z, eps);
        lo += grid_w * objective(gm, t, z, eps);
      }
      lhs[j] = (hi - lo) / (2.0 * fd_step);
    }
    lhs_blocks.push_back(std::move(lhs));

    std::vector<double> rhs(p, 0.0);
    for (auto& tg : tapes) {
      const auto gradt = tg->block_grad(z, eps);
      for (int j = 0; j < p; ++j) rhs[j] += grid_w * gradt[j];
    }
    rhs_blocks.push_back(std::move(rhs));
  }

  IdentityReport rep;
  rep.check = "full_gradient";
  rep.detail = "d=" + std::to_string(d) + " k=" + std::to_string(k) +
               " grid_size=" + std::to_string(t_grid.size()) + " t0=" +
               fmt_t(t_grid.front()) + " " + param_names(gen);
  rep.n = blocks * block;
  reduce_blocks(lhs_blocks, rep.lhs, rep.se_lhs);
  reduce_blocks(rhs_blocks, rep.rhs, rep.se_rhs);
  finish_pass(rep);
  return rep;
}

std::vector<IdentityReport> run_identity_suite(const VerifySuiteConfig& cfg) {
  std::vector<IdentityReport> reports;
  for (int cdx = 0; cdx < cfg.configs; ++cdx) {
    Rng make_rng(cfg.seed, 0x636f6e66u + static_cast<std::uint64_t>(cdx));
    LinearGenerator gen;
    gen.a.resize(2, 2);
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) gen.a(i, j) = 0.75 * make_rng.normal();
    }
    gen.b.resize(2);
    for (int i = 0; i < 2; ++i) gen.b[i] = 0.8 * make_rng.normal();

    std::vector<double> w;
    std::vector<Vec> mu, var;
    for (int i = 0; i < 3; ++i) {
      w.push_back(0.5 + make_rng.uniform());
      Vec m(2), v(2);
      for (int j = 0; j < 2; ++j) {
        m[j] = 1.5 * make_rng.normal();
        v[j] = make_rng.uniform(0.3, 1.2);
      }
      mu.push_back(m);
      var.push_back(v);
    }
    const double wsum = w[0] + w[1] + w[2];
    for (auto& wi : w) wi /= wsum;
    const GaussianMixture teacher_mix(w, mu, var);
    const GmmField teacher(teacher_mix);

    const auto f_fixed = TestFunctionSpec::random(2, 2, false, make_rng);
    const auto f_param = TestFunctionSpec::random(2, 2, true, make_rng);

    for (std::size_t tdx = 0; tdx < cfg.times.size(); ++tdx) {
      const double t = cfg.times[tdx];
      const std::uint64_t s0 =
          cfg.seed + 1000 * static_cast<std::uint64_t>(cdx + 1) +
          10 * static_cast<std::uint64_t>(tdx);
      const std::string tag = " [config " + std::to_string(cdx) + "]";

      Rng r1(s0, 1);
      auto a = check_product_identity(gen, f_fixed, t, cfg.n, r1);
      a.detail += tag;
      reports.push_back(std::move(a));

      Rng r2(s0, 2);
      auto b = check_product_identity(gen, f_param, t, cfg.n, r2);
      b.detail += tag;
      reports.push_back(std::move(b));

      Rng r3(s0, 3);
      auto c = check_gradient_identity(gen, teacher, t, cfg.n, cfg.fd_step, r3);
      c.detail += tag;
      reports.push_back(std::move(c));

      Rng r4(s0, 4);
      auto e = check_full_gradient(gen, teacher, {t}, cfg.n, cfg.fd_step, r4);
      e.detail += tag;
      reports.push_back(std::move(e));
    }
  }
  return reports;
}

}  // namespace flowgm
