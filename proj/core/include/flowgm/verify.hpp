#pragma once

// Numerical verification of the identities that justify the distillation
// losses, run on linear generators because their induced marginal field is
// exactly available:
//
//   product check:   E f(x_t)^T v_t(x_t) = E f(x_t)^T (x_t - x_0)/t
//                    componentwise, for affine and parameter-coupled f;
//   gradient check:  the tape gradient of the correction loss (frozen field
//                    snapshot, live x_t paths) equals the field-derivative
//                    term E 2 (v_t - u)^T dv_t/dtheta_j, with the parameter
//                    Jacobian of the closed-form field taken by central
//                    finite differences at fixed x_t;
//   full-gradient:   central finite differences of E ||v_t - u||^2 over the
//                    generator parameters match the tape gradient of the
//                    sum of both distillation loss terms.
//
// Every comparison uses common random numbers on both sides and reports
// elementwise mean +- standard error; pass means agreement within three
// combined standard errors.

#include <cstdint>
#include <string>
#include <vector>

#include "flowgm/analytic.hpp"
#include "flowgm/field.hpp"
#include "flowgm/rng.hpp"

namespace flowgm {

// Probe function f(x, theta) = M x + c + alpha (A h + s b): affine in x,
// and coupled to the generator parameters when alpha != 0.
struct TestFunctionSpec {
  Mat m;  // d x d
  Vec c;  // d
  double alpha = 0.0;
  Vec h;  // k; latent direction hit by A
  double s = 0.0;

  static TestFunctionSpec random(int d, int k, bool param_dependent, Rng& rng);
  // The x-independent part c + alpha (A h + s b).
  Vec offset(const LinearGenerator& gen) const;
};

struct IdentityReport {
  std::string check;   // "product" | "gradient" | "full_gradient"
  std::string detail;  // config echo
  long n = 0;
  std::vector<double> lhs, rhs, se_lhs, se_rhs;
  bool pass = false;

  // Worst elementwise |lhs - rhs| in units of the combined standard error.
  double max_sigma() const;
};

// Both sides of E f^T v = E f^T (x_t - x_0)/t on the generator's own path,
// one entry per output component. Requires t in (0, 1] and n >= 2.
IdentityReport check_product_identity(const LinearGenerator& gen,
                                      const TestFunctionSpec& f, double t,
                                      long n, Rng& rng);

// Field-derivative term vs tape gradient of the correction loss, one entry
// per generator parameter (A row-major, then b). fd_step perturbs only the
// closed-form field coefficients, never the sample path. Requires
// fd_step > 0.
IdentityReport check_gradient_identity(const LinearGenerator& gen,
                                       const VelocityField& teacher, double t,
                                       long n, double fd_step, Rng& rng);

// Finite differences of the matching objective (averaged over t_grid)
// against the tape gradient of the summed loss terms, one entry per
// generator parameter. Here fd_step perturbs the full parameter, moving
// both the sample path and the field.
IdentityReport check_full_gradient(const LinearGenerator& gen,
                                   const VelocityField& teacher,
                                   const std::vector<double>& t_grid, long n,
                                   double fd_step, Rng& rng);

struct VerifySuiteConfig {
  int configs = 5;
  long n = 1000000;
  std::vector<double> times{0.1, 0.5, 0.9};
  double fd_step = 1e-4;
  std::uint64_t seed = 1;
};

// Randomized generator/teacher pairs in d = k = 2; per configuration and
// time runs the product check (fixed and parameter-coupled f), the gradient
// check, and the full-gradient check. Deterministic given cfg.seed.
std::vector<IdentityReport> run_identity_suite(const VerifySuiteConfig& cfg);

}  // namespace flowgm
