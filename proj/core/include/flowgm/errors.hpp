#pragma once

#include <stdexcept>
#include <string>

namespace flowgm {

// Bad user-supplied configuration (files, flags, mixture specs). The CLI
// maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values encountered mid-run (diverged training, blown-up
// sampler state). The CLI maps this to exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Arguments outside a function's mathematical domain, e.g. t <= 0 where a
// 1/t factor appears.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace flowgm
