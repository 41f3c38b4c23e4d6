#pragma once

// Common interface for time-dependent velocity fields v(x, t). Plain
// evaluation drives samplers and metrics; bind() exposes the same field to a
// tape graph so losses and identity checks can differentiate through the
// x-argument while the field's own parameters stay severed (constants).

#include <Eigen/Dense>
#include <memory>

#include "flowgm/tape.hpp"

namespace flowgm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Builds velocity nodes inside one particular graph. Implementations own
// whatever frozen parameter nodes they need for that graph.
class FieldBinding {
 public:
  virtual ~FieldBinding() = default;
  virtual tape::NodeId velocity(tape::NodeId x, double t) = 0;
};

class VelocityField {
 public:
  virtual ~VelocityField() = default;

  virtual int dim() const = 0;
  virtual Vec velocity(const Vec& x, double t) const = 0;

  // Rows of x are samples; default implementation loops.
  virtual Mat velocity_batch(const Mat& x, double t) const {
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      out.row(i) = velocity(x.row(i).transpose(), t).transpose();
    }
    return out;
  }

  // One time value per row.
  virtual Mat velocity_batch_times(const Mat& x, const Vec& ts) const {
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      out.row(i) = velocity(x.row(i).transpose(), ts[i]).transpose();
    }
    return out;
  }

  virtual std::unique_ptr<FieldBinding> bind(tape::Graph& g) const = 0;
};

}  // namespace flowgm
