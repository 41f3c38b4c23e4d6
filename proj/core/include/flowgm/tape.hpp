#pragma once

// Define-by-run reverse-mode autodiff on flat double buffers.
//
// A Graph owns a growing list of nodes plus one contiguous value arena and
// one adjoint arena of the same layout. Values are computed eagerly as nodes
// are built, so value() is always available. Leaf values can be overwritten
// with set_value() and the whole graph re-evaluated with recompute(), which
// lets Monte-Carlo loops reuse one graph instead of rebuilding it per sample.
//
// Everything is double precision. Graphs are single-threaded; distinct
// graphs may be used concurrently from distinct threads.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowgm::tape {

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = ~NodeId{0};

struct Shape {
  std::uint32_t rows = 0;
  std::uint32_t cols = 1;

  std::size_t size() const { return std::size_t{rows} * cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  bool is_vector() const { return cols == 1; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": incompatible shapes " + a.str() +
                              " vs " + b.str()),
        lhs(a),
        rhs(b) {}
  ShapeError(const std::string& op, const Shape& a)
      : std::invalid_argument(op + ": invalid shape " + a.str()), lhs(a),
        rhs(a) {}

  Shape lhs, rhs;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Op : std::uint8_t {
  kConstant,
  kParameter,
  kAdd,        // elementwise, same shape
  kSub,        // elementwise, same shape
  kMul,        // elementwise, same shape
  kScaleImm,   // array * compile-time double
  kScale,      // array * scalar node
  kMatVec,     // (r x c) * (c) -> (r)
  kAffine,     // (r x c) * (c) + (r) -> (r)
  kTanh,
  kSin,
  kCos,
  kExp,
  kRecip,
  kSquare,
  kSum,        // all elements -> scalar
  kMean,       // all elements -> scalar
  kDot,        // two equal-length vectors -> scalar
  kConcat,     // two vectors stacked
  kStopGradient,
};

struct Node {
  Op op;
  Shape shape;
  NodeId a = kNoNode;
  NodeId b = kNoNode;
  NodeId c = kNoNode;
  double imm = 0.0;       // only kScaleImm
  std::uint64_t off = 0;  // offset into the value / adjoint arenas
};

// Per-parameter gradient container. Every parameter node of the graph gets
// an entry (zeros when unreachable from the loss), in creation order.
class GradientMap {
 public:
  struct Entry {
    NodeId id;
    std::vector<double> grad;
  };

  const std::vector<double>& at(NodeId id) const;
  bool contains(NodeId id) const;
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  // Sum of another map into this one; layouts must match.
  void accumulate(const GradientMap& other, double weight = 1.0);
  void scale(double s);
  double squared_norm() const;

 private:
  friend class Graph;
  std::vector<Entry> entries_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves.
  NodeId constant(std::span<const double> v, Shape s);
  NodeId constant(std::span<const double> v);  // column vector
  NodeId constant_scalar(double v);
  NodeId parameter(std::span<const double> v, Shape s);
  NodeId parameter(std::span<const double> v);  // column vector

  // Elementwise and linear algebra.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId scale(NodeId a, NodeId scalar);
  NodeId matvec(NodeId w, NodeId x);
  NodeId affine(NodeId w, NodeId x, NodeId b);
  NodeId tanh(NodeId a);
  NodeId sin(NodeId a);
  NodeId cos(NodeId a);
  NodeId exp(NodeId a);
  NodeId recip(NodeId a);
  NodeId square(NodeId a);

  // Reductions and glue.
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId dot(NodeId a, NodeId b);
  NodeId concat(NodeId a, NodeId b);
  NodeId stop_gradient(NodeId a);

  // Access.
  std::size_t node_count() const { return nodes_.size(); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  Op op(NodeId id) const { return node(id).op; }
  std::span<const double> value(NodeId id) const;
  double scalar_value(NodeId id) const;
  const std::vector<NodeId>& parameters() const { return params_; }

  // Overwrite a leaf (constant or parameter) and re-evaluate later.
  void set_value(NodeId id, std::span<const double> v);
  void set_value(NodeId id, double v);

  // Re-run the forward pass over every node in creation order.
  void recompute();

  // Reverse sweep from a scalar loss; returns gradients for all parameters.
  GradientMap backward(NodeId loss, double seed = 1.0);

  // As above but adds into an existing map (for Monte-Carlo accumulation).
  void backward_accumulate(NodeId loss, GradientMap& into, double seed = 1.0);

  // Adjoint of an arbitrary node from the latest backward call.
  std::span<const double> adjoint(NodeId id) const;

 private:
  const Node& node(NodeId id) const;
  NodeId push(Node n);
  void eval(const Node& n);
  void check_same(const char* opname, NodeId a, NodeId b) const;
  double* buf(const Node& n) { return values_.data() + n.off; }
  const double* buf(const Node& n) const { return values_.data() + n.off; }
  double* adj(const Node& n) { return adjoints_.data() + n.off; }

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> adjoints_;
  std::vector<NodeId> params_;
};

}  // namespace flowgm::tape
