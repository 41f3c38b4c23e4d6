#include "flowgm/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace flowgm::tape {

const std::vector<double>& GradientMap::at(NodeId id) const {
  for (const auto& e : entries_) {
    if (e.id == id) return e.grad;
  }
  throw TapeError("GradientMap: node " + std::to_string(id) +
                  " is not a parameter of the graph");
}

bool GradientMap::contains(NodeId id) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.id == id; });
}

void GradientMap::accumulate(const GradientMap& other, double weight) {
  if (entries_.empty()) {
    entries_ = other.entries_;
    for (auto& e : entries_) {
      for (auto& g : e.grad) g *= weight;
    }
    return;
  }
  if (entries_.size() != other.entries_.size()) {
    throw TapeError("GradientMap::accumulate: layouts differ");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& src = other.entries_[i];
    auto& dst = entries_[i];
    if (dst.id != src.id || dst.grad.size() != src.grad.size()) {
      throw TapeError("GradientMap::accumulate: layouts differ");
    }
    for (std::size_t j = 0; j < dst.grad.size(); ++j) {
      dst.grad[j] += weight * src.grad[j];
    }
  }
}

void GradientMap::scale(double s) {
  for (auto& e : entries_) {
    for (auto& g : e.grad) g *= s;
  }
}

double GradientMap::squared_norm() const {
  double acc = 0.0;
  for (const auto& e : entries_) {
    for (double g : e.grad) acc += g * g;
  }
  return acc;
}

const Node& Graph::node(NodeId id) const {
  if (id >= nodes_.size()) {
    throw TapeError("Graph: node id " + std::to_string(id) +
                    " out of range (graph has " +
                    std::to_string(nodes_.size()) + " nodes)");
  }
  return nodes_[id];
}

NodeId Graph::push(Node n) {
  if (n.shape.size() == 0) throw ShapeError("node", n.shape);
  n.off = values_.size();
  values_.resize(values_.size() + n.shape.size());
  nodes_.push_back(n);
  const NodeId id = static_cast<NodeId>(nodes_.size() - 1);
  eval(nodes_.back());
  return id;
}

NodeId Graph::constant(std::span<const double> v, Shape s) {
  if (v.size() != s.size()) throw ShapeError("constant", s);
  Node n{Op::kConstant, s};
  const NodeId id = push(n);
  std::memcpy(buf(nodes_[id]), v.data(), v.size() * sizeof(double));
  return id;
}

NodeId Graph::constant(std::span<const double> v) {
  return constant(v, Shape{static_cast<std::uint32_t>(v.size()), 1});
}

NodeId Graph::constant_scalar(double v) {
  return constant(std::span<const double>(&v, 1), Shape{1, 1});
}

NodeId Graph::parameter(std::span<const double> v, Shape s) {
  if (v.size() != s.size()) throw ShapeError("parameter", s);
  Node n{Op::kParameter, s};
  const NodeId id = push(n);
  std::memcpy(buf(nodes_[id]), v.data(), v.size() * sizeof(double));
  params_.push_back(id);
  return id;
}

NodeId Graph::parameter(std::span<const double> v) {
  return parameter(v, Shape{static_cast<std::uint32_t>(v.size()), 1});
}

void Graph::check_same(const char* opname, NodeId a, NodeId b) const {
  if (!(node(a).shape == node(b).shape)) {
    throw ShapeError(opname, node(a).shape, node(b).shape);
  }
}

NodeId Graph::add(NodeId a, NodeId b) {
  check_same("add", a, b);
  return push({Op::kAdd, node(a).shape, a, b});
}

NodeId Graph::sub(NodeId a, NodeId b) {
  check_same("sub", a, b);
  return push({Op::kSub, node(a).shape, a, b});
}

NodeId Graph::mul(NodeId a, NodeId b) {
  check_same("mul", a, b);
  return push({Op::kMul, node(a).shape, a, b});
}

NodeId Graph::scale(NodeId a, double s) {
  Node n{Op::kScaleImm, node(a).shape, a};
  n.imm = s;
  return push(n);
}

NodeId Graph::scale(NodeId a, NodeId scalar) {
  if (!node(scalar).shape.is_scalar()) {
    throw ShapeError("scale", node(a).shape, node(scalar).shape);
  }
  return push({Op::kScale, node(a).shape, a, scalar});
}

NodeId Graph::matvec(NodeId w, NodeId x) {
  const Shape& sw = node(w).shape;
  const Shape& sx = node(x).shape;
  if (!sx.is_vector() || sw.cols != sx.rows) {
    throw ShapeError("matvec", sw, sx);
  }
  return push({Op::kMatVec, Shape{sw.rows, 1}, w, x});
}

NodeId Graph::affine(NodeId w, NodeId x, NodeId b) {
  const Shape& sw = node(w).shape;
  const Shape& sx = node(x).shape;
  const Shape& sb = node(b).shape;
  if (!sx.is_vector() || sw.cols != sx.rows) {
    throw ShapeError("affine", sw, sx);
  }
  if (!sb.is_vector() || sb.rows != sw.rows) {
    throw ShapeError("affine", sw, sb);
  }
  return push({Op::kAffine, Shape{sw.rows, 1}, w, x, b});
}

NodeId Graph::tanh(NodeId a) { return push({Op::kTanh, node(a).shape, a}); }
NodeId Graph::sin(NodeId a) { return push({Op::kSin, node(a).shape, a}); }
NodeId Graph::cos(NodeId a) { return push({Op::kCos, node(a).shape, a}); }
NodeId Graph::exp(NodeId a) { return push({Op::kExp, node(a).shape, a}); }
NodeId Graph::recip(NodeId a) { return push({Op::kRecip, node(a).shape, a}); }

NodeId Graph::square(NodeId a) {
  return push({Op::kSquare, node(a).shape, a});
}

NodeId Graph::sum(NodeId a) { return push({Op::kSum, Shape{1, 1}, a}); }
NodeId Graph::mean(NodeId a) { return push({Op::kMean, Shape{1, 1}, a}); }

NodeId Graph::dot(NodeId a, NodeId b) {
  check_same("dot", a, b);
  if (!node(a).shape.is_vector()) {
    throw ShapeError("dot", node(a).shape, node(b).shape);
  }
  return push({Op::kDot, Shape{1, 1}, a, b});
}

NodeId Graph::concat(NodeId a, NodeId b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (!sa.is_vector() || !sb.is_vector()) throw ShapeError("concat", sa, sb);
  return push({Op::kConcat, Shape{sa.rows + sb.rows, 1}, a, b});
}

NodeId Graph::stop_gradient(NodeId a) {
  return push({Op::kStopGradient, node(a).shape, a});
}

std::span<const double> Graph::value(NodeId id) const {
  const Node& n = node(id);
  return {buf(n), n.shape.size()};
}

double Graph::scalar_value(NodeId id) const {
  const Node& n = node(id);
  if (!n.shape.is_scalar()) {
    throw ShapeError("scalar_value", n.shape);
  }
  return *buf(n);
}

void Graph::set_value(NodeId id, std::span<const double> v) {
  Node& n = nodes_[id];
  if (n.op != Op::kConstant && n.op != Op::kParameter) {
    throw TapeError("set_value: node " + std::to_string(id) +
                    " is not a constant or parameter leaf");
  }
  if (v.size() != n.shape.size()) throw ShapeError("set_value", n.shape);
  std::memcpy(buf(n), v.data(), v.size() * sizeof(double));
}

void Graph::set_value(NodeId id, double v) {
  set_value(id, std::span<const double>(&v, 1));
}

void Graph::recompute() {
  for (const Node& n : nodes_) eval(n);
}

void Graph::eval(const Node& n) {
  const std::size_t len = n.shape.size();
  double* out = buf(n);
  switch (n.op) {
    case Op::kConstant:
    case Op::kParameter:
      break;  // leaf values live in the arena already
    case Op::kAdd: {
      const double* a = buf(nodes_[n.a]);
      const double* b = buf(nodes_[n.b]);
      for (std::size_t i = 0; i < len; ++i) out[i] = a[i] + b[i];
      break;
    }
    case Op::kSub: {
      const double* a = buf(nodes_[n.a]);
      const double* b = buf(nodes_[n.b]);
      for (std::size_t i = 0; i < len; ++i) out[i] = a[i] - b[i];
      break;
    }
    case Op::kMul: {
      const double* a = buf(nodes_[n.a]);
      const double* b = buf(nodes_[n.b]);
      for (std::size_t i = 0; i < len; ++i) out[i] = a[i] * b[i];
      break;
    }
    case Op::kScaleImm: {
      const double* a = buf(nodes_[n.a]);
      for (std::size_t i = 0; i < len; ++i) out[i] = n.imm * a[i];
      break;
    }
    case Op::kScale: {
      const double* a = buf(nodes_[n.a]);
      const double s = *buf(nodes_[n.b]);
      for (std::size_t i = 0; i < len; ++i) out[i] = s * a[i];
      break;
    }
    case Op::kMatVec: {
      const Node& wn = nodes_[n.a];
      const double* w = buf(wn);
      const double* x = buf(nodes_[n.b]);
      const std::size_t r = wn.shape.rows, c = wn.shape.cols;
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        const double* row = w + i * c;
        for (std::size_t j = 0; j < c; ++j) acc += row[j] * x[j];
        out[i] = acc;
      }
      break;
    }
    case Op::kAffine: {
      const Node& wn = nodes_[n.a];
      const double* w = buf(wn);
      const double* x = buf(nodes_[n.b]);
      const double* b = buf(nodes_[n.c]);
      const std::size_t r = wn.shape.rows, c = wn.shape.cols;
      for (std::size_t i = 0; i < r; ++i) {
        double acc = b[i];
        const double* row = w + i * c;
        for (std::size_t j = 0; j < c; ++j) acc += row[j] * x[j];
        out[i] = acc;
      }
      break;
    }
    case Op::kTanh: {
      const double* a = buf(nodes_[n.a]);
      for (std::size_t i = 0; i < len; ++i) out[i] = std::tanh(a[i]);
      break;
    }
    case Op::kSin: {
      const double* a = buf(nodes_[n.a]);
      for (std::size_t i = 0; i < len; ++i) out[i] = std::sin(a[i]);
      break;
    }
    case Op::kCos: {
      const double* a = buf(nodes_[n.a]);
      for (std::size_t i = 0; i < len; ++i) out[i] = std::cos(a[i]);
      break;
    }
    case Op::kExp: {
      const double* a = buf(nodes_[n.a]);
      for (std::size_t i = 0; i < len; ++i) out[i] = std::exp(a[i]);
      break;
    }
    case Op::kRecip: {
      const double* a = buf(nodes_[n.a]);
      for (std::size_t i = 0; i < len; ++i) out[i] = 1.0 / a[i];
      break;
    }
    case Op::kSquare: {
      const double* a = buf(nodes_[n.a]);
      for (std::size_t i = 0; i < len; ++i) out[i] = a[i] * a[i];
      break;
    }
    case Op::kSum: {
      const Node& an = nodes_[n.a];
      const double* a = buf(an);
      double acc = 0.0;
      for (std::size_t i = 0; i < an.shape.size(); ++i) acc += a[i];
      out[0] = acc;
      break;
    }
    case Op::kMean: {
      const Node& an = nodes_[n.a];
      const double* a = buf(an);
      double acc = 0.0;
      for (std::size_t i = 0; i < an.shape.size(); ++i) acc += a[i];
      out[0] = acc / static_cast<double>(an.shape.size());
      break;
    }
    case Op::kDot: {
      const Node& an = nodes_[n.a];
      const double* a = buf(an);
      const double* b = buf(nodes_[n.b]);
      double acc = 0.0;
      for (std::size_t i = 0; i < an.shape.size(); ++i) acc += a[i] * b[i];
      out[0] = acc;
      break;
    }
    case Op::kConcat: {
      const Node& an = nodes_[n.a];
      const Node& bn = nodes_[n.b];
      std::memcpy(out, buf(an), an.shape.size() * sizeof(double));
      std::memcpy(out + an.shape.size(), buf(bn),
                  bn.shape.size() * sizeof(double));
      break;
    }
    case Op::kStopGradient: {
      std::memcpy(out, buf(nodes_[n.a]), len * sizeof(double));
      break;
    }
  }
}

GradientMap Graph::backward(NodeId loss, double seed) {
  GradientMap map;
  backward_accumulate(loss, map, seed);
  return map;
}

void Graph::backward_accumulate(NodeId loss, GradientMap& into, double seed) {
  const Node& ln = node(loss);
  if (!ln.shape.is_scalar()) {
    throw TapeError("backward: loss node must be scalar, got shape " +
                    ln.shape.str());
  }
  adjoints_.assign(values_.size(), 0.0);
  adjoints_[ln.off] = seed;

  for (std::size_t k = loss + 1; k-- > 0;) {
    const Node& n = nodes_[k];
    const std::size_t len = n.shape.size();
    const double* g = adjoints_.data() + n.off;
    switch (n.op) {
      case Op::kConstant:
      case Op::kParameter:
        break;
      case Op::kAdd: {
        double* ga = adj(nodes_[n.a]);
        double* gb = adj(nodes_[n.b]);
        for (std::size_t i = 0; i < len; ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        double* ga = adj(nodes_[n.a]);
        double* gb = adj(nodes_[n.b]);
        for (std::size_t i = 0; i < len; ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        const double* a = buf(nodes_[n.a]);
        const double* b = buf(nodes_[n.b]);
        double* ga = adj(nodes_[n.a]);
        double* gb = adj(nodes_[n.b]);
        for (std::size_t i = 0; i < len; ++i) {
          ga[i] += b[i] * g[i];
          gb[i] += a[i] * g[i];
        }
        break;
      }
      case Op::kScaleImm: {
        double* ga = adj(nodes_[n.a]);
        for (std::size_t i = 0; i < len; ++i) ga[i] += n.imm * g[i];
        break;
      }
      case Op::kScale: {
        const double* a = buf(nodes_[n.a]);
        const double s = *buf(nodes_[n.b]);
        double* ga = adj(nodes_[n.a]);
        double* gs = adj(nodes_[n.b]);
        double acc = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          ga[i] += s * g[i];
          acc += a[i] * g[i];
        }
        gs[0] += acc;
        break;
      }
      case Op::kMatVec: {
        const Node& wn = nodes_[n.a];
        const double* w = buf(wn);
        const double* x = buf(nodes_[n.b]);
        double* gw = adj(wn);
        double* gx = adj(nodes_[n.b]);
        const std::size_t r = wn.shape.rows, c = wn.shape.cols;
        for (std::size_t i = 0; i < r; ++i) {
          const double gi = g[i];
          const double* row = w + i * c;
          double* grow = gw + i * c;
          for (std::size_t j = 0; j < c; ++j) {
            grow[j] += gi * x[j];
            gx[j] += row[j] * gi;
          }
        }
        break;
      }
      case Op::kAffine: {
        const Node& wn = nodes_[n.a];
        const double* w = buf(wn);
        const double* x = buf(nodes_[n.b]);
        double* gw = adj(wn);
        double* gx = adj(nodes_[n.b]);
        double* gb = adj(nodes_[n.c]);
        const std::size_t r = wn.shape.rows, c = wn.shape.cols;
        for (std::size_t i = 0; i < r; ++i) {
          const double gi = g[i];
          gb[i] += gi;
          const double* row = w + i * c;
          double* grow = gw + i * c;
          for (std::size_t j = 0; j < c; ++j) {
            grow[j] += gi * x[j];
            gx[j] += row[j] * gi;
          }
        }
        break;
      }
      case Op::kTanh: {
        const double* y = buf(n);
        double* ga = adj(nodes_[n.a]);
        for (std::size_t i = 0; i < len; ++i) {
          ga[i] += (1.0 - y[i] * y[i]) * g[i];
        }
        break;
      }
      case Op::kSin: {
        const double* a = buf(nodes_[n.a]);
        double* ga = adj(nodes_[n.a]);
        for (std::size_t i = 0; i < len; ++i) {
          ga[i] += std::cos(a[i]) * g[i];
        }
        break;
      }
      case Op::kCos: {
        const double* a = buf(nodes_[n.a]);
        double* ga = adj(nodes_[n.a]);
        for (std::size_t i = 0; i < len; ++i) {
          ga[i] -= std::sin(a[i]) * g[i];
        }
        break;
      }
      case Op::kExp: {
        const double* y = buf(n);
        double* ga = adj(nodes_[n.a]);
        for (std::size_t i = 0; i < len; ++i) ga[i] += y[i] * g[i];
        break;
      }
      case Op::kRecip: {
        const double* y = buf(n);
        double* ga = adj(nodes_[n.a]);
        for (std::size_t i = 0; i < len; ++i) ga[i] -= y[i] * y[i] * g[i];
        break;
      }
      case Op::kSquare: {
        const double* a = buf(nodes_[n.a]);
        double* ga = adj(nodes_[n.a]);
        for (std::size_t i = 0; i < len; ++i) ga[i] += 2.0 * a[i] * g[i];
        break;
      }
      case Op::kSum: {
        const Node& an = nodes_[n.a];
        double* ga = adj(an);
        const double g0 = g[0];
        for (std::size_t i = 0; i < an.shape.size(); ++i) ga[i] += g0;
        break;
      }
      case Op::kMean: {
        const Node& an = nodes_[n.a];
        double* ga = adj(an);
        const double g0 = g[0] / static_cast<double>(an.shape.size());
        for (std::size_t i = 0; i < an.shape.size(); ++i) ga[i] += g0;
        break;
      }
      case Op::kDot: {
        const Node& an = nodes_[n.a];
        const double* a = buf(an);
        const double* b = buf(nodes_[n.b]);
        double* ga = adj(an);
        double* gb = adj(nodes_[n.b]);
        const double g0 = g[0];
        for (std::size_t i = 0; i < an.shape.size(); ++i) {
          ga[i] += g0 * b[i];
          gb[i] += g0 * a[i];
        }
        break;
      }
      case Op::kConcat: {
        const Node& an = nodes_[n.a];
        const Node& bn = nodes_[n.b];
        double* ga = adj(an);
        double* gb = adj(bn);
        for (std::size_t i = 0; i < an.shape.size(); ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < bn.shape.size(); ++i) {
          gb[i] += g[an.shape.size() + i];
        }
        break;
      }
      case Op::kStopGradient:
        break;  // adjoint does not flow past here
    }
  }

  if (into.entries_.empty()) {
    into.entries_.reserve(params_.size());
    for (NodeId p : params_) {
      const Node& pn = nodes_[p];
      into.entries_.push_back(
          {p, std::vector<double>(adjoints_.data() + pn.off,
                                  adjoints_.data() + pn.off +
                                      pn.shape.size())});
    }
    return;
  }
  if (into.entries_.size() != params_.size()) {
    throw TapeError("backward_accumulate: gradient map layout differs");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Node& pn = nodes_[params_[i]];
    auto& e = into.entries_[i];
    if (e.id != params_[i]) {
      throw TapeError("backward_accumulate: gradient map layout differs");
    }
    const double* src = adjoints_.data() + pn.off;
    for (std::size_t j = 0; j < pn.shape.size(); ++j) e.grad[j] += src[j];
  }
}

std::span<const double> Graph::adjoint(NodeId id) const {
  const Node& n = node(id);
  if (adjoints_.size() != values_.size()) {
    throw TapeError("adjoint: no backward pass has run");
  }
  return {adjoints_.data() + n.off, n.shape.size()};
}

}  // namespace flowgm::tape
