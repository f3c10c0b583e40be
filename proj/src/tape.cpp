#include "gmlfm/tape.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gmlfm::tape {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Parameter: return "parameter";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Scale: return "scale";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Dot: return "dot";
    case Op::MatVec: return "matvec";
    case Op::MatTVec: return "matvec_transposed";
    case Op::Outer: return "outer";
    case Op::Tanh: return "tanh";
    case Op::Sqrt: return "sqrt";
    case Op::Sum: return "sum";
    case Op::Square: return "square";
    case Op::MaxSelect: return "max_select";
    case Op::Abs: return "abs";
  }
  return "unknown";
}

std::string to_string(Shape s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

void GradientMap::accumulate(LeafKey key, Shape shape, std::span<const double> grad) {
  for (auto& e : entries_) {
    if (e.key == key) {
      for (std::size_t i = 0; i < grad.size(); ++i) e.grad[i] += grad[i];
      return;
    }
  }
  entries_.push_back({key, shape, std::vector<double>(grad.begin(), grad.end())});
}

std::span<const double> GradientMap::get(LeafKey key) const {
  for (const auto& e : entries_)
    if (e.key == key) return e.grad;
  return {};
}

bool GradientMap::contains(LeafKey key) const { return !get(key).empty(); }

NodeId Tape::push(Op op, Shape shape, std::uint32_t a, std::uint32_t b) {
  Node n{op, shape, a, b, values_.size(), {}};
  values_.resize(values_.size() + shape.size());
  nodes_.push_back(n);
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Tape::constant(double value) { return constant(std::span<const double>(&value, 1), Shape{}); }

NodeId Tape::constant(std::span<const double> values, Shape shape) {
  if (values.size() != shape.size())
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  const NodeId id = push(Op::Constant, shape, kNone, kNone);
  std::copy(values.begin(), values.end(), values_.begin() + nodes_.back().offset);
  return id;
}

NodeId Tape::parameter(LeafKey key, std::span<const double> values, Shape shape) {
  if (values.size() != shape.size())
    throw ShapeError("parameter: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  const NodeId id = push(Op::Parameter, shape, kNone, kNone);
  nodes_.back().key = key;
  std::copy(values.begin(), values.end(), values_.begin() + nodes_.back().offset);
  return id;
}

namespace {

[[noreturn]] void shape_error(Op op, std::initializer_list<Shape> shapes) {
  std::ostringstream os;
  os << op_name(op) << ": incompatible input shapes";
  for (Shape s : shapes) os << " " << to_string(s);
  throw ShapeError(os.str());
}

int arity(Op op) {
  switch (op) {
    case Op::Constant:
    case Op::Parameter: return 0;
    case Op::Tanh:
    case Op::Sqrt:
    case Op::Sum:
    case Op::Square:
    case Op::MaxSelect:
    case Op::Abs: return 1;
    default: return 2;
  }
}

}  // namespace

NodeId Tape::record(Op op, std::initializer_list<NodeId> inputs) {
  const int n_in = arity(op);
  if (n_in == 0) throw std::invalid_argument("record: use constant() or parameter() for leaves");
  if (static_cast<int>(inputs.size()) != n_in)
    throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n_in) +
                     " inputs, got " + std::to_string(inputs.size()));
  for (NodeId id : inputs)
    if (id.value >= nodes_.size())
      throw std::out_of_range(std::string(op_name(op)) + ": unknown input node");

  const std::uint32_t a = inputs.begin()->value;
  const std::uint32_t b = n_in == 2 ? (inputs.begin() + 1)->value : kNone;
  const Shape sa = nodes_[a].shape;
  const Shape sb = b == kNone ? Shape{} : nodes_[b].shape;

  Shape out{};
  switch (op) {
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div:
      if (sa != sb) shape_error(op, {sa, sb});
      out = sa;
      break;
    case Op::Scale:
      if (!sb.is_scalar()) shape_error(op, {sa, sb});
      out = sa;
      break;
    case Op::Dot:
      if (!sa.is_vector() || sa != sb) shape_error(op, {sa, sb});
      break;
    case Op::MatVec:
      if (!sb.is_vector() || sa.cols != sb.rows) shape_error(op, {sa, sb});
      out = Shape{sa.rows, 1};
      break;
    case Op::MatTVec:
      if (!sb.is_vector() || sa.rows != sb.rows) shape_error(op, {sa, sb});
      out = Shape{sa.cols, 1};
      break;
    case Op::Outer:
      if (!sa.is_vector() || !sb.is_vector()) shape_error(op, {sa, sb});
      out = Shape{sa.rows, sb.rows};
      break;
    case Op::Tanh:
    case Op::Sqrt:
    case Op::Square:
    case Op::Abs:
      out = sa;
      break;
    case Op::Sum:
    case Op::MaxSelect:
      if (sa.size() == 0) shape_error(op, {sa});
      break;
    default:
      break;
  }

  const NodeId id = push(op, out, a, b);
  forward(nodes_.back());
  return id;
}

void Tape::forward(const Node& n) {
  auto y = val(n);
  const auto x = val(nodes_[n.a]);
  const std::span<const double> z =
      n.b == kNone ? std::span<const double>{} : val(nodes_[n.b]);
  switch (n.op) {
    case Op::Add:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + z[i];
      break;
    case Op::Sub:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
      break;
    case Op::Scale:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[0];
      break;
    case Op::Mul:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
      break;
    case Op::Div:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] / z[i];
      break;
    case Op::Dot: {
      double s = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * z[i];
      y[0] = s;
      break;
    }
    case Op::MatVec: {
      const std::size_t cols = nodes_[n.a].shape.cols;
      for (std::size_t r = 0; r < y.size(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c] * z[c];
        y[r] = s;
      }
      break;
    }
    case Op::MatTVec: {
      const std::size_t rows = nodes_[n.a].shape.rows;
      const std::size_t cols = nodes_[n.a].shape.cols;
      std::fill(y.begin(), y.end(), 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y[c] += x[r * cols + c] * z[r];
      break;
    }
    case Op::Outer: {
      const std::size_t cols = z.size();
      for (std::size_t r = 0; r < x.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = x[r] * z[c];
      break;
    }
    case Op::Tanh:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x[i]);
      break;
    case Op::Sqrt:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::sqrt(x[i]);
      break;
    case Op::Sum: {
      double s = 0.0;
      for (double v : x) s += v;
      y[0] = s;
      break;
    }
    case Op::Square:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i];
      break;
    case Op::MaxSelect:
      y[0] = *std::max_element(x.begin(), x.end());
      break;
    case Op::Abs:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::abs(x[i]);
      break;
    case Op::Constant:
    case Op::Parameter:
      break;
  }
}

std::span<const double> Tape::value(NodeId id) const { return val(nodes_.at(id.value)); }

double Tape::scalar(NodeId id) const {
  const Node& n = nodes_.at(id.value);
  if (!n.shape.is_scalar()) throw ShapeError("scalar: node has shape " + to_string(n.shape));
  return values_[n.offset];
}

void Tape::propagate(const Node& n, std::span<const double> g) {
  const Node& na = nodes_[n.a];
  const auto x = val(na);
  auto gx = adj(na);
  reached_[n.a] = 1;
  std::span<const double> z;
  std::span<double> gz;
  if (n.b != kNone) {
    z = val(nodes_[n.b]);
    gz = adj(nodes_[n.b]);
    reached_[n.b] = 1;
  }
  const auto y = val(n);

  switch (n.op) {
    case Op::Add:
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i];
        gz[i] += g[i];
      }
      break;
    case Op::Sub:
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i];
        gz[i] -= g[i];
      }
      break;
    case Op::Scale: {
      double gs = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * z[0];
        gs += g[i] * x[i];
      }
      gz[0] += gs;
      break;
    }
    case Op::Mul:
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * z[i];
        gz[i] += g[i] * x[i];
      }
      break;
    case Op::Div:
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] / z[i];
        gz[i] -= g[i] * x[i] / (z[i] * z[i]);
      }
      break;
    case Op::Dot:
      for (std::size_t i = 0; i < x.size(); ++i) {
        gx[i] += g[0] * z[i];
        gz[i] += g[0] * x[i];
      }
      break;
    case Op::MatVec: {
      const std::size_t cols = na.shape.cols;
      for (std::size_t r = 0; r < g.size(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += g[r] * z[c];
          gz[c] += x[r * cols + c] * g[r];
        }
      }
      break;
    }
    case Op::MatTVec: {
      const std::size_t rows = na.shape.rows;
      const std::size_t cols = na.shape.cols;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += z[r] * g[c];
          gz[r] += x[r * cols + c] * g[c];
        }
      }
      break;
    }
    case Op::Outer: {
      const std::size_t cols = z.size();
      for (std::size_t r = 0; r < x.size(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r] += g[r * cols + c] * z[c];
          gz[c] += g[r * cols + c] * x[r];
        }
      }
      break;
    }
    case Op::Tanh:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    case Op::Sqrt:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (2.0 * y[i]);
      break;
    case Op::Sum:
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[0];
      break;
    case Op::Square:
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * x[i] * g[i];
      break;
    case Op::MaxSelect: {
      // First maximal coordinate takes the whole adjoint.
      const auto it = std::max_element(x.begin(), x.end());
      gx[static_cast<std::size_t>(it - x.begin())] += g[0];
      break;
    }
    case Op::Abs:
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
        gx[i] += g[i] * s;
      }
      break;
    case Op::Constant:
    case Op::Parameter:
      break;
  }
}

GradientMap Tape::backward(NodeId output) {
  const Node& out = nodes_.at(output.value);
  if (!out.shape.is_scalar())
    throw ShapeError("backward: output must be scalar, got shape " +
                                to_string(out.shape));

  adjoints_.assign(values_.size(), 0.0);
  reached_.assign(nodes_.size(), 0);
  adjoints_[out.offset] = 1.0;
  reached_[output.value] = 1;
  last_visits_ = 0;

  GradientMap grads;
  for (std::uint32_t id = output.value + 1; id-- > 0;) {
    if (!reached_[id]) continue;
    const Node& n = nodes_[id];
    ++last_visits_;
    if (n.op == Op::Constant) continue;
    if (n.op == Op::Parameter) {
      grads.accumulate(n.key, n.shape, adj(n));
      continue;
    }
    propagate(n, adj(n));
  }
  return grads;
}

void Tape::clear() {
  nodes_.clear();
  values_.clear();
  adjoints_.clear();
  reached_.clear();
  last_visits_ = 0;
}

FdCheck finite_difference_check(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> theta,
                                std::span<const double> analytic, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be > 0");
  if (analytic.size() != theta.size())
    throw std::invalid_argument("finite_difference_check: gradient size mismatch");

  std::vector<double> probe(theta.begin(), theta.end());
  FdCheck result;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double up = f(probe);
    probe[i] = saved - step;
    const double down = f(probe);
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NonFiniteError("finite_difference_check: non-finite value at coordinate " +
                               std::to_string(i),
                           i);
    const double fd = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_coordinate = i;
    }
  }
  return result;
}

}  // namespace gmlfm::tape
