#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gmlfm::tape {

/// Identifies a learnable tensor. `group` is owned by the caller (the model
/// defines its own parameter groups); `index` selects a row or layer.
struct LeafKey {
  int group = 0;
  int index = 0;

  auto operator<=>(const LeafKey&) const = default;
};

enum class Op : std::uint8_t {
  Constant,
  Parameter,
  Add,
  Sub,
  Scale,      // tensor * scalar node
  Mul,        // elementwise
  Div,        // elementwise
  Dot,        // vector . vector -> scalar
  MatVec,     // A v
  MatTVec,    // A^T v
  Outer,      // a b^T
  Tanh,
  Sqrt,
  Sum,        // all entries -> scalar
  Square,     // elementwise
  MaxSelect,  // max entry -> scalar
  Abs,
};

std::string_view op_name(Op op);

struct Shape {
  std::uint32_t rows = 1;
  std::uint32_t cols = 1;

  std::size_t size() const { return std::size_t{rows} * cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  bool is_vector() const { return cols == 1; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(Shape s);

struct NodeId {
  std::uint32_t value = 0;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Gradients of one scalar output with respect to every parameter leaf it
/// reaches. Absent keys mean a zero gradient.
class GradientMap {
 public:
  struct Entry {
    LeafKey key;
    Shape shape;
    std::vector<double> grad;
  };

  /// Adds `grad` into the entry for `key`, creating it when absent.
  void accumulate(LeafKey key, Shape shape, std::span<const double> grad);

  /// Empty span when the key has no entry.
  std::span<const double> get(LeafKey key) const;
  bool contains(LeafKey key) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

/// Eager reverse-mode tape over scalars, vectors and small dense matrices.
///
/// Every `record` computes its forward value immediately. Node ids are
/// assigned in recording order, so inputs always precede their consumers and
/// a single reverse sweep over ids is a valid topological order.
class Tape {
 public:
  NodeId constant(double value);
  NodeId constant(std::span<const double> values, Shape shape);
  NodeId parameter(LeafKey key, std::span<const double> values, Shape shape);

  /// Records `op` over `inputs`. Throws ShapeError naming the op and the
  /// offending shapes when they are incompatible.
  NodeId record(Op op, std::initializer_list<NodeId> inputs);

  NodeId add(NodeId a, NodeId b) { return record(Op::Add, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return record(Op::Sub, {a, b}); }
  NodeId scale(NodeId a, NodeId s) { return record(Op::Scale, {a, s}); }
  NodeId mul(NodeId a, NodeId b) { return record(Op::Mul, {a, b}); }
  NodeId div(NodeId a, NodeId b) { return record(Op::Div, {a, b}); }
  NodeId dot(NodeId a, NodeId b) { return record(Op::Dot, {a, b}); }
  NodeId matvec(NodeId m, NodeId v) { return record(Op::MatVec, {m, v}); }
  NodeId matvec_transposed(NodeId m, NodeId v) { return record(Op::MatTVec, {m, v}); }
  NodeId outer(NodeId a, NodeId b) { return record(Op::Outer, {a, b}); }
  NodeId tanh(NodeId a) { return record(Op::Tanh, {a}); }
  NodeId sqrt(NodeId a) { return record(Op::Sqrt, {a}); }
  NodeId sum(NodeId a) { return record(Op::Sum, {a}); }
  NodeId square(NodeId a) { return record(Op::Square, {a}); }
  NodeId max_select(NodeId a) { return record(Op::MaxSelect, {a}); }
  NodeId abs(NodeId a) { return record(Op::Abs, {a}); }

  std::span<const double> value(NodeId id) const;
  double scalar(NodeId id) const;
  Shape shape(NodeId id) const { return nodes_.at(id.value).shape; }
  Op op(NodeId id) const { return nodes_.at(id.value).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar output. Throws std::invalid_argument when
  /// `output` is not a scalar.
  GradientMap backward(NodeId output);

  /// Nodes whose adjoint was propagated during the last backward sweep.
  std::size_t last_backward_visits() const { return last_visits_; }

  /// Drops all nodes but keeps allocated storage.
  void clear();

 private:
  static constexpr std::uint32_t kNone = 0xffffffffu;

  struct Node {
    Op op;
    Shape shape;
    std::uint32_t a = kNone;
    std::uint32_t b = kNone;
    std::size_t offset = 0;
    LeafKey key{};
  };

  NodeId push(Op op, Shape shape, std::uint32_t a, std::uint32_t b);
  void forward(const Node& n);
  void propagate(const Node& n, std::span<const double> g);

  std::span<double> val(const Node& n) { return {values_.data() + n.offset, n.shape.size()}; }
  std::span<const double> val(const Node& n) const {
    return {values_.data() + n.offset, n.shape.size()};
  }
  std::span<double> adj(const Node& n) { return {adjoints_.data() + n.offset, n.shape.size()}; }

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> adjoints_;
  std::vector<char> reached_;
  std::size_t last_visits_ = 0;
};

/// Result of comparing an analytic gradient with central differences.
struct FdCheck {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& what, std::size_t coordinate)
      : std::runtime_error(what), coordinate_(coordinate) {}
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

/// max_i |analytic_i - fd_i| / max(1, |fd_i|) with fd_i the central
/// difference of `f` along coordinate i. Throws NonFiniteError when f is not
/// finite at a perturbed point, and std::invalid_argument for step <= 0.
FdCheck finite_difference_check(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> theta,
                                std::span<const double> analytic, double step);

}  // namespace gmlfm::tape
