// Dense tensors plus a tape-based reverse-mode autodiff graph.
//
// Every operation records a node describing how its output was computed.
// grad() walks the tape backwards and, crucially, expresses each
// vector-Jacobian product using the same recordable operations, so with
// create_graph=true the returned gradients are themselves differentiable.
// That property is what lets the trainer backpropagate through an unrolled
// gradient-descent inner loop.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dseb {

#ifdef DSEB_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,           // multiply by a compile-time constant scalar
  Relu,
  SumAll,          // reduce everything to a shape-{1} scalar
  BroadcastScalar, // opposite of SumAll: fill a shape with a scalar
  Reshape,
  MatVec,          // W{O,D} . v{D} -> {O}
  MatVecT,         // W{O,D}^T . y{O} -> {D}
  Outer,           // u{O} outer v{D} -> {O,D}
  ConvCore,        // cross-correlation of x{N,C,H,W} with w{O,C,kh,kw}
  ConvGradInput,   // adjoint of ConvCore w.r.t. x
  ConvGradWeight,  // adjoint of ConvCore w.r.t. w
  BroadcastChannel,// b{O} -> {N,O,H,W}
  ChannelSum,      // {N,O,H,W} -> {O}, adjoint of BroadcastChannel
  AvgDown,         // non-overlapping window mean, factor f
  AvgUp,           // adjoint of AvgDown: replicate and divide by f*f
};

const char* op_name(OpKind kind);

class Graph;

// Value handle. Either detached (plain data) or attached to a Graph node.
// Copies are cheap: the payload is shared and immutable.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<real> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, real value);
  static Tensor scalar(real value);

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_ ? data_->size() : 0); }
  std::span<const real> values() const;
  real item() const;  // requires a single-element tensor

  bool attached() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int node() const { return node_; }
  Tensor detach() const;

  bool defined() const { return data_ != nullptr; }

 private:
  friend class Graph;
  friend struct OpAccess;
  Shape shape_;
  std::shared_ptr<const std::vector<real>> data_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

// Append-only tape. Nodes are never mutated after creation, so replaying a
// node's kernel from its stored inputs must reproduce its stored values.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Registers the tensor's data as a leaf and returns an attached handle.
  Tensor leaf(const Tensor& value);

  int size() const { return static_cast<int>(nodes_.size()); }
  OpKind kind(int node) const;
  const Shape& shape(int node) const;
  std::span<const real> values(int node) const;
  std::array<int, 2> inputs(int node) const;
  Tensor tensor(int node);  // attached handle for an existing node

  // Re-executes the node's kernel from its inputs' stored values.
  // Leaves return a copy of their payload.
  std::vector<real> recompute(int node) const;

 private:
  friend struct OpAccess;

  struct Node {
    OpKind kind = OpKind::Leaf;
    std::array<int, 2> in{-1, -1};
    Shape shape;
    std::shared_ptr<const std::vector<real>> data;
    int stride = 0;
    int padding = 0;
    int factor = 0;
    real scalar = 0;
  };

  int push(Node node);
  std::vector<Node> nodes_;
};

// While alive on a thread, operations do not record graph nodes and grad()
// with create_graph=false uses it internally. Nests.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Elementwise and structural ops. Mixing attached and detached operands is
// fine; a detached operand is promoted to a constant leaf when recording.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, real c);
Tensor relu(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// x {N,C,H,W}, weight {O,C,kh,kw} with odd square kernels expected by
// callers that rely on size preservation, bias {O}. Output {N,O,H',W'} with
// H' = (H + 2*padding - kh)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

// x flattened to {D}; weight {Dout,D}; bias {Dout}.
Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Non-overlapping window mean over the two trailing dims of {N,C,H,W}.
// factor must divide H and W.
Tensor avg_downsample(const Tensor& x, int factor);

// d(output)/d(wrt_i), seeded with 1. output must be a single-element tensor.
// wrt entries the output does not depend on yield zero tensors. With
// create_graph=true every backward computation is recorded on the same
// graph, making the results differentiable in turn.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph = false);
std::vector<Tensor> grad(const Tensor& output, std::initializer_list<Tensor> wrt,
                         bool create_graph = false);

// Compares the analytic gradient of a scalar-valued f against central
// differences at x. Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
real finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                             const Tensor& x, real eps = 1e-5);

}  // namespace dseb
