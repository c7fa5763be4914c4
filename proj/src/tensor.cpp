#include "dseb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace dseb {

namespace {

thread_local int g_nograd_depth = 0;

// grad(..., create_graph=true) must record even if the caller sits inside a
// NoGradGuard, so it temporarily lifts the suppression.
struct GradOverride {
  int saved;
  GradOverride() : saved(g_nograd_depth) { g_nograd_depth = 0; }
  ~GradOverride() { g_nograd_depth = saved; }
};

}  // namespace

bool grad_enabled() { return g_nograd_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_nograd_depth; }
NoGradGuard::~NoGradGuard() { --g_nograd_depth; }

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << '}';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Neg: return "neg";
    case OpKind::Scale: return "scale";
    case OpKind::Relu: return "relu";
    case OpKind::SumAll: return "sum_all";
    case OpKind::BroadcastScalar: return "broadcast_scalar";
    case OpKind::Reshape: return "reshape";
    case OpKind::MatVec: return "matvec";
    case OpKind::MatVecT: return "matvec_t";
    case OpKind::Outer: return "outer";
    case OpKind::ConvCore: return "conv_core";
    case OpKind::ConvGradInput: return "conv_grad_input";
    case OpKind::ConvGradWeight: return "conv_grad_weight";
    case OpKind::BroadcastChannel: return "broadcast_channel";
    case OpKind::ChannelSum: return "channel_sum";
    case OpKind::AvgDown: return "avg_downsample";
    case OpKind::AvgUp: return "avg_upsample";
  }
  return "unknown";
}

namespace {

using i64 = std::int64_t;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

void check_finite(const std::vector<real>& values, const char* producer) {
  for (real v : values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by ") + producer);
    }
  }
}

// ---- kernels -------------------------------------------------------------

void conv_core_kernel(std::vector<real>& out, const Shape& os,
                      std::span<const real> x, const Shape& xs,
                      std::span<const real> w, const Shape& ws,
                      int stride, int pad) {
  const i64 N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const i64 O = ws[0], KH = ws[2], KW = ws[3];
  const i64 HO = os[2], WO = os[3];
  for (i64 n = 0; n < N; ++n) {
    for (i64 o = 0; o < O; ++o) {
      const real* wo = w.data() + o * C * KH * KW;
      real* op = out.data() + ((n * O + o) * HO) * WO;
      for (i64 p = 0; p < HO; ++p) {
        const i64 ih0 = p * stride - pad;
        const i64 i_lo = std::max<i64>(0, -ih0);
        const i64 i_hi = std::min<i64>(KH, H - ih0);
        for (i64 q = 0; q < WO; ++q) {
          const i64 iw0 = q * stride - pad;
          const i64 j_lo = std::max<i64>(0, -iw0);
          const i64 j_hi = std::min<i64>(KW, W - iw0);
          real acc = 0;
          for (i64 c = 0; c < C; ++c) {
            const real* xc = x.data() + ((n * C + c) * H) * W;
            const real* wc = wo + c * KH * KW;
            for (i64 i = i_lo; i < i_hi; ++i) {
              const real* xrow = xc + (ih0 + i) * W + iw0;
              const real* wrow = wc + i * KW;
              for (i64 j = j_lo; j < j_hi; ++j) acc += xrow[j] * wrow[j];
            }
          }
          op[p * WO + q] = acc;
        }
      }
    }
  }
}

void conv_grad_input_kernel(std::vector<real>& out, const Shape& os,
                            std::span<const real> g, const Shape& gs,
                            std::span<const real> w, const Shape& ws,
                            int stride, int pad) {
  const i64 N = os[0], C = os[1], H = os[2], W = os[3];
  const i64 O = ws[0], KH = ws[2], KW = ws[3];
  const i64 HO = gs[2], WO = gs[3];
  for (i64 n = 0; n < N; ++n) {
    for (i64 o = 0; o < O; ++o) {
      const real* gp = g.data() + ((n * O + o) * HO) * WO;
      const real* wo = w.data() + o * C * KH * KW;
      for (i64 p = 0; p < HO; ++p) {
        const i64 ih0 = p * stride - pad;
        const i64 i_lo = std::max<i64>(0, -ih0);
        const i64 i_hi = std::min<i64>(KH, H - ih0);
        for (i64 q = 0; q < WO; ++q) {
          const i64 iw0 = q * stride - pad;
          const i64 j_lo = std::max<i64>(0, -iw0);
          const i64 j_hi = std::min<i64>(KW, W - iw0);
          const real g0 = gp[p * WO + q];
          for (i64 c = 0; c < C; ++c) {
            real* oc = out.data() + ((n * C + c) * H) * W;
            const real* wc = wo + c * KH * KW;
            for (i64 i = i_lo; i < i_hi; ++i) {
              real* orow = oc + (ih0 + i) * W + iw0;
              const real* wrow = wc + i * KW;
              for (i64 j = j_lo; j < j_hi; ++j) orow[j] += g0 * wrow[j];
            }
          }
        }
      }
    }
  }
}

void conv_grad_weight_kernel(std::vector<real>& out, const Shape& os,
                             std::span<const real> x, const Shape& xs,
                             std::span<const real> g, const Shape& gs,
                             int stride, int pad) {
  const i64 N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const i64 O = os[0], KH = os[2], KW = os[3];
  const i64 HO = gs[2], WO = gs[3];
  for (i64 n = 0; n < N; ++n) {
    for (i64 o = 0; o < O; ++o) {
      const real* gp = g.data() + ((n * O + o) * HO) * WO;
      real* wo = out.data() + o * C * KH * KW;
      for (i64 p = 0; p < HO; ++p) {
        const i64 ih0 = p * stride - pad;
        const i64 i_lo = std::max<i64>(0, -ih0);
        const i64 i_hi = std::min<i64>(KH, H - ih0);
        for (i64 q = 0; q < WO; ++q) {
          const i64 iw0 = q * stride - pad;
          const i64 j_lo = std::max<i64>(0, -iw0);
          const i64 j_hi = std::min<i64>(KW, W - iw0);
          const real g0 = gp[p * WO + q];
          for (i64 c = 0; c < C; ++c) {
            const real* xc = x.data() + ((n * C + c) * H) * W;
            real* wc = wo + c * KH * KW;
            for (i64 i = i_lo; i < i_hi; ++i) {
              const real* xrow = xc + (ih0 + i) * W + iw0;
              real* wrow = wc + i * KW;
              for (i64 j = j_lo; j < j_hi; ++j) wrow[j] += g0 * xrow[j];
            }
          }
        }
      }
    }
  }
}

std::vector<real> compute_values(OpKind kind, const Shape& os,
                                 const Shape& sa, std::span<const real> a,
                                 const Shape* sb, std::span<const real> b,
                                 int stride, int padding, int factor, real scalar) {
  std::vector<real> out(static_cast<std::size_t>(numel(os)), real(0));
  switch (kind) {
    case OpKind::Leaf:
      fail("leaf nodes have no kernel");
    case OpKind::Add:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
      break;
    case OpKind::Sub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
      break;
    case OpKind::Mul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
      break;
    case OpKind::Neg:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a[i];
      break;
    case OpKind::Scale:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * scalar;
      break;
    case OpKind::Relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > real(0) ? a[i] : real(0);
      break;
    case OpKind::SumAll: {
      real acc = 0;
      for (real v : a) acc += v;
      out[0] = acc;
      break;
    }
    case OpKind::BroadcastScalar:
      std::fill(out.begin(), out.end(), a[0]);
      break;
    case OpKind::Reshape:
      std::copy(a.begin(), a.end(), out.begin());
      break;
    case OpKind::MatVec: {
      const i64 O = sa[0], D = sa[1];
      for (i64 o = 0; o < O; ++o) {
        const real* row = a.data() + o * D;
        real acc = 0;
        for (i64 d = 0; d < D; ++d) acc += row[d] * b[d];
        out[static_cast<std::size_t>(o)] = acc;
      }
      break;
    }
    case OpKind::MatVecT: {
      const i64 O = sa[0], D = sa[1];
      for (i64 o = 0; o < O; ++o) {
        const real* row = a.data() + o * D;
        const real y = b[static_cast<std::size_t>(o)];
        for (i64 d = 0; d < D; ++d) out[static_cast<std::size_t>(d)] += row[d] * y;
      }
      break;
    }
    case OpKind::Outer: {
      const i64 O = sa[0], D = (*sb)[0];
      for (i64 o = 0; o < O; ++o)
        for (i64 d = 0; d < D; ++d)
          out[static_cast<std::size_t>(o * D + d)] = a[static_cast<std::size_t>(o)] * b[static_cast<std::size_t>(d)];
      break;
    }
    case OpKind::ConvCore:
      conv_core_kernel(out, os, a, sa, b, *sb, stride, padding);
      break;
    case OpKind::ConvGradInput:
      conv_grad_input_kernel(out, os, a, sa, b, *sb, stride, padding);
      break;
    case OpKind::ConvGradWeight:
      conv_grad_weight_kernel(out, os, a, sa, b, *sb, stride, padding);
      break;
    case OpKind::BroadcastChannel: {
      const i64 N = os[0], O = os[1], HW = os[2] * os[3];
      for (i64 n = 0; n < N; ++n)
        for (i64 o = 0; o < O; ++o) {
          real* dst = out.data() + (n * O + o) * HW;
          std::fill(dst, dst + HW, a[static_cast<std::size_t>(o)]);
        }
      break;
    }
    case OpKind::ChannelSum: {
      const i64 N = sa[0], O = sa[1], HW = sa[2] * sa[3];
      for (i64 n = 0; n < N; ++n)
        for (i64 o = 0; o < O; ++o) {
          const real* src = a.data() + (n * O + o) * HW;
          real acc = 0;
          for (i64 i = 0; i < HW; ++i) acc += src[i];
          out[static_cast<std::size_t>(o)] += acc;
        }
      break;
    }
    case OpKind::AvgDown: {
      const i64 N = sa[0], C = sa[1], H = sa[2], W = sa[3];
      const i64 f = factor, HO = H / f, WO = W / f;
      const real inv = real(1) / (real(f) * real(f));
      for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
          const real* xc = a.data() + ((n * C + c) * H) * W;
          real* oc = out.data() + ((n * C + c) * HO) * WO;
          for (i64 p = 0; p < HO; ++p)
            for (i64 q = 0; q < WO; ++q) {
              real acc = 0;
              for (i64 i = 0; i < f; ++i) {
                const real* row = xc + (p * f + i) * W + q * f;
                for (i64 j = 0; j < f; ++j) acc += row[j];
              }
              oc[p * WO + q] = acc * inv;
            }
        }
      break;
    }
    case OpKind::AvgUp: {
      const i64 N = os[0], C = os[1], H = os[2], W = os[3];
      const i64 f = factor, HI = sa[2], WI = sa[3];
      const real inv = real(1) / (real(f) * real(f));
      for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
          const real* gc = a.data() + ((n * C + c) * HI) * WI;
          real* oc = out.data() + ((n * C + c) * H) * W;
          for (i64 h = 0; h < H; ++h)
            for (i64 w = 0; w < W; ++w)
              oc[h * W + w] = gc[(h / f) * WI + (w / f)] * inv;
        }
      break;
    }
  }
  return out;
}

}  // namespace

// ---- Tensor --------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<real> values) {
  require(numel(shape) == static_cast<std::int64_t>(values.size()),
          "tensor: " + shape_str(shape) + " does not hold " + std::to_string(values.size()) + " values");
  check_finite(values, "tensor construction");
  shape_ = std::move(shape);
  data_ = std::make_shared<const std::vector<real>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
  return full(std::move(shape), real(0));
}

Tensor Tensor::full(Shape shape, real value) {
  std::vector<real> v(static_cast<std::size_t>(numel(shape)), value);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(real value) {
  return Tensor(Shape{1}, std::vector<real>{value});
}

std::span<const real> Tensor::values() const {
  require(data_ != nullptr, "tensor: reading values of a default-constructed tensor");
  return {data_->data(), data_->size()};
}

real Tensor::item() const {
  require(size() == 1, "item: tensor has " + std::to_string(size()) + " elements, expected 1");
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.graph_ = nullptr;
  t.node_ = -1;
  return t;
}

// ---- Graph ---------------------------------------------------------------

struct OpAccess {
  static Tensor attached(Graph* g, int node) {
    const Graph::Node& n = g->nodes_[static_cast<std::size_t>(node)];
    Tensor t;
    t.shape_ = n.shape;
    t.data_ = n.data;
    t.graph_ = g;
    t.node_ = node;
    return t;
  }
  static int push_op(Graph* g, OpKind kind, int ia, int ib, Shape shape,
                     std::vector<real> values, int stride, int padding, int factor,
                     real scalar) {
    Graph::Node n;
    n.kind = kind;
    n.in = {ia, ib};
    n.shape = std::move(shape);
    n.data = std::make_shared<const std::vector<real>>(std::move(values));
    n.stride = stride;
    n.padding = padding;
    n.factor = factor;
    n.scalar = scalar;
    return g->push(std::move(n));
  }
  static const Graph::Node& node(const Graph* g, int i) {
    return g->nodes_[static_cast<std::size_t>(i)];
  }
};

int Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Graph::leaf(const Tensor& value) {
  require(value.defined(), "leaf: undefined tensor");
  Node n;
  n.kind = OpKind::Leaf;
  n.shape = value.shape();
  n.data = value.data_;
  int id = push(std::move(n));
  return OpAccess::attached(this, id);
}

static void check_node_index(const Graph* g, int node) {
  if (node < 0 || node >= g->size()) {
    throw std::out_of_range("graph: node " + std::to_string(node) + " of " + std::to_string(g->size()));
  }
}

OpKind Graph::kind(int node) const {
  check_node_index(this, node);
  return nodes_[static_cast<std::size_t>(node)].kind;
}

const Shape& Graph::shape(int node) const {
  check_node_index(this, node);
  return nodes_[static_cast<std::size_t>(node)].shape;
}

std::span<const real> Graph::values(int node) const {
  check_node_index(this, node);
  const auto& d = nodes_[static_cast<std::size_t>(node)].data;
  return {d->data(), d->size()};
}

std::array<int, 2> Graph::inputs(int node) const {
  check_node_index(this, node);
  return nodes_[static_cast<std::size_t>(node)].in;
}

Tensor Graph::tensor(int node) {
  check_node_index(this, node);
  return OpAccess::attached(this, node);
}

std::vector<real> Graph::recompute(int node) const {
  check_node_index(this, node);
  const Node& n = nodes_[static_cast<std::size_t>(node)];
  if (n.kind == OpKind::Leaf) return *n.data;
  const Node& a = nodes_[static_cast<std::size_t>(n.in[0])];
  const Node* b = n.in[1] >= 0 ? &nodes_[static_cast<std::size_t>(n.in[1])] : nullptr;
  return compute_values(n.kind, n.shape, a.shape, {a.data->data(), a.data->size()},
                        b ? &b->shape : nullptr,
                        b ? std::span<const real>{b->data->data(), b->data->size()}
                          : std::span<const real>{},
                        n.stride, n.padding, n.factor, n.scalar);
}

// ---- op construction -----------------------------------------------------

namespace {

int ensure_on_graph(Graph* g, const Tensor& t) {
  if (t.attached()) return t.node();
  return g->leaf(t).node();
}

Tensor make_op(OpKind kind, const Tensor& a, const Tensor* b, Shape out_shape,
               int stride = 0, int padding = 0, int factor = 0, real scalar = 0) {
  std::vector<real> out = compute_values(
      kind, out_shape, a.shape(), a.values(), b ? &b->shape() : nullptr,
      b ? b->values() : std::span<const real>{}, stride, padding, factor, scalar);
  check_finite(out, op_name(kind));

  Graph* g = a.attached() ? a.graph() : nullptr;
  if (b && b->attached()) {
    require(!g || g == b->graph(),
            std::string(op_name(kind)) + ": operands belong to different graphs");
    g = b->graph();
  }
  if (!g || !grad_enabled()) {
    return Tensor(std::move(out_shape), std::move(out));
  }
  int ia = ensure_on_graph(g, a);
  int ib = b ? ensure_on_graph(g, *b) : -1;
  int id = OpAccess::push_op(g, kind, ia, ib, std::move(out_shape), std::move(out),
                             stride, padding, factor, scalar);
  return OpAccess::attached(g, id);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_4d(const char* op, const Tensor& t) {
  require(t.shape().size() == 4,
          std::string(op) + ": expected a 4-d tensor, got " + shape_str(t.shape()));
}

// Backward-pass primitives. They are ordinary recordable ops; they only lack
// a public declaration because nothing outside the tape needs them directly.

Tensor matvec(const Tensor& w, const Tensor& v) {
  return make_op(OpKind::MatVec, w, &v, Shape{w.shape()[0]});
}

Tensor matvec_t(const Tensor& w, const Tensor& y) {
  return make_op(OpKind::MatVecT, w, &y, Shape{w.shape()[1]});
}

Tensor outer(const Tensor& u, const Tensor& v) {
  return make_op(OpKind::Outer, u, &v, Shape{u.shape()[0], v.shape()[0]});
}

Tensor broadcast_scalar(const Tensor& s, Shape shape) {
  return make_op(OpKind::BroadcastScalar, s, nullptr, std::move(shape));
}

Tensor broadcast_channel(const Tensor& bias, Shape shape) {
  return make_op(OpKind::BroadcastChannel, bias, nullptr, std::move(shape));
}

Tensor channel_sum(const Tensor& x) {
  return make_op(OpKind::ChannelSum, x, nullptr, Shape{x.shape()[1]});
}

Tensor conv_core(const Tensor& x, const Tensor& w, int stride, int padding) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const i64 ho = (xs[2] + 2 * padding - ws[2]) / stride + 1;
  const i64 wo = (xs[3] + 2 * padding - ws[3]) / stride + 1;
  return make_op(OpKind::ConvCore, x, &w, Shape{xs[0], ws[0], ho, wo}, stride, padding);
}

Tensor conv_grad_input(const Tensor& g, const Tensor& w, int stride, int padding, Shape x_shape) {
  return make_op(OpKind::ConvGradInput, g, &w, std::move(x_shape), stride, padding);
}

Tensor conv_grad_weight(const Tensor& x, const Tensor& g, int stride, int padding, Shape w_shape) {
  return make_op(OpKind::ConvGradWeight, x, &g, std::move(w_shape), stride, padding);
}

Tensor avg_upsample(const Tensor& g, int factor, Shape x_shape) {
  return make_op(OpKind::AvgUp, g, nullptr, std::move(x_shape), 0, 0, factor);
}

}  // namespace

// ---- public ops ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return make_op(OpKind::Add, a, &b, a.shape());
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return make_op(OpKind::Sub, a, &b, a.shape());
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  return make_op(OpKind::Mul, a, &b, a.shape());
}

Tensor neg(const Tensor& a) { return make_op(OpKind::Neg, a, nullptr, a.shape()); }

Tensor scale(const Tensor& a, real c) {
  require(std::isfinite(c), "scale: non-finite factor");
  return make_op(OpKind::Scale, a, nullptr, a.shape(), 0, 0, 0, c);
}

Tensor relu(const Tensor& a) { return make_op(OpKind::Relu, a, nullptr, a.shape()); }

Tensor sum_all(const Tensor& a) { return make_op(OpKind::SumAll, a, nullptr, Shape{1}); }

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: " + shape_str(a.shape()) + " to " +
                                        shape_str(shape) + " changes the element count");
  return make_op(OpKind::Reshape, a, nullptr, std::move(shape));
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
  require_4d("conv2d", x);
  require_4d("conv2d", weight);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require(stride >= 1, "conv2d: stride must be positive");
  require(padding >= 0, "conv2d: padding must be non-negative");
  require(xs[1] == ws[1], "conv2d: input channels " + std::to_string(xs[1]) +
                              " do not match weight channels " + std::to_string(ws[1]));
  require(xs[2] + 2 * padding >= ws[2] && xs[3] + 2 * padding >= ws[3],
          "conv2d: kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
  require(bias.shape() == Shape{ws[0]},
          "conv2d: bias " + shape_str(bias.shape()) + " does not match " +
              std::to_string(ws[0]) + " output channels");
  Tensor core = conv_core(x, weight, stride, padding);
  return add(core, broadcast_channel(bias, core.shape()));
}

Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(weight.shape().size() == 2,
          "fully_connected: weight must be 2-d, got " + shape_str(weight.shape()));
  const i64 d_out = weight.shape()[0];
  const i64 d_in = weight.shape()[1];
  require(x.size() == d_in, "fully_connected: input with " + std::to_string(x.size()) +
                                " values does not match weight " + shape_str(weight.shape()));
  require(bias.shape() == Shape{d_out},
          "fully_connected: bias " + shape_str(bias.shape()) + " does not match " +
              std::to_string(d_out) + " outputs");
  Tensor flat = x.shape() == Shape{d_in} ? x : reshape(x, {d_in});
  return add(matvec(weight, flat), bias);
}

Tensor avg_downsample(const Tensor& x, int factor) {
  require_4d("avg_downsample", x);
  require(factor >= 1, "avg_downsample: factor must be positive");
  const Shape& xs = x.shape();
  require(xs[2] % factor == 0 && xs[3] % factor == 0,
          "avg_downsample: factor " + std::to_string(factor) + " does not divide " +
              shape_str(xs));
  return make_op(OpKind::AvgDown, x, nullptr,
                 Shape{xs[0], xs[1], xs[2] / factor, xs[3] / factor}, 0, 0, factor);
}

// ---- reverse-mode differentiation ----------------------------------------

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph) {
  require(output.defined(), "grad: undefined output");
  require(output.size() == 1,
          "grad: output has " + std::to_string(output.size()) + " elements, expected 1");

  auto zero_like = [](const Tensor& t) { return Tensor::zeros(t.shape()); };

  std::vector<Tensor> results(wrt.size());
  if (!output.attached()) {
    for (std::size_t i = 0; i < wrt.size(); ++i) results[i] = zero_like(wrt[i]);
    return results;
  }

  Graph* g = output.graph();
  const int out = output.node();
  const int n = out + 1;

  // Forward cone of the wrt set. Anything outside it has zero adjoint, and
  // the per-input guards below skip the matching VJP kernels entirely; that
  // is what keeps image-only gradients from paying for weight gradients.
  std::vector<char> dep(static_cast<std::size_t>(n), 0);
  bool any = false;
  for (const Tensor& t : wrt) {
    if (t.attached() && t.graph() == g && t.node() < n) {
      dep[static_cast<std::size_t>(t.node())] = 1;
      any = true;
    }
  }
  if (any) {
    for (int i = 0; i < n; ++i) {
      if (dep[static_cast<std::size_t>(i)]) continue;
      const auto& node = OpAccess::node(g, i);
      for (int j : node.in) {
        if (j >= 0 && dep[static_cast<std::size_t>(j)]) {
          dep[static_cast<std::size_t>(i)] = 1;
          break;
        }
      }
    }
  }
  if (!dep[static_cast<std::size_t>(out)]) {
    for (std::size_t i = 0; i < wrt.size(); ++i) results[i] = zero_like(wrt[i]);
    return results;
  }

  auto dep_ok = [&](int node) { return node >= 0 && dep[static_cast<std::size_t>(node)]; };

  std::optional<NoGradGuard> no_grad;
  std::optional<GradOverride> with_grad;
  if (create_graph) {
    with_grad.emplace();
  } else {
    no_grad.emplace();
  }

  std::vector<Tensor> adj(static_cast<std::size_t>(n));
  adj[static_cast<std::size_t>(out)] = Tensor(g->shape(out), std::vector<real>{real(1)});

  auto contribute = [&](int target, Tensor value) {
    Tensor& slot = adj[static_cast<std::size_t>(target)];
    slot = slot.defined() ? add(slot, std::move(value)) : std::move(value);
  };

  for (int i = out; i >= 0; --i) {
    if (!adj[static_cast<std::size_t>(i)].defined()) continue;

    // Copy what the VJPs need first: recording appends nodes, which can
    // reallocate the node storage behind this reference.
    OpKind kind;
    std::array<int, 2> in;
    int stride, padding, factor;
    {
      const auto& node = OpAccess::node(g, i);
      kind = node.kind;
      in = node.in;
      stride = node.stride;
      padding = node.padding;
      factor = node.factor;
    }
    if (kind == OpKind::Leaf) continue;

    const Tensor a = adj[static_cast<std::size_t>(i)];
    const bool need0 = dep_ok(in[0]);
    const bool need1 = dep_ok(in[1]);

    switch (kind) {
      case OpKind::Leaf:
        break;
      case OpKind::Add:
        if (need0) contribute(in[0], a);
        if (need1) contribute(in[1], a);
        break;
      case OpKind::Sub:
        if (need0) contribute(in[0], a);
        if (need1) contribute(in[1], neg(a));
        break;
      case OpKind::Mul:
        if (need0) contribute(in[0], mul(a, g->tensor(in[1])));
        if (need1) contribute(in[1], mul(a, g->tensor(in[0])));
        break;
      case OpKind::Neg:
        if (need0) contribute(in[0], neg(a));
        break;
      case OpKind::Scale: {
        real c = OpAccess::node(g, i).scalar;
        if (need0) contribute(in[0], scale(a, c));
        break;
      }
      case OpKind::Relu: {
        // The mask enters as a constant, so the rectifier's second
        // derivative is taken to be identically zero.
        if (need0) {
          std::span<const real> v = g->values(in[0]);
          std::vector<real> mask(v.size());
          for (std::size_t k = 0; k < v.size(); ++k) mask[k] = v[k] > real(0) ? real(1) : real(0);
          contribute(in[0], mul(a, Tensor(g->shape(in[0]), std::move(mask))));
        }
        break;
      }
      case OpKind::SumAll:
        if (need0) contribute(in[0], broadcast_scalar(a, g->shape(in[0])));
        break;
      case OpKind::BroadcastScalar:
        if (need0) contribute(in[0], reshape(sum_all(a), g->shape(in[0])));
        break;
      case OpKind::Reshape:
        if (need0) contribute(in[0], reshape(a, g->shape(in[0])));
        break;
      case OpKind::MatVec:
        if (need0) contribute(in[0], outer(a, g->tensor(in[1])));
        if (need1) contribute(in[1], matvec_t(g->tensor(in[0]), a));
        break;
      case OpKind::MatVecT:
        if (need0) contribute(in[0], outer(g->tensor(in[1]), a));
        if (need1) contribute(in[1], matvec(g->tensor(in[0]), a));
        break;
      case OpKind::Outer:
        if (need0) contribute(in[0], matvec(a, g->tensor(in[1])));
        if (need1) contribute(in[1], matvec_t(a, g->tensor(in[0])));
        break;
      case OpKind::ConvCore:
        if (need0)
          contribute(in[0], conv_grad_input(a, g->tensor(in[1]), stride, padding, g->shape(in[0])));
        if (need1)
          contribute(in[1], conv_grad_weight(g->tensor(in[0]), a, stride, padding, g->shape(in[1])));
        break;
      case OpKind::ConvGradInput:
        // out = Dx(g, w); d/dg is a plain convolution of the adjoint with w,
        // d/dw correlates the adjoint (an x-shaped tensor) with g.
        if (need0) contribute(in[0], conv_core(a, g->tensor(in[1]), stride, padding));
        if (need1)
          contribute(in[1], conv_grad_weight(a, g->tensor(in[0]), stride, padding, g->shape(in[1])));
        break;
      case OpKind::ConvGradWeight:
        // out = Dw(x, g); d/dx scatters the adjoint as an input gradient,
        // d/dg convolves x with the adjoint acting as the kernel.
        if (need0)
          contribute(in[0], conv_grad_input(g->tensor(in[1]), a, stride, padding, g->shape(in[0])));
        if (need1) contribute(in[1], conv_core(g->tensor(in[0]), a, stride, padding));
        break;
      case OpKind::BroadcastChannel:
        if (need0) contribute(in[0], channel_sum(a));
        break;
      case OpKind::ChannelSum:
        if (need0) contribute(in[0], broadcast_channel(a, g->shape(in[0])));
        break;
      case OpKind::AvgDown:
        if (need0) contribute(in[0], avg_upsample(a, factor, g->shape(in[0])));
        break;
      case OpKind::AvgUp:
        if (need0) contribute(in[0], avg_downsample(a, factor));
        break;
    }
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const Tensor& t = wrt[i];
    if (t.attached() && t.graph() == g && t.node() < n &&
        adj[static_cast<std::size_t>(t.node())].defined()) {
      Tensor r = adj[static_cast<std::size_t>(t.node())];
      results[i] = create_graph ? r : r.detach();
    } else {
      results[i] = zero_like(t);
    }
  }
  return results;
}

std::vector<Tensor> grad(const Tensor& output, std::initializer_list<Tensor> wrt,
                         bool create_graph) {
  std::vector<Tensor> v(wrt);
  return grad(output, std::span<const Tensor>(v), create_graph);
}

real finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                             const Tensor& x, real eps) {
  require(x.defined(), "finite_difference_check: undefined input");
  require(eps > 0, "finite_difference_check: eps must be positive");

  Graph g;
  Tensor xa = g.leaf(x);
  Tensor y = f(xa);
  require(y.size() == 1, "finite_difference_check: f must produce a single value");
  Tensor analytic = grad(y, {xa}, false)[0];
  std::span<const real> av = analytic.values();

  NoGradGuard quiet;
  std::vector<real> probe(x.values().begin(), x.values().end());
  real worst = 0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const real saved = probe[i];
    probe[i] = saved + eps;
    const real fp = f(Tensor(x.shape(), probe)).item();
    probe[i] = saved - eps;
    const real fm = f(Tensor(x.shape(), probe)).item();
    probe[i] = saved;
    const real numeric = (fp - fm) / (2 * eps);
    const real err = std::abs(av[i] - numeric) / std::max(real(1), std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dseb
