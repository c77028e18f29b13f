#include "mmtvae/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "node_internal.hpp"

namespace mmtvae {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::neg: return "neg";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::scale: return "scale";
    case OpKind::clamp: return "clamp";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::conv2d: return "conv2d";
    case OpKind::avg_pool2: return "avg_pool2";
    case OpKind::nearest_upsample2: return "nearest_upsample2";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::slice_channels: return "slice_channels";
    case OpKind::custom: return "custom";
  }
  return "?";
}

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

namespace {

std::atomic<bool> g_finite_checks{false};

void validate_shape(const Shape& s) {
  for (auto e : s) {
    if (e < 0) throw std::invalid_argument("tensor extent must be non-negative");
  }
}

std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("data length does not match shape " + shape_str(shape));
  auto n = std::make_shared<TensorNode>();
  n->op = OpKind::leaf;
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

void check_finite(const TensorNode& n) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  for (double v : n.value) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value produced by op '") + op_name(n.op) +
                               "'");
  }
}

using detail::make_node;

struct BroadcastPlan {
  Shape out;
  // Per output axis, element strides into a and b (0 where the axis stretches).
  std::vector<std::int64_t> astride, bstride;
};

BroadcastPlan broadcast_shapes(const Shape& a, const Shape& b, const char* what) {
  const std::size_t rank = std::max(a.size(), b.size());
  BroadcastPlan plan;
  plan.out.resize(rank);
  plan.astride.assign(rank, 0);
  plan.bstride.assign(rank, 0);

  // Row-major strides, right-aligned.
  std::vector<std::int64_t> as(rank, 1), bs(rank, 1), ae(rank, 1), be(rank, 1);
  for (std::size_t i = 0; i < a.size(); ++i) ae[rank - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) be[rank - b.size() + i] = b[i];
  for (std::size_t i = rank; i-- > 0;) {
    as[i] = (i + 1 < rank) ? as[i + 1] * ae[i + 1] : 1;
    bs[i] = (i + 1 < rank) ? bs[i + 1] * be[i + 1] : 1;
  }
  for (std::size_t i = 0; i < rank; ++i) {
    if (ae[i] == be[i]) {
      plan.out[i] = ae[i];
      plan.astride[i] = as[i];
      plan.bstride[i] = bs[i];
    } else if (ae[i] == 1) {
      plan.out[i] = be[i];
      plan.bstride[i] = bs[i];
    } else if (be[i] == 1) {
      plan.out[i] = ae[i];
      plan.astride[i] = as[i];
    } else {
      throw std::invalid_argument(std::string(what) + ": shapes " + shape_str(a) + " and " +
                                  shape_str(b) + " are not broadcastable");
    }
  }
  return plan;
}

// Calls fn(out_index, a_offset, b_offset) for every output element.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
  const std::size_t rank = plan.out.size();
  const std::int64_t n = shape_numel(plan.out);
  if (n == 0) return;
  if (rank == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t ao = 0, bo = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, ao, bo);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ao += plan.astride[d];
      bo += plan.bstride[d];
      if (idx[d] < plan.out[d]) break;
      ao -= plan.astride[d] * plan.out[d];
      bo -= plan.bstride[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

template <typename FwdFn, typename BwdFn>
Tensor binary_op(OpKind op, const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
  if (!a.defined() || !b.defined()) throw std::invalid_argument("undefined tensor operand");
  auto an = a.node_ptr();
  auto bn = b.node_ptr();

  if (same_shape(an->shape, bn->shape)) {
    const std::size_t n = an->value.size();
    std::vector<double> out(n);
    const double* pa = an->value.data();
    const double* pb = bn->value.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    return make_node(op, an->shape, std::move(out), {an, bn}, [an, bn, bwd](TensorNode& self) {
      const double* g = self.grad.data();
      const double* pa = an->value.data();
      const double* pb = bn->value.data();
      const double* py = self.value.data();
      const std::size_t n = self.value.size();
      if (an->requires_grad) {
        an->ensure_grad();
        double* ga = an->grad.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += bwd(true, g[i], pa[i], pb[i], py[i]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        double* gb = bn->grad.data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += bwd(false, g[i], pa[i], pb[i], py[i]);
      }
    });
  }

  BroadcastPlan plan = broadcast_shapes(an->shape, bn->shape, op_name(op));
  std::vector<double> out(shape_numel(plan.out));
  {
    const double* pa = an->value.data();
    const double* pb = bn->value.data();
    double* po = out.data();
    for_each_broadcast(plan, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) {
      po[i] = fwd(pa[ao], pb[bo]);
    });
  }
  return make_node(op, plan.out, std::move(out), {an, bn},
                     [an, bn, plan, bwd](TensorNode& self) {
                       const double* g = self.grad.data();
                       const double* pa = an->value.data();
                       const double* pb = bn->value.data();
                       const double* py = self.value.data();
                       if (an->requires_grad) an->ensure_grad();
                       if (bn->requires_grad) bn->ensure_grad();
                       for_each_broadcast(
                           plan, [&](std::int64_t i, std::int64_t ao, std::int64_t bo) {
                             if (an->requires_grad)
                               an->grad[ao] += bwd(true, g[i], pa[ao], pb[bo], py[i]);
                             if (bn->requires_grad)
                               bn->grad[bo] += bwd(false, g[i], pa[ao], pb[bo], py[i]);
                           });
                     });
}

template <typename FwdFn, typename BwdFn>
Tensor unary_op(OpKind op, const Tensor& a, FwdFn fwd, BwdFn bwd) {
  if (!a.defined()) throw std::invalid_argument("undefined tensor operand");
  auto an = a.node_ptr();
  const std::size_t n = an->value.size();
  std::vector<double> out(n);
  const double* pa = an->value.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
  return make_node(op, an->shape, std::move(out), {an}, [an, bwd](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const double* g = self.grad.data();
    const double* pa = an->value.data();
    const double* py = self.value.data();
    double* ga = an->grad.data();
    const std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += bwd(g[i], pa[i], py[i]);
  });
}

}  // namespace

namespace detail {

Tensor make_node(OpKind op, Shape shape, std::vector<double> value,
                 std::vector<std::shared_ptr<TensorNode>> parents,
                 std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool track = false;
  for (const auto& p : parents)
    if (p->requires_grad) track = true;
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  check_finite(*n);
  return Tensor(n);
}

}  // namespace detail

// --- Tensor --------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  return Tensor(make_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), v);
  return Tensor(make_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(make_leaf({}, {v}, requires_grad));
}

std::vector<double>& Tensor::mutable_values() {
  if (node_->op != OpKind::leaf)
    throw std::logic_error("mutable_values is only valid on leaf tensors");
  return node_->value;
}

void Tensor::set_requires_grad(bool b) {
  if (node_->op != OpKind::leaf)
    throw std::logic_error("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = b;
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

std::vector<double>& Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() requires a single-element tensor");
  return node_->value[0];
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

// --- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      OpKind::add, a, b, [](double x, double y) { return x + y; },
      [](bool, double g, double, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      OpKind::sub, a, b, [](double x, double y) { return x - y; },
      [](bool is_a, double g, double, double, double) { return is_a ? g : -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      OpKind::mul, a, b, [](double x, double y) { return x * y; },
      [](bool is_a, double g, double x, double y, double) { return is_a ? g * y : g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      OpKind::div, a, b, [](double x, double y) { return x / y; },
      [](bool is_a, double g, double, double y, double out) {
        return is_a ? g / y : -g * out / y;
      });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      OpKind::neg, a, [](double x) { return -x; }, [](double g, double, double) { return -g; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      OpKind::exp, a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (!(v > 0.0)) throw std::domain_error("log of non-positive value");
  return unary_op(
      OpKind::log, a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      OpKind::sigmoid, a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor leaky_relu(const Tensor& a, double alpha) {
  return unary_op(
      OpKind::leaky_relu, a, [alpha](double x) { return x > 0.0 ? x : alpha * x; },
      [alpha](double g, double x, double) { return x > 0.0 ? g : alpha * g; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      OpKind::add_scalar, a, [c](double x) { return x + c; },
      [](double g, double, double) { return g; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      OpKind::scale, a, [c](double x) { return c * x; },
      [c](double g, double, double) { return c * g; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary_op(
      OpKind::clamp, a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double g, double x, double) { return (x >= lo && x <= hi) ? g : 0.0; });
}

// --- reductions / shape --------------------------------------------------

Tensor sum(const Tensor& a) {
  auto an = a.node_ptr();
  double acc = 0.0;
  for (double v : an->value) acc += v;
  return make_node(OpKind::sum, Shape{}, {acc}, {an}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const double g = self.grad[0];
    for (double& gv : an->grad) gv += g;
  });
}

Tensor mean(const Tensor& a) {
  auto an = a.node_ptr();
  if (an->value.empty()) throw std::invalid_argument("mean of empty tensor");
  double acc = 0.0;
  for (double v : an->value) acc += v;
  const double inv = 1.0 / static_cast<double>(an->value.size());
  return make_node(OpKind::mean, Shape{}, {acc * inv}, {an}, [an, inv](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const double g = self.grad[0] * inv;
    for (double& gv : an->grad) gv += g;
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  auto an = a.node_ptr();
  if (shape_numel(shape) != an->numel())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(an->shape) +
                                " -> " + shape_str(shape));
  std::vector<double> out = an->value;
  return make_node(OpKind::reshape, std::move(shape), std::move(out), {an},
                     [an](TensorNode& self) {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       const std::size_t n = self.value.size();
                       for (std::size_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
                     });
}

// --- autodiff ------------------------------------------------------------

void accumulate_grad(const Tensor& t, const std::vector<double>& g) {
  auto* n = t.node();
  if (!n->requires_grad) return;
  if (g.size() != n->value.size())
    throw std::invalid_argument("accumulate_grad: size mismatch");
  n->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
}

void accumulate_grad_at(const Tensor& t, std::int64_t index, double v) {
  auto* n = t.node();
  if (!n->requires_grad) return;
  n->ensure_grad();
  n->grad[static_cast<std::size_t>(index)] += v;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on undefined tensor");
  auto root = loss.node_ptr();
  if (root->numel() != 1) throw std::invalid_argument("backward requires a scalar loss");
  if (root->consumed) throw std::logic_error("backward: graph already consumed");
  root->consumed = true;

  // Post-order DFS (parents first), then process reversed: every consumer of
  // a node runs before the node itself, so grads are complete on arrival.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  if (seen.insert(root.get()).second) stack.push_back({root.get(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) {
      n->backward_fn(*n);
      n->backward_fn = nullptr;  // frees saved state as we go
    }
  }
}

Tensor custom_op(const std::string& name, std::vector<Tensor> inputs, Shape out_shape,
                 std::vector<double> out_value, CustomBackward bw) {
  (void)name;
  std::vector<std::shared_ptr<TensorNode>> parents;
  parents.reserve(inputs.size());
  for (const auto& t : inputs) parents.push_back(t.node_ptr());
  auto captured_inputs = std::move(inputs);
  return make_node(
      OpKind::custom, std::move(out_shape), std::move(out_value), std::move(parents),
      [captured_inputs, bw](TensorNode& self) { bw(self.grad, captured_inputs); });
}

}  // namespace mmtvae
