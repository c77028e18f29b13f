#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mmtvae {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  exp,
  log,
  sigmoid,
  leaky_relu,
  add_scalar,
  scale,
  clamp,
  sum,
  mean,
  reshape,
  conv2d,
  avg_pool2,
  nearest_upsample2,
  concat_channels,
  slice_channels,
  custom,
};

const char* op_name(OpKind op);

// One node of the dynamically built computation graph. Nodes are created by
// ops and linked child -> parents; backward() walks the graph in reverse
// topological order exactly once.
struct TensorNode {
  OpKind op = OpKind::leaf;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool consumed = false;  // set on the root once backward has run
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this->grad and accumulates into parents' grads via accumulate_grad.
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad();
};

// Value-semantic handle to a graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t numel() const { return node_->numel(); }

  const std::vector<double>& values() const { return node_->value; }
  // Direct mutation is only valid for leaves (parameters between steps).
  std::vector<double>& mutable_values();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b);

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  double item() const;

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// When enabled, every op result is scanned for NaN/Inf and an exception is
// thrown naming the op. Tests switch this on; the trainer checks the loss
// value instead.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// --- elementwise ---------------------------------------------------------
// Binary ops accept equal shapes or NumPy-style broadcasting: shapes are
// right-aligned, missing leading axes count as 1, and axes of extent 1
// stretch. Gradients sum over stretched axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // throws on any non-positive element
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double alpha);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor clamp(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// --- reductions / shape --------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// --- spatial (NCHW) ------------------------------------------------------
// Cross-correlation with zero padding; w is (out, in, k, k).
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor avg_pool2(const Tensor& x);
Tensor nearest_upsample2(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::int64_t begin, std::int64_t end);

// --- autodiff ------------------------------------------------------------
// Seeds d(loss)/d(loss) = 1 and propagates to every reachable requires_grad
// leaf. Accumulation across fan-out is a sum. The graph is single-use.
void backward(const Tensor& loss);

// Adds g into t's gradient (no-op when t does not require grad).
void accumulate_grad(const Tensor& t, const std::vector<double>& g);
void accumulate_grad_at(const Tensor& t, std::int64_t index, double v);

// Extension point for fused ops (batch norm, triplet loss). The backward
// callback receives the node's output gradient and the inputs and must
// accumulate into the inputs' grads itself.
using CustomBackward =
    std::function<void(const std::vector<double>& out_grad, const std::vector<Tensor>& inputs)>;
Tensor custom_op(const std::string& name, std::vector<Tensor> inputs, Shape out_shape,
                 std::vector<double> out_value, CustomBackward backward);

}  // namespace mmtvae
