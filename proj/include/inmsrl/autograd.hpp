#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Var is a shared handle to a graph node. Ops record their parents and a
// backward closure only when some input requires a gradient, so inference
// with frozen parameters builds no graph. Parameters are leaf nodes whose
// gradients accumulate across backward() calls until zero_grad().

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "inmsrl/types.hpp"

namespace inmsrl::ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var constant(Shape shape, std::vector<double> value);
  static Var parameter(Shape shape, std::vector<double> value);
  static Var zeros(Shape shape);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() { return node_->ensure_grad(); }
  double item() const;
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Back-propagates d(loss)/d(.) = seed from a scalar loss.
void backward(const Var& loss, double seed = 1.0);

// Elementwise arithmetic (identical shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a * m with a constant mask/weight of the same shape.
Var mul_const(const Var& a, std::span<const double> m);

Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var sigmoid(const Var& a);
Var log1p(const Var& a);
/// log(a + eps)
Var log_eps(const Var& a, double eps);

Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);

/// [C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W]
Var concat_channels(const Var& a, const Var& b);

/// [Cin,H,W] * weight[Cout,Cin,k,k] + bias[Cout] -> [Cout,Ho,Wo]
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

/// Adjoint of conv2d. weight[Cin,Cout,k,k]; the output size is explicit so
/// decoders can match their skip connections exactly.
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad,
                     int out_h, int out_w);

/// [C,T,F] -> [C*F], averaging over the time axis.
Var time_mean_flatten(const Var& x);

/// weight[Out,In] * x[In] + bias[Out]
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Right-multiplies the last axis by a constant matrix: [...,F] x [F,M] -> [...,M].
Var project_last_axis(const Var& x, std::span<const double> matrix, int out_dim);

/// Slice [lo, hi) of a flat vector.
Var slice(const Var& v, int lo, int hi);

// Losses and distances (scalars).
Var l1_mean(const Var& x, const Var& y);
Var mse_mean(const Var& x, const Var& y);
Var l2_distance(const Var& a, const Var& b);
/// max(0, a)
Var hinge(const Var& a);

}  // namespace inmsrl::ag
