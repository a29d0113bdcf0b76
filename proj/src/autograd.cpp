#include "inmsrl/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace inmsrl::ag {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapR = Eigen::Map<const MatR>;

// Products run on owned (aligned) copies: Eigen picks its vector peeling, and
// with it the summation order, from the operands' addresses.
MatR owned(const double* p, Eigen::Index rows, Eigen::Index cols) { return CMapR(p, rows, cols); }

void accumulate(double* dst, const MatR& m) {
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

void assign(double* dst, const MatR& m) { std::copy(m.data(), m.data() + m.size(), dst); }

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

void check_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

Var make(Shape shape, std::vector<double> value, std::initializer_list<const Var*> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const Var* p : parents)
    if (p->defined() && p->requires_grad()) n->requires_grad = true;
  if (n->requires_grad)
    for (const Var* p : parents)
      if (p->defined()) n->parents.push_back(p->ptr());
  return Var(std::move(n));
}

// Parent gradient buffer, or nullptr when that parent is not differentiable.
double* grad_of(Node* p) { return p->requires_grad ? p->ensure_grad().data() : nullptr; }

void im2col(const double* img, int C, int H, int W, int k, int s, int p, int Ho, int Wo, double* col) {
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        double* dst = col + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * plane;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * s - p + ki;
          double* row = dst + static_cast<std::size_t>(oh) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(row, row + Wo, 0.0);
            continue;
          }
          const double* src = img + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * s - p + kj;
            row[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
          }
        }
      }
}

void col2im(const double* col, int C, int H, int W, int k, int s, int p, int Ho, int Wo, double* img) {
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const double* srcp = col + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * plane;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * s - p + ki;
          if (ih < 0 || ih >= H) continue;
          const double* row = srcp + static_cast<std::size_t>(oh) * Wo;
          double* dst = img + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * s - p + kj;
            if (iw >= 0 && iw < W) dst[iw] += row[ow];
          }
        }
      }
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd f, Deriv df) {
  std::vector<double> v(a.size());
  const auto av = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(av[i]);
  Var out = make(a.shape(), std::move(v), {&a});
  if (out.requires_grad()) {
    Node* self = out.node();
    Node* pa = a.node();
    self->backward_fn = [self, pa, df] {
      double* ga = grad_of(pa);
      if (!ga) return;
      for (std::size_t i = 0; i < self->value.size(); ++i)
        ga[i] += self->grad[i] * df(pa->value[i], self->value[i]);
    };
  }
  return out;
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

Var Var::constant(Shape shape, std::vector<double> value) {
  require(numel(shape) == value.size(), "Var::constant: value size does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::parameter(Shape shape, std::vector<double> value) {
  Var v = constant(std::move(shape), std::move(value));
  v.set_requires_grad(true);
  return v;
}

Var Var::zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

double Var::item() const {
  require(size() == 1, "Var::item: not a scalar " + shape_str(shape()));
  return node_->value[0];
}

void backward(const Var& loss, double seed) {
  require(loss.size() == 1, "backward: loss must be a scalar");
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn();
  }
}

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
  Var out = make(a.shape(), std::move(v), {&a, &b});
  if (out.requires_grad()) {
    Node *self = out.node(), *pa = a.node(), *pb = b.node();
    self->backward_fn = [self, pa, pb] {
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < self->grad.size(); ++i) g[i] += self->grad[i];
      if (double* g = grad_of(pb))
        for (std::size_t i = 0; i < self->grad.size(); ++i) g[i] += self->grad[i];
    };
  }
  return out;
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
  Var out = make(a.shape(), std::move(v), {&a, &b});
  if (out.requires_grad()) {
    Node *self = out.node(), *pa = a.node(), *pb = b.node();
    self->backward_fn = [self, pa, pb] {
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < self->grad.size(); ++i) g[i] += self->grad[i] * pb->value[i];
      if (double* g = grad_of(pb))
        for (std::size_t i = 0; i < self->grad.size(); ++i) g[i] += self->grad[i] * pa->value[i];
    };
  }
  return out;
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_const(const Var& a, std::span<const double> m) {
  require(m.size() == a.size(), "mul_const: mask size mismatch");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * m[i];
  Var out = make(a.shape(), std::move(v), {&a});
  if (out.requires_grad()) {
    Node *self = out.node(), *pa = a.node();
    self->backward_fn = [self, pa, mask = std::vector<double>(m.begin(), m.end())] {
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self->grad[i] * mask[i];
    };
  }
  return out;
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
  return unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
               [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& a) {
  return unary(a,
               [](double x) {
                 if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Var log1p(const Var& a) {
  return unary(a, [](double x) { return std::log1p(x); }, [](double x, double) { return 1.0 / (1.0 + x); });
}

Var log_eps(const Var& a, double eps) {
  return unary(a, [eps](double x) { return std::log(x + eps); },
               [eps](double x, double) { return 1.0 / (x + eps); });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  Var out = make({1}, {s}, {&a});
  if (out.requires_grad()) {
    Node *self = out.node(), *pa = a.node();
    self->backward_fn = [self, pa] {
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < pa->value.size(); ++i) g[i] += self->grad[0];
    };
  }
  return out;
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var reshape(const Var& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: element count mismatch");
  Var out = make(std::move(shape), std::vector<double>(a.value().begin(), a.value().end()), {&a});
  if (out.requires_grad()) {
    Node *self = out.node(), *pa = a.node();
    self->backward_fn = [self, pa] {
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < self->grad.size(); ++i) g[i] += self->grad[i];
    };
  }
  return out;
}

Var concat_channels(const Var& a, const Var& b) {
  require(a.shape().size() == 3 && b.shape().size() == 3 && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
          "concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<double> v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.value().begin(), a.value().end());
  v.insert(v.end(), b.value().begin(), b.value().end());
  Var out = make({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(v), {&a, &b});
  if (out.requires_grad()) {
    Node *self = out.node(), *pa = a.node(), *pb = b.node();
    self->backward_fn = [self, pa, pb] {
      const std::size_t na = pa->value.size();
      if (double* g = grad_of(pa))
        for (std::size_t i = 0; i < na; ++i) g[i] += self->grad[i];
      if (double* g = grad_of(pb))
        for (std::size_t i = 0; i < pb->value.size(); ++i) g[i] += self->grad[na + i];
    };
  }
  return out;
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require(x.shape().size() == 3 && weight.shape().size() == 4, "conv2d: expects x[C,H,W], w[O,C,k,k]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == C && weight.dim(3) == k, "conv2d: weight " + shape_str(weight.shape()) +
                                                        " incompatible with input " + shape_str(x.shape()));
  require(bias.size() == static_cast<std::size_t>(O), "conv2d: bias size mismatch");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d: input " + shape_str(x.shape()) + " too small");
  const int ckk = C * k * k;
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;

  std::vector<double> col(static_cast<std::size_t>(ckk) * plane);
  im2col(x.value().data(), C, H, W, k, stride, pad, Ho, Wo, col.data());
  std::vector<double> v(static_cast<std::size_t>(O) * plane);
  const auto P = static_cast<Eigen::Index>(plane);
  assign(v.data(), MatR(owned(weight.value().data(), O, ckk) * owned(col.data(), ckk, P)));
  for (int o = 0; o < O; ++o)
    for (std::size_t i = 0; i < plane; ++i) v[o * plane + i] += bias.value()[o];

  Var out = make({O, Ho, Wo}, std::move(v), {&x, &weight, &bias});
  if (out.requires_grad()) {
    Node *self = out.node(), *px = x.node(), *pw = weight.node(), *pb = bias.node();
    if (!pw->requires_grad) col.clear();
    self->backward_fn = [=, col = std::move(col)] {
      const MatR g = owned(self->grad.data(), O, P);
      if (double* gw = grad_of(pw)) accumulate(gw, MatR(g * owned(col.data(), ckk, P).transpose()));
      if (double* gb = grad_of(pb))
        for (int o = 0; o < O; ++o)
          for (std::size_t i = 0; i < plane; ++i) gb[o] += self->grad[o * plane + i];
      if (double* gx = grad_of(px)) {
        const MatR dcol = owned(pw->value.data(), O, ckk).transpose() * g;
        col2im(dcol.data(), C, H, W, k, stride, pad, Ho, Wo, gx);
      }
    };
  }
  return out;
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, int out_h,
                     int out_w) {
  require(x.shape().size() == 3 && weight.shape().size() == 4,
          "conv_transpose2d: expects x[C,H,W], w[C,O,k,k]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = weight.dim(1), k = weight.dim(2);
  require(weight.dim(0) == C && weight.dim(3) == k, "conv_transpose2d: weight " + shape_str(weight.shape()) +
                                                        " incompatible with input " + shape_str(x.shape()));
  require(bias.size() == static_cast<std::size_t>(O), "conv_transpose2d: bias size mismatch");
  require((out_h + 2 * pad - k) / stride + 1 == H && (out_w + 2 * pad - k) / stride + 1 == W,
          "conv_transpose2d: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
              " inconsistent with input " + shape_str(x.shape()));
  const int okk = O * k * k;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;

  const auto P = static_cast<Eigen::Index>(plane);
  const MatR col = owned(weight.value().data(), C, okk).transpose() * owned(x.value().data(), C, P);
  std::vector<double> v(static_cast<std::size_t>(O) * out_plane, 0.0);
  col2im(col.data(), O, out_h, out_w, k, stride, pad, H, W, v.data());
  for (int o = 0; o < O; ++o)
    for (std::size_t i = 0; i < out_plane; ++i) v[o * out_plane + i] += bias.value()[o];

  Var out = make({O, out_h, out_w}, std::move(v), {&x, &weight, &bias});
  if (out.requires_grad()) {
    Node *self = out.node(), *px = x.node(), *pw = weight.node(), *pb = bias.node();
    self->backward_fn = [=] {
      std::vector<double> dcol(static_cast<std::size_t>(okk) * plane);
      im2col(self->grad.data(), O, out_h, out_w, k, stride, pad, H, W, dcol.data());
      const MatR dc = owned(dcol.data(), okk, P);
      if (double* gx = grad_of(px)) accumulate(gx, MatR(owned(pw->value.data(), C, okk) * dc));
      if (double* gw = grad_of(pw)) accumulate(gw, MatR(owned(px->value.data(), C, P) * dc.transpose()));
      if (double* gb = grad_of(pb))
        for (int o = 0; o < O; ++o)
          for (std::size_t i = 0; i < out_plane; ++i) gb[o] += self->grad[o * out_plane + i];
    };
  }
  return out;
}

Var time_mean_flatten(const Var& x) {
  require(x.shape().size() == 3, "time_mean_flatten: expects [C,T,F]");
  const int C = x.dim(0), T = x.dim(1), F = x.dim(2);
  std::vector<double> v(static_cast<std::size_t>(C) * F, 0.0);
  const auto xv = x.value();
  for (int c = 0; c < C; ++c)
    for (int t = 0; t < T; ++t)
      for (int f = 0; f < F; ++f) v[c * F + f] += xv[(static_cast<std::size_t>(c) * T + t) * F + f];
  for (double& e : v) e /= T;
  Var out = make({C * F}, std::move(v), {&x});
  if (out.requires_grad()) {
    Node *self = out.node(), *px = x.node();
    self->backward_fn = [=] {
      double* g = grad_of(px);
      if (!g) return;
      for (int c = 0; c < C; ++c)
        for (int t = 0; t < T; ++t)
          for (int f = 0; f < F; ++f) g[(static_cast<std::size_t>(c) * T + t) * F + f] += self->grad[c * F + f] / T;
    };
  }
  return out;
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(weight.shape().size() == 2, "linear: weight must be 2-D");
  const int O = weight.dim(0), I = weight.dim(1);
  require(x.size() == static_cast<std::size_t>(I), "linear: input size " + std::to_string(x.size()) +
                                                       " does not match weight " + shape_str(weight.shape()));
  require(bias.size() == static_cast<std::size_t>(O), "linear: bias size mismatch");
  std::vector<double> v(O);
  const double* w = weight.value().data();
  for (int o = 0; o < O; ++o) {
    double s = 0.0;
    for (int i = 0; i < I; ++i) s += w[static_cast<std::size_t>(o) * I + i] * x.value()[i];
    v[o] = s + bias.value()[o];
  }
  Var out = make({O}, std::move(v), {&x, &weight, &bias});
  if (out.requires_grad()) {
    Node *self = out.node(), *px = x.node(), *pw = weight.node(), *pb = bias.node();
    self->backward_fn = [=] {
      const double* g = self->grad.data();
      const double* w = pw->value.data();
      if (double* gw = grad_of(pw))
        for (int o = 0; o < O; ++o)
          for (int i = 0; i < I; ++i) gw[static_cast<std::size_t>(o) * I + i] += g[o] * px->value[i];
      if (double* gb = grad_of(pb))
        for (int o = 0; o < O; ++o) gb[o] += g[o];
      if (double* gx = grad_of(px))
        for (int o = 0; o < O; ++o)
          for (int i = 0; i < I; ++i) gx[i] += w[static_cast<std::size_t>(o) * I + i] * g[o];
    };
  }
  return out;
}

Var project_last_axis(const Var& x, std::span<const double> matrix, int out_dim) {
  require(!x.shape().empty(), "project_last_axis: scalar input");
  const int F = x.shape().back();
  require(matrix.size() == static_cast<std::size_t>(F) * out_dim, "project_last_axis: matrix size mismatch");
  const auto rows = static_cast<Eigen::Index>(x.size() / F);
  std::vector<double> v(static_cast<std::size_t>(rows) * out_dim);
  assign(v.data(), MatR(owned(x.value().data(), rows, F) * owned(matrix.data(), F, out_dim)));
  Shape shape = x.shape();
  shape.back() = out_dim;
  Var out = make(std::move(shape), std::move(v), {&x});
  if (out.requires_grad()) {
    Node *self = out.node(), *px = x.node();
    self->backward_fn = [=, m = owned(matrix.data(), F, out_dim)] {
      if (double* g = grad_of(px)) accumulate(g, MatR(owned(self->grad.data(), rows, out_dim) * m.transpose()));
    };
  }
  return out;
}

Var slice(const Var& v, int lo, int hi) {
  require(lo >= 0 && lo <= hi && static_cast<std::size_t>(hi) <= v.size(), "slice: range out of bounds");
  Var out = make({hi - lo}, std::vector<double>(v.value().begin() + lo, v.value().begin() + hi), {&v});
  if (out.requires_grad()) {
    Node *self = out.node(), *pv = v.node();
    self->backward_fn = [=] {
      if (double* g = grad_of(pv))
        for (int i = lo; i < hi; ++i) g[i] += self->grad[i - lo];
    };
  }
  return out;
}

Var l1_mean(const Var& x, const Var& y) {
  check_same(x, y, "l1_mean");
  const std::size_t n = x.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(x.value()[i] - y.value()[i]);
  Var out = make({1}, {s / static_cast<double>(n)}, {&x, &y});
  if (out.requires_grad()) {
    Node *self = out.node(), *px = x.node(), *py = y.node();
    self->backward_fn = [=] {
      const double g = self->grad[0] / static_cast<double>(n);
      double* gx = grad_of(px);
      double* gy = grad_of(py);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = px->value[i] - py->value[i];
        const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (gx) gx[i] += g * sgn;
        if (gy) gy[i] -= g * sgn;
      }
    };
  }
  return out;
}

Var mse_mean(const Var& x, const Var& y) {
  check_same(x, y, "mse_mean");
  const std::size_t n = x.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x.value()[i] - y.value()[i];
    s += d * d;
  }
  Var out = make({1}, {s / static_cast<double>(n)}, {&x, &y});
  if (out.requires_grad()) {
    Node *self = out.node(), *px = x.node(), *py = y.node();
    self->backward_fn = [=] {
      const double g = 2.0 * self->grad[0] / static_cast<double>(n);
      double* gx = grad_of(px);
      double* gy = grad_of(py);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = px->value[i] - py->value[i];
        if (gx) gx[i] += g * d;
        if (gy) gy[i] -= g * d;
      }
    };
  }
  return out;
}

Var l2_distance(const Var& a, const Var& b) {
  check_same(a, b, "l2_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  const double dist = std::sqrt(s);
  Var out = make({1}, {dist}, {&a, &b});
  if (out.requires_grad()) {
    Node *self = out.node(), *pa = a.node(), *pb = b.node();
    self->backward_fn = [=] {
      if (dist == 0.0) return;
      const double g = self->grad[0] / dist;
      double* ga = grad_of(pa);
      double* gb = grad_of(pb);
      for (std::size_t i = 0; i < pa->value.size(); ++i) {
        const double d = pa->value[i] - pb->value[i];
        if (ga) ga[i] += g * d;
        if (gb) gb[i] -= g * d;
      }
    };
  }
  return out;
}

Var hinge(const Var& a) {
  require(a.size() == 1, "hinge: expects a scalar");
  return relu(a);
}

}  // namespace inmsrl::ag
