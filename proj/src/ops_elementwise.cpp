#include <cmath>

#include "op_common.hpp"

namespace xmpr::ad {

namespace {

// Binary broadcasting op. The fast path handles identical shapes with one
// vectorized expression; the general path walks broadcast strides.
enum class BinKind { Add, Sub, Mul };

struct BinaryNode final : Node {
  BinKind kind;
  explicit BinaryNode(BinKind k) : kind(k) {}

  void forward(Graph& g) override {
    const Tensor& a = g.node(inputs[0]).value;
    const Tensor& b = g.node(inputs[1]).value;
    if (a.same_shape(b)) {
      value = Tensor(a.shape());
      switch (kind) {
        case BinKind::Add: value.data() = a.data() + b.data(); break;
        case BinKind::Sub: value.data() = a.data() - b.data(); break;
        case BinKind::Mul: value.data() = a.data() * b.data(); break;
      }
      return;
    }
    const Shape out = broadcast_shape(op.c_str(), a.shape(), b.shape());
    value = Tensor(out);
    BroadcastIter it(out, a.shape(), b.shape());
    for (Index i = 0; i < value.numel(); ++i, it.advance()) {
      const double x = a[it.ia], y = b[it.ib];
      switch (kind) {
        case BinKind::Add: value[i] = x + y; break;
        case BinKind::Sub: value[i] = x - y; break;
        case BinKind::Mul: value[i] = x * y; break;
      }
    }
  }

  void backward(Graph& g) override {
    Node& na = g.node(inputs[0]);
    Node& nb = g.node(inputs[1]);
    const Tensor& a = na.value;
    const Tensor& b = nb.value;
    if (a.same_shape(b) && a.same_shape(value)) {
      if (na.requires_grad) {
        if (kind == BinKind::Mul)
          na.grad.data() += grad.data() * b.data();
        else
          na.grad.data() += grad.data();
      }
      if (nb.requires_grad) {
        switch (kind) {
          case BinKind::Add: nb.grad.data() += grad.data(); break;
          case BinKind::Sub: nb.grad.data() -= grad.data(); break;
          case BinKind::Mul: nb.grad.data() += grad.data() * a.data(); break;
        }
      }
      return;
    }
    BroadcastIter it(value.shape(), a.shape(), b.shape());
    Tensor ga = Tensor::zeros(a.shape());
    Tensor gb = Tensor::zeros(b.shape());
    for (Index i = 0; i < value.numel(); ++i, it.advance()) {
      const double go = grad[i];
      switch (kind) {
        case BinKind::Add:
          ga[it.ia] += go;
          gb[it.ib] += go;
          break;
        case BinKind::Sub:
          ga[it.ia] += go;
          gb[it.ib] -= go;
          break;
        case BinKind::Mul:
          ga[it.ia] += go * b[it.ib];
          gb[it.ib] += go * a[it.ia];
          break;
      }
    }
    if (na.requires_grad) na.grad.data() += ga.data();
    if (nb.requires_grad) nb.grad.data() += gb.data();
  }
};

struct AffineNode final : Node {
  double scale, shift;
  AffineNode(double s, double c) : scale(s), shift(c) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    value = Tensor(x.shape());
    value.data() = scale * x.data() + shift;
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (nx.requires_grad) nx.grad.data() += scale * grad.data();
  }
};

enum class UnaryKind { Exp, Log, Sqrt, Softplus, Sigmoid, Silu, Relu };

inline double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

struct UnaryNode final : Node {
  UnaryKind kind;
  explicit UnaryNode(UnaryKind k) : kind(k) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    value = Tensor(x.shape());
    for (Index i = 0; i < x.numel(); ++i) {
      const double v = x[i];
      switch (kind) {
        case UnaryKind::Exp: value[i] = std::exp(v); break;
        case UnaryKind::Log:
          if (v <= 0.0) op_error(op, "non-positive input " + std::to_string(v));
          value[i] = std::log(v);
          break;
        case UnaryKind::Sqrt:
          if (v < 0.0) op_error(op, "negative input " + std::to_string(v));
          value[i] = std::sqrt(v);
          break;
        case UnaryKind::Softplus: value[i] = v > 30.0 ? v : std::log1p(std::exp(v)); break;
        case UnaryKind::Sigmoid: value[i] = stable_sigmoid(v); break;
        case UnaryKind::Silu: value[i] = v * stable_sigmoid(v); break;
        case UnaryKind::Relu: value[i] = v > 0.0 ? v : 0.0; break;
      }
    }
  }

  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Tensor& x = nx.value;
    for (Index i = 0; i < x.numel(); ++i) {
      double d = 0.0;
      switch (kind) {
        case UnaryKind::Exp: d = value[i]; break;
        case UnaryKind::Log: d = 1.0 / x[i]; break;
        case UnaryKind::Sqrt: d = 0.5 / std::max(value[i], 1e-150); break;
        case UnaryKind::Softplus: d = stable_sigmoid(x[i]); break;
        case UnaryKind::Sigmoid: d = value[i] * (1.0 - value[i]); break;
        case UnaryKind::Silu: {
          const double s = stable_sigmoid(x[i]);
          d = s + x[i] * s * (1.0 - s);
          break;
        }
        case UnaryKind::Relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
      }
      nx.grad[i] += d * grad[i];
    }
  }
};

struct DetachNode final : Node {
  void forward(Graph& g) override {
    if (g.freeze_detached() && value.numel() > 0) return;
    value = g.node(inputs[0]).value;
  }
  void backward(Graph&) override {}
};

Var unary(const char* op, Var x, UnaryKind k) { return make_node<UnaryNode>(op, {x}, k); }

}  // namespace

Var add(Var a, Var b) { return make_node<BinaryNode>("add", {a, b}, BinKind::Add); }
Var sub(Var a, Var b) { return make_node<BinaryNode>("sub", {a, b}, BinKind::Sub); }
Var mul(Var a, Var b) { return make_node<BinaryNode>("mul", {a, b}, BinKind::Mul); }
Var neg(Var a) { return affine(a, -1.0, 0.0); }
Var affine(Var x, double scale, double shift) {
  return make_node<AffineNode>("affine", {x}, scale, shift);
}

Var exp(Var x) { return unary("exp", x, UnaryKind::Exp); }
Var log(Var x) { return unary("log", x, UnaryKind::Log); }
Var sqrt(Var x) { return unary("sqrt", x, UnaryKind::Sqrt); }
Var softplus(Var x) { return unary("softplus", x, UnaryKind::Softplus); }
Var sigmoid(Var x) { return unary("sigmoid", x, UnaryKind::Sigmoid); }
Var silu(Var x) { return unary("silu", x, UnaryKind::Silu); }
Var relu(Var x) { return unary("relu", x, UnaryKind::Relu); }

Var detach(Var x) {
  Var v = make_node<DetachNode>("detach", {x});
  // Gradient flow stops here regardless of what feeds it.
  v.graph->node(v.id).requires_grad = false;
  return v;
}

}  // namespace xmpr::ad
