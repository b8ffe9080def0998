#include <algorithm>
#include <cmath>

#include "op_common.hpp"

namespace xmpr::ad {

namespace {

using MatrixRM = Tensor::MatrixRM;
using MapRM = Eigen::Map<MatrixRM>;
using CMapRM = Eigen::Map<const MatrixRM>;

struct MatmulNode final : Node {
  void forward(Graph& g) override {
    const Tensor& a = g.node(inputs[0]).value;
    const Tensor& b = g.node(inputs[1]).value;
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
      op_error(op, "shape mismatch " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
    value = Tensor({a.extent(0), b.extent(1)});
    value.as_matrix(a.extent(0), b.extent(1)).noalias() =
        a.as_matrix(a.extent(0), a.extent(1)) * b.as_matrix(b.extent(0), b.extent(1));
  }
  void backward(Graph& g) override {
    Node& na = g.node(inputs[0]);
    Node& nb = g.node(inputs[1]);
    const Index m = na.value.extent(0), k = na.value.extent(1), n = nb.value.extent(1);
    CMapRM go(grad.data().data(), m, n);
    if (na.requires_grad)
      na.grad.as_matrix(m, k).noalias() += go * nb.value.as_matrix(k, n).transpose();
    if (nb.requires_grad)
      nb.grad.as_matrix(k, n).noalias() += na.value.as_matrix(m, k).transpose() * go;
  }
};

struct BmmNode final : Node {
  void forward(Graph& g) override {
    const Tensor& a = g.node(inputs[0]).value;
    const Tensor& b = g.node(inputs[1]).value;
    if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) ||
        a.extent(2) != b.extent(1))
      op_error(op, "shape mismatch " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
    const Index bs = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
    value = Tensor({bs, m, n});
    for (Index i = 0; i < bs; ++i) {
      CMapRM ma(a.data().data() + i * m * k, m, k);
      CMapRM mb(b.data().data() + i * k * n, k, n);
      MapRM mo(value.data().data() + i * m * n, m, n);
      mo.noalias() = ma * mb;
    }
  }
  void backward(Graph& g) override {
    Node& na = g.node(inputs[0]);
    Node& nb = g.node(inputs[1]);
    const Index bs = na.value.extent(0), m = na.value.extent(1), k = na.value.extent(2),
                n = nb.value.extent(2);
    for (Index i = 0; i < bs; ++i) {
      CMapRM ma(na.value.data().data() + i * m * k, m, k);
      CMapRM mb(nb.value.data().data() + i * k * n, k, n);
      CMapRM go(grad.data().data() + i * m * n, m, n);
      if (na.requires_grad) {
        MapRM ga(na.grad.data().data() + i * m * k, m, k);
        ga.noalias() += go * mb.transpose();
      }
      if (nb.requires_grad) {
        MapRM gb(nb.grad.data().data() + i * k * n, k, n);
        gb.noalias() += ma.transpose() * go;
      }
    }
  }
};

struct SoftmaxNode final : Node {
  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (x.rank() < 1) op_error(op, "rank-0 input");
    const Index cols = x.extent(x.rank() - 1);
    const Index rows = x.numel() / cols;
    value = Tensor(x.shape());
    for (Index r = 0; r < rows; ++r) {
      auto row = x.data().segment(r * cols, cols);
      auto out = value.data().segment(r * cols, cols);
      const double mx = row.maxCoeff();
      out = (row - mx).exp();
      out /= out.sum();
    }
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Index cols = value.extent(value.rank() - 1);
    const Index rows = value.numel() / cols;
    for (Index r = 0; r < rows; ++r) {
      auto y = value.data().segment(r * cols, cols);
      auto go = grad.data().segment(r * cols, cols);
      const double dot = (go * y).sum();
      nx.grad.data().segment(r * cols, cols) += y * (go - dot);
    }
  }
};

struct LayerNormNode final : Node {
  double eps;
  explicit LayerNormNode(double e) : eps(e) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (x.rank() < 1) op_error(op, "rank-0 input");
    const Index cols = x.extent(x.rank() - 1);
    const Index rows = x.numel() / cols;
    value = Tensor(x.shape());
    inv_std_.resize(rows);
    for (Index r = 0; r < rows; ++r) {
      auto row = x.data().segment(r * cols, cols);
      const double mean = row.mean();
      const double var = (row - mean).square().mean();
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std_[r] = inv;
      value.data().segment(r * cols, cols) = (row - mean) * inv;
    }
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Index cols = value.extent(value.rank() - 1);
    const Index rows = value.numel() / cols;
    for (Index r = 0; r < rows; ++r) {
      auto y = value.data().segment(r * cols, cols);
      auto go = grad.data().segment(r * cols, cols);
      const double gm = go.mean();
      const double gym = (go * y).mean();
      nx.grad.data().segment(r * cols, cols) += inv_std_[r] * (go - gm - y * gym);
    }
  }

 private:
  Eigen::ArrayXd inv_std_;
};

// axis = -1 reduces everything to a scalar.
struct ReduceNode final : Node {
  int axis;
  bool mean;
  ReduceNode(int ax, bool m) : axis(ax), mean(m) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (axis < 0) {
      value = Tensor::scalar(mean ? x.data().mean() : x.data().sum());
      return;
    }
    if (axis >= x.rank()) op_error(op, "axis out of range for " + shape_string(x.shape()));
    Shape out_shape;
    for (Index a = 0; a < x.rank(); ++a)
      if (a != axis) out_shape.push_back(x.extent(a));
    value = Tensor(out_shape);
    const auto strides = x.strides();
    const Index n_axis = x.extent(axis);
    const Index stride = strides[static_cast<std::size_t>(axis)];
    const Index inner = stride;
    const Index outer = x.numel() / (n_axis * inner);
    Index o_flat = 0;
    for (Index o = 0; o < outer; ++o) {
      const Index base = o * n_axis * inner;
      for (Index in = 0; in < inner; ++in, ++o_flat) {
        double acc = 0.0;
        for (Index a = 0; a < n_axis; ++a) acc += x[base + a * stride + in];
        value[o_flat] = mean ? acc / static_cast<double>(n_axis) : acc;
      }
    }
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Tensor& x = nx.value;
    if (axis < 0) {
      const double go = grad[0] * (mean ? 1.0 / static_cast<double>(x.numel()) : 1.0);
      nx.grad.data() += go;
      return;
    }
    const auto strides = x.strides();
    const Index n_axis = x.extent(axis);
    const Index stride = strides[static_cast<std::size_t>(axis)];
    const Index inner = stride;
    const Index outer = x.numel() / (n_axis * inner);
    const double scale = mean ? 1.0 / static_cast<double>(n_axis) : 1.0;
    Index o_flat = 0;
    for (Index o = 0; o < outer; ++o) {
      const Index base = o * n_axis * inner;
      for (Index in = 0; in < inner; ++in, ++o_flat) {
        const double go = grad[o_flat] * scale;
        for (Index a = 0; a < n_axis; ++a) nx.grad[base + a * stride + in] += go;
      }
    }
  }
};

struct CumsumNode final : Node {
  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (x.rank() < 1) op_error(op, "rank-0 input");
    const Index t = x.extent(0);
    const Index inner = x.numel() / t;
    value = Tensor(x.shape());
    value.data().segment(0, inner) = x.data().segment(0, inner);
    for (Index i = 1; i < t; ++i)
      value.data().segment(i * inner, inner) =
          value.data().segment((i - 1) * inner, inner) + x.data().segment(i * inner, inner);
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Index t = value.extent(0);
    const Index inner = value.numel() / t;
    Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(inner);
    for (Index i = t - 1; i >= 0; --i) {
      acc += grad.data().segment(i * inner, inner);
      nx.grad.data().segment(i * inner, inner) += acc;
    }
  }
};

struct L2NormalizeNode final : Node {
  double eps;
  explicit L2NormalizeNode(double e) : eps(e) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (x.rank() < 1) op_error(op, "rank-0 input");
    const Index cols = x.extent(x.rank() - 1);
    const Index rows = x.numel() / cols;
    value = Tensor(x.shape());
    inv_norm_.resize(rows);
    for (Index r = 0; r < rows; ++r) {
      auto row = x.data().segment(r * cols, cols);
      const double inv = 1.0 / std::sqrt(row.square().sum() + eps);
      inv_norm_[r] = inv;
      value.data().segment(r * cols, cols) = row * inv;
    }
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Index cols = value.extent(value.rank() - 1);
    const Index rows = value.numel() / cols;
    for (Index r = 0; r < rows; ++r) {
      auto y = value.data().segment(r * cols, cols);
      auto go = grad.data().segment(r * cols, cols);
      const double dot = (go * y).sum();
      nx.grad.data().segment(r * cols, cols) += inv_norm_[r] * (go - y * dot);
    }
  }

 private:
  Eigen::ArrayXd inv_norm_;
};

struct GatherRowsNode final : Node {
  std::vector<Index> rows;
  explicit GatherRowsNode(std::vector<Index> r) : rows(std::move(r)) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (x.rank() != 2) op_error(op, "input must be rank 2, got " + shape_string(x.shape()));
    const Index d = x.extent(1);
    for (Index r : rows)
      if (r < 0 || r >= x.extent(0))
        op_error(op, "row index " + std::to_string(r) + " out of range");
    value = Tensor({static_cast<Index>(rows.size()), d});
    for (std::size_t i = 0; i < rows.size(); ++i)
      value.data().segment(static_cast<Index>(i) * d, d) = x.data().segment(rows[i] * d, d);
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Index d = nx.value.extent(1);
    for (std::size_t i = 0; i < rows.size(); ++i)
      nx.grad.data().segment(rows[i] * d, d) +=
          grad.data().segment(static_cast<Index>(i) * d, d);
  }
};

}  // namespace

Var matmul(Var a, Var b) { return make_node<MatmulNode>("matmul", {a, b}); }
Var bmm(Var a, Var b) { return make_node<BmmNode>("bmm", {a, b}); }
Var softmax(Var x) { return make_node<SoftmaxNode>("softmax", {x}); }
Var layer_norm(Var x, double eps) { return make_node<LayerNormNode>("layer_norm", {x}, eps); }
Var reduce_sum(Var x) { return make_node<ReduceNode>("sum", {x}, -1, false); }
Var reduce_sum(Var x, int axis) { return make_node<ReduceNode>("sum", {x}, axis, false); }
Var reduce_mean(Var x) { return make_node<ReduceNode>("mean", {x}, -1, true); }
Var reduce_mean(Var x, int axis) { return make_node<ReduceNode>("mean", {x}, axis, true); }
Var cumsum(Var x) { return make_node<CumsumNode>("cumsum", {x}); }
Var l2_normalize(Var x, double eps) {
  return make_node<L2NormalizeNode>("l2_normalize", {x}, eps);
}
Var gather_rows(Var x, std::vector<Index> rows) {
  return make_node<GatherRowsNode>("gather_rows", {x}, std::move(rows));
}

}  // namespace xmpr::ad
