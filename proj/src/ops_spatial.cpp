#include "op_common.hpp"

namespace xmpr::ad {

namespace {

using MapRM = Eigen::Map<Tensor::MatrixRM>;
using CMapRM = Eigen::Map<const Tensor::MatrixRM>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

// Stride-1 "same" convolution on an H x W x Cin map with a kh x kw x Cin x Cout
// kernel. Rows are always zero padded; columns wrap when pad is
// CircularHorizontal so 360-degree panoramas stay continuous across the seam.
struct Conv2dNode final : Node {
  Pad pad;
  explicit Conv2dNode(Pad p) : pad(p) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    const Tensor& k = g.node(inputs[1]).value;
    const Tensor& b = g.node(inputs[2]).value;
    if (x.rank() != 3 || k.rank() != 4 || x.extent(2) != k.extent(2))
      op_error(op, "shape mismatch " + shape_string(x.shape()) + " vs kernel " +
                       shape_string(k.shape()));
    if (k.extent(0) % 2 == 0 || k.extent(1) % 2 == 0)
      op_error(op, "kernel extents must be odd, got " + shape_string(k.shape()));
    const Index co = k.extent(3);
    if (b.numel() != co)
      op_error(op, "bias shape " + shape_string(b.shape()) + " vs kernel " +
                       shape_string(k.shape()));
    const Index h = x.extent(0), w = x.extent(1), ci = x.extent(2);
    const Index kh = k.extent(0), kw = k.extent(1);
    const Index ph = kh / 2, pw = kw / 2;
    value = Tensor({h, w, co});
    CMapVec bias(b.data().data(), co);
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        MapVec out(value.data().data() + (i * w + j) * co, co);
        out = bias;
        for (Index di = 0; di < kh; ++di) {
          const Index si = i + di - ph;
          if (si < 0 || si >= h) continue;
          for (Index dj = 0; dj < kw; ++dj) {
            Index sj = j + dj - pw;
            if (pad == Pad::CircularHorizontal) {
              sj = (sj % w + w) % w;
            } else if (sj < 0 || sj >= w) {
              continue;
            }
            CMapRM kk(k.data().data() + (di * kw + dj) * ci * co, ci, co);
            CMapVec xv(x.data().data() + (si * w + sj) * ci, ci);
            out.noalias() += kk.transpose() * xv;
          }
        }
      }
    }
  }

  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    Node& nk = g.node(inputs[1]);
    Node& nb = g.node(inputs[2]);
    const Tensor& x = nx.value;
    const Tensor& k = nk.value;
    const Index h = x.extent(0), w = x.extent(1), ci = x.extent(2);
    const Index kh = k.extent(0), kw = k.extent(1), co = k.extent(3);
    const Index ph = kh / 2, pw = kw / 2;
    if (nb.requires_grad) {
      MapVec gb(nb.grad.data().data(), co);
      for (Index p = 0; p < h * w; ++p) gb += CMapVec(grad.data().data() + p * co, co);
    }
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        CMapVec go(grad.data().data() + (i * w + j) * co, co);
        for (Index di = 0; di < kh; ++di) {
          const Index si = i + di - ph;
          if (si < 0 || si >= h) continue;
          for (Index dj = 0; dj < kw; ++dj) {
            Index sj = j + dj - pw;
            if (pad == Pad::CircularHorizontal) {
              sj = (sj % w + w) % w;
            } else if (sj < 0 || sj >= w) {
              continue;
            }
            CMapVec xv(x.data().data() + (si * w + sj) * ci, ci);
            if (nk.requires_grad) {
              MapRM gk(nk.grad.data().data() + (di * kw + dj) * ci * co, ci, co);
              gk.noalias() += xv * go.transpose();
            }
            if (nx.requires_grad) {
              CMapRM kk(k.data().data() + (di * kw + dj) * ci * co, ci, co);
              MapVec gx(nx.grad.data().data() + (si * w + sj) * ci, ci);
              gx.noalias() += kk * go;
            }
          }
        }
      }
    }
  }
};

struct AvgPool2dNode final : Node {
  Index factor;
  explicit AvgPool2dNode(Index f) : factor(f) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (x.rank() != 3) op_error(op, "input must be H x W x C, got " + shape_string(x.shape()));
    if (factor < 1 || x.extent(0) % factor != 0 || x.extent(1) % factor != 0)
      op_error(op, "input " + shape_string(x.shape()) + " not divisible by pooling factor " +
                       std::to_string(factor));
    const Index h = x.extent(0) / factor, w = x.extent(1) / factor, c = x.extent(2);
    const Index wf = x.extent(1);
    value = Tensor({h, w, c});
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        MapVec out(value.data().data() + (i * w + j) * c, c);
        out.setZero();
        for (Index di = 0; di < factor; ++di)
          for (Index dj = 0; dj < factor; ++dj)
            out += CMapVec(
                x.data().data() + ((i * factor + di) * wf + (j * factor + dj)) * c, c);
        out *= inv;
      }
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Index h = value.extent(0), w = value.extent(1), c = value.extent(2);
    const Index wf = nx.value.extent(1);
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        CMapVec go(grad.data().data() + (i * w + j) * c, c);
        for (Index di = 0; di < factor; ++di)
          for (Index dj = 0; dj < factor; ++dj) {
            MapVec gx(nx.grad.data().data() + ((i * factor + di) * wf + (j * factor + dj)) * c,
                      c);
            gx += inv * go;
          }
      }
  }
};

struct UpsampleNearestNode final : Node {
  Index factor;
  explicit UpsampleNearestNode(Index f) : factor(f) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (x.rank() != 3) op_error(op, "input must be H x W x C, got " + shape_string(x.shape()));
    if (factor < 1) op_error(op, "factor must be >= 1");
    const Index h = x.extent(0), w = x.extent(1), c = x.extent(2);
    value = Tensor({h * factor, w * factor, c});
    const Index wo = w * factor;
    for (Index i = 0; i < h * factor; ++i)
      for (Index j = 0; j < wo; ++j)
        value.data().segment((i * wo + j) * c, c) =
            x.data().segment(((i / factor) * w + (j / factor)) * c, c);
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Index h = nx.value.extent(0), w = nx.value.extent(1), c = nx.value.extent(2);
    const Index wo = w * factor;
    for (Index i = 0; i < h * factor; ++i)
      for (Index j = 0; j < wo; ++j)
        nx.grad.data().segment(((i / factor) * w + (j / factor)) * c, c) +=
            grad.data().segment((i * wo + j) * c, c);
  }
};

}  // namespace

Var conv2d(Var x, Var kernel, Var bias, Pad pad) {
  return make_node<Conv2dNode>("conv2d", {x, kernel, bias}, pad);
}
Var avg_pool2d(Var x, Index factor) {
  return make_node<AvgPool2dNode>("avg_pool2d", {x}, factor);
}
Var upsample_nearest(Var x, Index factor) {
  return make_node<UpsampleNearestNode>("upsample_nearest", {x}, factor);
}

}  // namespace xmpr::ad
