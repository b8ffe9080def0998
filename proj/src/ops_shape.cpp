#include <algorithm>
#include <numeric>

#include "op_common.hpp"

namespace xmpr::ad {

namespace {

struct SliceNode final : Node {
  int axis;
  Index start, len;
  SliceNode(int ax, Index s, Index l) : axis(ax), start(s), len(l) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (axis < 0 || axis >= x.rank())
      op_error(op, "axis out of range for " + shape_string(x.shape()));
    if (start < 0 || len < 1 || start + len > x.extent(axis))
      op_error(op, "window [" + std::to_string(start) + ", " + std::to_string(start + len) +
                       ") out of range for " + shape_string(x.shape()));
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    value = Tensor(out_shape);
    const auto strides = x.strides();
    const Index stride = strides[static_cast<std::size_t>(axis)];
    const Index inner = stride;
    const Index outer = x.numel() / (x.extent(axis) * inner);
    Index o = 0;
    for (Index ou = 0; ou < outer; ++ou) {
      const Index base = ou * x.extent(axis) * inner + start * inner;
      for (Index a = 0; a < len; ++a, o += inner)
        value.data().segment(o, inner) = x.data().segment(base + a * inner, inner);
    }
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    const Tensor& x = nx.value;
    const auto strides = x.strides();
    const Index stride = strides[static_cast<std::size_t>(axis)];
    const Index inner = stride;
    const Index outer = x.numel() / (x.extent(axis) * inner);
    Index o = 0;
    for (Index ou = 0; ou < outer; ++ou) {
      const Index base = ou * x.extent(axis) * inner + start * inner;
      for (Index a = 0; a < len; ++a, o += inner)
        nx.grad.data().segment(base + a * inner, inner) += grad.data().segment(o, inner);
    }
  }
};

struct ConcatNode final : Node {
  int axis;
  explicit ConcatNode(int ax) : axis(ax) {}

  void forward(Graph& g) override {
    const Tensor& first = g.node(inputs[0]).value;
    if (axis < 0 || axis >= first.rank())
      op_error(op, "axis out of range for " + shape_string(first.shape()));
    Shape out_shape = first.shape();
    Index total = 0;
    for (int in : inputs) {
      const Tensor& x = g.node(in).value;
      if (x.rank() != first.rank())
        op_error(op, "rank mismatch " + shape_string(first.shape()) + " vs " +
                         shape_string(x.shape()));
      for (Index a = 0; a < x.rank(); ++a)
        if (a != axis && x.extent(a) != first.extent(a))
          op_error(op, "shape mismatch " + shape_string(first.shape()) + " vs " +
                           shape_string(x.shape()));
      total += x.extent(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total;
    value = Tensor(out_shape);
    const auto out_strides = value.strides();
    const Index inner = out_strides[static_cast<std::size_t>(axis)];
    const Index outer = value.numel() / (total * inner);
    Index offset = 0;
    for (int in : inputs) {
      const Tensor& x = g.node(in).value;
      const Index ext = x.extent(axis);
      for (Index ou = 0; ou < outer; ++ou)
        value.data().segment((ou * total + offset) * inner, ext * inner) =
            x.data().segment(ou * ext * inner, ext * inner);
      offset += ext;
    }
  }
  void backward(Graph& g) override {
    const Index total = value.extent(axis);
    const auto out_strides = value.strides();
    const Index inner = out_strides[static_cast<std::size_t>(axis)];
    const Index outer = value.numel() / (total * inner);
    Index offset = 0;
    for (int in : inputs) {
      Node& nx = g.node(in);
      const Index ext = nx.value.extent(axis);
      if (nx.requires_grad)
        for (Index ou = 0; ou < outer; ++ou)
          nx.grad.data().segment(ou * ext * inner, ext * inner) +=
              grad.data().segment((ou * total + offset) * inner, ext * inner);
      offset += ext;
    }
  }
};

struct PermuteNode final : Node {
  std::vector<int> perm;
  explicit PermuteNode(std::vector<int> p) : perm(std::move(p)) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (static_cast<Index>(perm.size()) != x.rank())
      op_error(op, "permutation rank mismatch for " + shape_string(x.shape()));
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
      if (p < 0 || p >= static_cast<int>(perm.size()) || seen[static_cast<std::size_t>(p)])
        op_error(op, "invalid permutation");
      seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(perm.size());
    for (std::size_t a = 0; a < perm.size(); ++a)
      out_shape[a] = x.extent(perm[a]);
    value = Tensor(out_shape);
    const auto in_strides = x.strides();
    // stride of output axis a in the input's flat layout
    read_strides_.assign(perm.size(), 0);
    for (std::size_t a = 0; a < perm.size(); ++a)
      read_strides_[a] = in_strides[static_cast<std::size_t>(perm[a])];
    Shape idx(perm.size(), 0);
    Index src = 0;
    for (Index o = 0; o < value.numel(); ++o) {
      value[o] = x[src];
      for (int ax = static_cast<int>(perm.size()) - 1; ax >= 0; --ax) {
        auto u = static_cast<std::size_t>(ax);
        src += read_strides_[u];
        if (++idx[u] < out_shape[u]) break;
        src -= read_strides_[u] * out_shape[u];
        idx[u] = 0;
      }
    }
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    Shape idx(perm.size(), 0);
    Index src = 0;
    for (Index o = 0; o < value.numel(); ++o) {
      nx.grad[src] += grad[o];
      for (int ax = static_cast<int>(perm.size()) - 1; ax >= 0; --ax) {
        auto u = static_cast<std::size_t>(ax);
        src += read_strides_[u];
        if (++idx[u] < value.extent(ax)) break;
        src -= read_strides_[u] * value.extent(ax);
        idx[u] = 0;
      }
    }
  }

 private:
  Shape read_strides_;
};

struct ReshapeNode final : Node {
  Shape target;
  explicit ReshapeNode(Shape s) : target(std::move(s)) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (shape_numel(target) != x.numel())
      op_error(op, "cannot reshape " + shape_string(x.shape()) + " to " + shape_string(target));
    value = Tensor(target, x.data());
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (nx.requires_grad) nx.grad.data() += grad.data();
  }
};

struct ReverseNode final : Node {
  int axis;
  explicit ReverseNode(int ax) : axis(ax) {}

  void forward(Graph& g) override {
    const Tensor& x = g.node(inputs[0]).value;
    if (axis < 0 || axis >= x.rank())
      op_error(op, "axis out of range for " + shape_string(x.shape()));
    value = Tensor(x.shape());
    copy_reversed(x, value);
  }
  void backward(Graph& g) override {
    Node& nx = g.node(inputs[0]);
    if (!nx.requires_grad) return;
    Tensor flipped(grad.shape());
    copy_reversed(grad, flipped);
    nx.grad.data() += flipped.data();
  }

 private:
  void copy_reversed(const Tensor& src, Tensor& dst) const {
    const auto strides = src.strides();
    const Index stride = strides[static_cast<std::size_t>(axis)];
    const Index inner = stride;
    const Index ext = src.extent(axis);
    const Index outer = src.numel() / (ext * inner);
    for (Index ou = 0; ou < outer; ++ou) {
      const Index base = ou * ext * inner;
      for (Index a = 0; a < ext; ++a)
        dst.data().segment(base + (ext - 1 - a) * inner, inner) =
            src.data().segment(base + a * inner, inner);
    }
  }
};

}  // namespace

Var slice(Var x, int axis, Index start, Index len) {
  return make_node<SliceNode>("slice", {x}, axis, start, len);
}
Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no operands");
  return make_node<ConcatNode>("concat", xs, axis);
}
Var permute(Var x, const std::vector<int>& perm) {
  return make_node<PermuteNode>("permute", {x}, perm);
}
Var reshape(Var x, Shape shape) { return make_node<ReshapeNode>("reshape", {x}, std::move(shape)); }
Var reverse(Var x, int axis) { return make_node<ReverseNode>("reverse", {x}, axis); }

}  // namespace xmpr::ad
