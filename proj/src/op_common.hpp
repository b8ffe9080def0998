#ifndef XMPR_SRC_OP_COMMON_HPP
#define XMPR_SRC_OP_COMMON_HPP

#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

#include "xmpr/autodiff.hpp"

namespace xmpr::ad {

[[noreturn]] inline void op_error(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

inline void check_same_graph(const char* op, Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph)
    op_error(op, "operands belong to different graphs");
}

inline const Tensor& val(Var v) { return v.graph->node(v.id).value; }

/// Shared scaffolding for node construction: wires inputs, propagates the
/// requires_grad flag, runs the eager forward pass.
template <typename NodeT, typename... Args>
Var make_node(const char* op, std::vector<Var> ins, Args&&... args) {
  Graph* g = ins.empty() ? nullptr : ins.front().graph;
  for (const Var& v : ins) {
    if (!v.valid()) op_error(op, "invalid operand");
    if (v.graph != g) op_error(op, "operands belong to different graphs");
  }
  auto node = std::make_unique<NodeT>(std::forward<Args>(args)...);
  node->op = op;
  bool rg = false;
  for (const Var& v : ins) {
    node->inputs.push_back(v.id);
    rg = rg || g->node(v.id).requires_grad;
  }
  node->requires_grad = rg;
  return g->emplace(std::move(node));
}

// ---- broadcasting ----

/// numpy-style broadcast of two shapes; throws with both shapes on mismatch.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b);

/// Strides for reading `from` at indices of the broadcast shape `to`
/// (zero stride on broadcast axes, ranks aligned to the right).
Shape broadcast_strides(const Shape& from, const Shape& to);

/// Sum `g` (shaped like the broadcast output) down to `shape`.
Tensor reduce_to_shape(const Tensor& g, const Shape& shape);

/// Row-major index walker over an arbitrary shape with precomputed strides
/// into two broadcast operands.
struct BroadcastIter {
  const Shape& out_shape;
  Shape idx;
  Shape sa, sb;
  Index ia = 0, ib = 0;

  BroadcastIter(const Shape& out, const Shape& a_shape, const Shape& b_shape)
      : out_shape(out),
        idx(out.size(), 0),
        sa(broadcast_strides(a_shape, out)),
        sb(broadcast_strides(b_shape, out)) {}

  void advance() {
    for (int ax = static_cast<int>(out_shape.size()) - 1; ax >= 0; --ax) {
      auto u = static_cast<std::size_t>(ax);
      ia += sa[u];
      ib += sb[u];
      if (++idx[u] < out_shape[u]) return;
      ia -= sa[u] * out_shape[u];
      ib -= sb[u] * out_shape[u];
      idx[u] = 0;
    }
  }
};

}  // namespace xmpr::ad

#endif  // XMPR_SRC_OP_COMMON_HPP
