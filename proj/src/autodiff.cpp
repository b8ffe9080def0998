#include "xmpr/autodiff.hpp"

#include <algorithm>

#include "op_common.hpp"

namespace xmpr::ad {

const Tensor& Var::value() const { return graph->node(id).value; }
const Tensor& Var::grad() const { return graph->node(id).grad; }
const Shape& Var::shape() const { return graph->node(id).value.shape(); }

namespace {

struct LeafNode final : Node {
  void forward(Graph&) override {
    if (bound != nullptr) value = bound->value;
  }
  void backward(Graph&) override {}
};

}  // namespace

Var Graph::input(const std::string& name, Tensor value, bool requires_grad) {
  if (named_inputs_.count(name))
    throw std::invalid_argument("graph: duplicate input name '" + name + "'");
  auto node = std::make_unique<LeafNode>();
  node->op = "input";
  node->name = name;
  node->value = std::move(value);
  node->is_leaf = true;
  node->requires_grad = requires_grad;
  Var v = emplace(std::move(node));
  named_inputs_[name] = v.id;
  return v;
}

Var Graph::constant(Tensor value) {
  auto node = std::make_unique<LeafNode>();
  node->op = "constant";
  node->value = std::move(value);
  node->is_leaf = true;
  return emplace(std::move(node));
}

Var Graph::param(Parameter& p) {
  // one leaf per Parameter: repeated uses fan out of a single node, so its
  // gradient is the full derivative with respect to p
  auto it = param_index_.find(&p);
  if (it != param_index_.end()) return Var{this, it->second};
  auto node = std::make_unique<LeafNode>();
  node->op = "param";
  node->name = p.name;
  node->value = p.value;
  node->is_leaf = true;
  node->requires_grad = true;
  node->bound = &p;
  Var v = emplace(std::move(node));
  param_index_.emplace(&p, v.id);
  return v;
}

void Graph::bind(const std::string& name, Tensor value) {
  auto it = named_inputs_.find(name);
  if (it == named_inputs_.end())
    throw std::invalid_argument("graph: unknown input '" + name + "'");
  Node& n = node(it->second);
  if (!(n.value.shape() == value.shape()))
    throw std::invalid_argument("graph: input '" + name + "' bound with shape " +
                                shape_string(value.shape()) + ", expected " +
                                shape_string(n.value.shape()));
  n.value = std::move(value);
}

void Graph::mark_output(const std::string& name, Var v) {
  if (v.graph != this) throw std::invalid_argument("graph: output from a different graph");
  outputs_[name] = v.id;
}

Var Graph::output(const std::string& name) const {
  auto it = outputs_.find(name);
  if (it == outputs_.end())
    throw std::invalid_argument("graph: unknown output '" + name + "'");
  return Var{const_cast<Graph*>(this), it->second};
}

Var Graph::emplace(std::unique_ptr<Node> node) {
  node->forward(*this);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::forward() {
  for (auto& n : nodes_) n->forward(*this);
}

void Graph::backward(Var seed) {
  if (seed.graph != this) throw std::invalid_argument("backward: seed from a different graph");
  Node& s = node(seed.id);
  if (s.value.numel() != 1)
    throw std::invalid_argument("backward: seed '" + s.op + "' is not scalar, shape " +
                                shape_string(s.value.shape()));
  for (auto& n : nodes_) {
    if (n->requires_grad) {
      n->grad = Tensor::zeros(n->value.shape());
    } else {
      n->grad = Tensor();
    }
  }
  if (!s.requires_grad) return;  // constant output: all gradients stay zero
  s.grad.data().setConstant(1.0);
  for (int id = seed.id; id >= 0; --id) {
    Node& n = node(id);
    if (n.requires_grad && !n.is_leaf) n.backward(*this);
  }
}

void Graph::zero_grad() {
  for (auto& n : nodes_)
    if (n->grad.numel() > 0) n->grad.data().setZero();
}

void Graph::accumulate_param_grads() {
  for (auto& n : nodes_)
    if (n->bound != nullptr && n->grad.numel() > 0) n->bound->grad.data() += n->grad.data();
}

std::map<std::string, Tensor> evaluate_graph(Graph& g,
                                             const std::map<std::string, Tensor>& inputs) {
  for (const auto& [name, value] : inputs) g.bind(name, value);
  g.forward();
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : g.outputs()) out[name] = g.node(id).value;
  return out;
}

std::map<std::string, Tensor> backward(Graph& g, const std::string& seed_output) {
  g.backward(g.output(seed_output));
  std::map<std::string, Tensor> grads;
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.is_leaf && n.requires_grad && !n.name.empty())
      grads[n.name] = n.grad.numel() > 0 ? n.grad : Tensor::zeros(n.value.shape());
  }
  return grads;
}

// ---- broadcasting helpers ----

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t ra = a.size(), rb = b.size();
  const std::size_t r = std::max(ra, rb);
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const Index ea = k < ra ? a[ra - 1 - k] : 1;
    const Index eb = k < rb ? b[rb - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      op_error(op, "shape mismatch " + shape_string(a) + " vs " + shape_string(b));
    out[r - 1 - k] = std::max(ea, eb);
  }
  return out;
}

Shape broadcast_strides(const Shape& from, const Shape& to) {
  Shape strides(to.size(), 0);
  Index run = 1;
  const std::size_t rf = from.size(), rt = to.size();
  for (std::size_t k = 0; k < rt; ++k) {
    const Index ef = k < rf ? from[rf - 1 - k] : 1;
    if (ef != 1) strides[rt - 1 - k] = run;
    run *= ef;
  }
  return strides;
}

Tensor reduce_to_shape(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  Tensor out = Tensor::zeros(shape);
  BroadcastIter it(g.shape(), shape, shape);
  for (Index i = 0; i < g.numel(); ++i, it.advance()) out[it.ia] += g[i];
  return out;
}

}  // namespace xmpr::ad
