#ifndef XMPR_AUTODIFF_HPP
#define XMPR_AUTODIFF_HPP

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xmpr/tensor.hpp"

namespace xmpr::ad {

enum class Pad { Zero, CircularHorizontal };
enum class ScanMode { Sequential, Blocked };
/// B-matrix discretization; the state transition is always the exact exponential.
enum class Discretization { ZohExact, Euler };

class Graph;

/// Lightweight handle to a node inside a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const;
};

/// Named learnable tensor. Gradients accumulate across graphs until zeroed.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string name_, Tensor value_)
      : name(std::move(name_)), value(std::move(value_)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() { grad.data().setZero(); }
};

/// One recorded operation: inputs by node id, cached output value, gradient slot.
struct Node {
  std::string op;
  std::vector<int> inputs;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool is_leaf = false;
  Parameter* bound = nullptr;
  std::string name;  // set for named inputs

  virtual ~Node() = default;
  virtual void forward(Graph& g) = 0;
  virtual void backward(Graph& g) = 0;
};

/// Reverse-mode computation tape. Nodes are appended in topological order and
/// evaluated eagerly; forward() re-runs the whole tape (after rebinding inputs
/// or updating parameters) and backward() accumulates gradients in reverse.
///
/// A Graph instance is single-threaded; independent graphs may run on
/// separate threads.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(const std::string& name, Tensor value, bool requires_grad = false);
  Var constant(Tensor value);
  Var constant(double v) { return constant(Tensor::scalar(v)); }
  Var param(Parameter& p);

  /// Rebind a named input; shape must match the original binding.
  void bind(const std::string& name, Tensor value);

  void mark_output(const std::string& name, Var v);
  Var output(const std::string& name) const;
  const std::map<std::string, int>& outputs() const { return outputs_; }

  /// Recompute every node in insertion order.
  void forward();

  /// Reverse accumulation from a scalar seed; gradients of unreachable nodes
  /// stay zero.
  void backward(Var seed);

  void zero_grad();

  /// Add the gradients of parameter leaves into their bound Parameters.
  void accumulate_param_grads();

  /// While set, detach nodes keep their captured values across forward()
  /// calls, so finite differences probe the same linearization backward uses.
  void set_freeze_detached(bool on) { freeze_detached_ = on; }
  bool freeze_detached() const { return freeze_detached_; }

  int size() const { return static_cast<int>(nodes_.size()); }
  Node& node(int id) { return *nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return *nodes_[static_cast<std::size_t>(id)]; }

  Var emplace(std::unique_ptr<Node> node);

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
  std::map<std::string, int> named_inputs_;
  std::map<Parameter*, int> param_index_;
  std::map<std::string, int> outputs_;
  bool freeze_detached_ = false;
};

/// Bind the given inputs, run forward, return all marked outputs.
std::map<std::string, Tensor> evaluate_graph(Graph& g, const std::map<std::string, Tensor>& inputs);

/// Run reverse accumulation from the named scalar output and return the
/// gradients of all parameters and named requires-grad inputs.
std::map<std::string, Tensor> backward(Graph& g, const std::string& seed_output);

// ---- elementwise ----
Var add(Var a, Var b);  // numpy-style broadcasting
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var affine(Var x, double scale, double shift);  // scale*x + shift
Var exp(Var x);
Var log(Var x);
Var sqrt(Var x);
Var softplus(Var x);
Var sigmoid(Var x);
Var silu(Var x);
Var relu(Var x);
Var detach(Var x);

// ---- matrix / reductions ----
Var matmul(Var a, Var b);                // (m x k) * (k x n)
Var bmm(Var a, Var b);                   // (B x m x k) * (B x k x n)
Var softmax(Var x);                      // over the last axis
Var layer_norm(Var x, double eps = 1e-6);  // over the last axis, no affine
Var reduce_sum(Var x);                   // all elements -> scalar
Var reduce_sum(Var x, int axis);
Var reduce_mean(Var x);
Var reduce_mean(Var x, int axis);
Var cumsum(Var x);                       // along axis 0
Var l2_normalize(Var x, double eps = 1e-24);  // per last-axis vector
Var gather_rows(Var x, std::vector<Index> rows);  // x: N x d

// ---- shape ----
Var slice(Var x, int axis, Index start, Index len);
Var concat(const std::vector<Var>& xs, int axis);
Var permute(Var x, const std::vector<int>& perm);
Var reshape(Var x, Shape shape);
Var reverse(Var x, int axis);

// ---- spatial (H x W x C) ----
Var conv2d(Var x, Var kernel, Var bias, Pad pad);  // kernel: kh x kw x Cin x Cout
Var avg_pool2d(Var x, Index factor);
Var upsample_nearest(Var x, Index factor);

// ---- sequence ----
/// u, delta: T x d; A: d x N (already negative-real values); B, C: T x N.
/// y[t] = C[t] . h[t] with h[t] = Abar h[t-1] + Bbar u[t] per channel.
Var selective_scan(Var u, Var delta, Var A, Var B, Var C, ScanMode mode,
                   Discretization disc, Index block = 64);

/// phi1(z) = (e^z - 1)/z, with a series fallback for |z| < 1e-4.
double phi1(double z);

/// Zero-order-hold (or Euler) discretization of one diagonal channel.
void discretize(double a, double b, double delta, Discretization disc, double& a_bar,
                double& b_bar);

// ---- gradient verification ----
struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  double tolerance = 0.0;
  bool pass = false;
  std::vector<GradCheckEntry> entries;
};

/// Compare backward() against central finite differences for every parameter
/// and requires-grad input feeding the scalar seed output.
GradCheckReport grad_check(Graph& g, Var seed, double tolerance, double fd_step = 1e-5);

}  // namespace xmpr::ad

#endif  // XMPR_AUTODIFF_HPP
