#include <cmath>
#include <stdexcept>

#include "xmpr/autodiff.hpp"

namespace xmpr::ad {

namespace {

void require_finite(const Graph& g) {
  for (int i = 0; i < g.size(); ++i)
    if (!g.node(i).value.all_finite())
      throw std::runtime_error("grad_check: non-finite value at node " + std::to_string(i) +
                               " (" + g.node(i).op + ")");
}

double seed_value(Graph& g, Var seed) {
  g.forward();
  require_finite(g);
  return g.node(seed.id).value.value();
}

}  // namespace

GradCheckReport grad_check(Graph& g, Var seed, double tolerance, double fd_step) {
  GradCheckReport report;
  report.tolerance = tolerance;

  g.forward();
  require_finite(g);
  g.backward(seed);

  // Analytic gradients are snapshotted now; finite differences below re-run the
  // tape with detached values frozen so both probe the same linearization.
  struct Leaf {
    int id;
    std::string name;
    Tensor analytic;
  };
  std::vector<Leaf> leaves;
  for (int i = 0; i < g.size(); ++i) {
    const Node& n = g.node(i);
    if (!n.is_leaf || !n.requires_grad) continue;
    std::string name = n.bound != nullptr ? n.bound->name : n.name;
    if (name.empty()) name = "node" + std::to_string(i);
    leaves.push_back({i, name, n.grad});
  }

  const bool was_frozen = g.freeze_detached();
  g.set_freeze_detached(true);
  bool all_pass = true;
  for (const Leaf& leaf : leaves) {
    Node& n = g.node(leaf.id);
    Tensor& storage = n.bound != nullptr ? n.bound->value : n.value;
    GradCheckEntry entry;
    entry.name = leaf.name;
    for (Index e = 0; e < storage.numel(); ++e) {
      const double orig = storage.data()[e];
      storage.data()[e] = orig + fd_step;
      const double fp = seed_value(g, seed);
      storage.data()[e] = orig - fd_step;
      const double fm = seed_value(g, seed);
      storage.data()[e] = orig;
      const double fd = (fp - fm) / (2.0 * fd_step);
      const double an = leaf.analytic.data()[e];
      const double rel =
          std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    entry.pass = entry.max_rel_err <= tolerance;
    all_pass = all_pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  g.set_freeze_detached(was_frozen);
  g.forward();  // restore unperturbed values
  report.pass = all_pass;
  return report;
}

}  // namespace xmpr::ad
