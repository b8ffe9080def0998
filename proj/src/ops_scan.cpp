#include "op_common.hpp"

namespace xmpr::ad {

double phi1(double z) {
  if (std::abs(z) < 1e-4) return 1.0 + z / 2.0 + z * z / 6.0;
  return std::expm1(z) / z;
}

namespace {

// d phi1 / dz, same small-|z| series treatment as phi1.
double phi1_prime(double z) {
  if (std::abs(z) < 1e-4) return 0.5 + z / 3.0 + z * z / 8.0;
  return (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
}

}  // namespace

void discretize(double a, double b, double delta, Discretization disc, double& a_bar,
                double& b_bar) {
  const double z = delta * a;
  a_bar = std::exp(z);
  b_bar = disc == Discretization::ZohExact ? phi1(z) * delta * b : delta * b;
}

namespace {

// Diagonal state-space scan over a length-T sequence of d channels with N
// states per channel. Abar is always the exact zero-order hold exp(delta a);
// Bbar follows `disc`. Blocked mode reassociates the recurrence per block
// (local zero-state scan plus a carried h scaled by the block's cumulative
// Abar product) which changes rounding order but not the result.
struct SelectiveScanNode final : Node {
  ScanMode mode;
  Discretization disc;
  Index block;
  Tensor h_traj_;  // T x d x N, saved only when a gradient will be required

  SelectiveScanNode(ScanMode m, Discretization dz, Index blk)
      : mode(m), disc(dz), block(blk) {}

  static void check_shapes(const std::string& op, const Tensor& u, const Tensor& delta,
                           const Tensor& A, const Tensor& B, const Tensor& C) {
    if (u.rank() != 2 || delta.rank() != 2 || A.rank() != 2 || B.rank() != 2 ||
        C.rank() != 2)
      op_error(op, "all inputs must be rank 2");
    const Index t = u.extent(0), d = u.extent(1), n = A.extent(1);
    if (!delta.same_shape(u))
      op_error(op, "delta shape " + shape_string(delta.shape()) + " vs u " +
                       shape_string(u.shape()));
    if (A.extent(0) != d)
      op_error(op, "A shape " + shape_string(A.shape()) + " vs u " +
                       shape_string(u.shape()));
    if (B.extent(0) != t || B.extent(1) != n || C.extent(0) != t || C.extent(1) != n)
      op_error(op, "B/C must be " + shape_string({t, n}) + ", got " +
                       shape_string(B.shape()) + " and " + shape_string(C.shape()));
  }

  double b_bar(double dt, double a, double bkn) const {
    return disc == Discretization::ZohExact ? phi1(dt * a) * dt * bkn : dt * bkn;
  }

  void forward(Graph& g) override {
    const Tensor& u = g.node(inputs[0]).value;
    const Tensor& dt = g.node(inputs[1]).value;
    const Tensor& A = g.node(inputs[2]).value;
    const Tensor& B = g.node(inputs[3]).value;
    const Tensor& C = g.node(inputs[4]).value;
    check_shapes(op, u, dt, A, B, C);
    if (mode == ScanMode::Blocked && block < 1) op_error(op, "block must be >= 1");
    const Index t = u.extent(0), d = u.extent(1), n = A.extent(1);
    value = Tensor({t, d});
    const bool save = requires_grad;
    if (save)
      h_traj_ = Tensor({t, d, n});
    else
      h_traj_ = Tensor();

    Eigen::ArrayXXd h = Eigen::ArrayXXd::Zero(d, n);
    Eigen::ArrayXXd abar(d, n), bbar(d, n);
    Eigen::ArrayXXd local(d, n), prod(d, n), hk(d, n);
    const Index step = mode == ScanMode::Blocked ? block : t;
    for (Index s = 0; s < t; s += step) {
      const Index e = std::min(t, s + step);
      local.setZero();
      prod.setOnes();
      for (Index k = s; k < e; ++k) {
        for (Index i = 0; i < d; ++i) {
          const double dki = dt.data()[k * d + i];
          const double uki = u.data()[k * d + i];
          for (Index j = 0; j < n; ++j) {
            const double a = A.data()[i * n + j];
            abar(i, j) = std::exp(dki * a);
            bbar(i, j) = b_bar(dki, a, B.data()[k * n + j]) * uki;
          }
        }
        if (mode == ScanMode::Blocked) {
          local = abar * local + bbar;
          prod *= abar;
          hk = local + prod * h;
        } else {
          h = abar * h + bbar;
          hk = h;
        }
        if (save)
          for (Index i = 0; i < d; ++i)
            for (Index j = 0; j < n; ++j) h_traj_.data()[(k * d + i) * n + j] = hk(i, j);
        for (Index i = 0; i < d; ++i) {
          double y = 0.0;
          for (Index j = 0; j < n; ++j) y += C.data()[k * n + j] * hk(i, j);
          value.data()[k * d + i] = y;
        }
      }
      if (mode == ScanMode::Blocked) h = hk;
    }
  }

  void backward(Graph& g) override {
    Node& nu = g.node(inputs[0]);
    Node& nd = g.node(inputs[1]);
    Node& na = g.node(inputs[2]);
    Node& nb = g.node(inputs[3]);
    Node& nc = g.node(inputs[4]);
    const Tensor& u = nu.value;
    const Tensor& dt = nd.value;
    const Tensor& A = na.value;
    const Tensor& B = nb.value;
    const Tensor& C = nc.value;
    const Index t = u.extent(0), d = u.extent(1), n = A.extent(1);

    // lam = dL/dh[k]; walk k = t-1 .. 0 recomputing Abar/Bbar per step.
    Eigen::ArrayXXd lam = Eigen::ArrayXXd::Zero(d, n);
    for (Index k = t - 1; k >= 0; --k) {
      for (Index i = 0; i < d; ++i) {
        const double go = grad.data()[k * d + i];
        for (Index j = 0; j < n; ++j) lam(i, j) += go * C.data()[k * n + j];
      }
      if (nc.requires_grad) {
        for (Index j = 0; j < n; ++j) {
          double gc = 0.0;
          for (Index i = 0; i < d; ++i)
            gc += grad.data()[k * d + i] * h_traj_.data()[(k * d + i) * n + j];
          nc.grad.data()[k * n + j] += gc;
        }
      }
      for (Index i = 0; i < d; ++i) {
        const double dki = dt.data()[k * d + i];
        const double uki = u.data()[k * d + i];
        double gu = 0.0, gd = 0.0;
        for (Index j = 0; j < n; ++j) {
          const double a = A.data()[i * n + j];
          const double bkn = B.data()[k * n + j];
          const double z = dki * a;
          const double ab = std::exp(z);
          const double bb = b_bar(dki, a, bkn);
          const double l = lam(i, j);
          const double hp = k > 0 ? h_traj_.data()[((k - 1) * d + i) * n + j] : 0.0;
          gu += l * bb;
          // d Abar / d delta = a Abar, d Abar / d a = delta Abar.
          // ZOH: d Bbar / d delta = b exp(z), d Bbar / d a = b delta^2 phi1'(z).
          double dbb_ddelta, dbb_da, dbb_db;
          if (disc == Discretization::ZohExact) {
            dbb_ddelta = bkn * ab;
            dbb_da = bkn * dki * dki * phi1_prime(z);
            dbb_db = phi1(z) * dki;
          } else {
            dbb_ddelta = bkn;
            dbb_da = 0.0;
            dbb_db = dki;
          }
          gd += l * (hp * a * ab + uki * dbb_ddelta);
          if (na.requires_grad)
            na.grad.data()[i * n + j] += l * (hp * dki * ab + uki * dbb_da);
          if (nb.requires_grad) nb.grad.data()[k * n + j] += l * uki * dbb_db;
          lam(i, j) = l * ab;  // propagate to h[k-1]
        }
        if (nu.requires_grad) nu.grad.data()[k * d + i] += gu;
        if (nd.requires_grad) nd.grad.data()[k * d + i] += gd;
      }
    }
  }
};

}  // namespace

Var selective_scan(Var u, Var delta, Var A, Var B, Var C, ScanMode mode,
                   Discretization disc, Index block) {
  return make_node<SelectiveScanNode>("selective_scan", {u, delta, A, B, C}, mode, disc,
                                      block);
}

}  // namespace xmpr::ad
