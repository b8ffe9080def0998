#include "xmpr/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace xmpr {

double lr_schedule(int epoch, double lr0, double factor, int interval) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
  return lr0 * std::pow(factor, epoch / interval);
}

void AdamW::step(const std::vector<ad::Parameter*>& params) {
  for (const ad::Parameter* p : params)
    if (!p->grad.all_finite())
      throw std::runtime_error("adamw_step: non-finite gradient for '" + p->name + "'");

  step_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (ad::Parameter* p : params) {
    auto it = moments_.find(p->name);
    if (it == moments_.end())
      it = moments_
               .emplace(p->name, Moments{Tensor::zeros(p->value.shape()),
                                         Tensor::zeros(p->value.shape())})
               .first;
    Moments& mom = it->second;
    if (!mom.m.same_shape(p->value))
      throw std::runtime_error("adamw_step: shape changed for '" + p->name + "'");
    auto& m = mom.m.data();
    auto& v = mom.v.data();
    const auto& gr = p->grad.data();
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gr;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gr.square();
    // Decoupled decay: shrink weights directly, then the Adam direction.
    p->value.data() *= 1.0 - cfg_.lr * cfg_.weight_decay;
    p->value.data() -= cfg_.lr * (m / bc1) / ((v / bc2).sqrt() + cfg_.eps);
  }
}

}  // namespace xmpr
