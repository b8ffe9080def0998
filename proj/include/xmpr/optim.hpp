#ifndef XMPR_OPTIM_HPP
#define XMPR_OPTIM_HPP

#include <cstdint>
#include <map>
#include <vector>

#include "xmpr/autodiff.hpp"

namespace xmpr {

/// lr(epoch) = lr0 * factor^floor(epoch / interval); epoch must be >= 0.
double lr_schedule(int epoch, double lr0 = 1e-4, double factor = 0.8, int interval = 5);

/// Adam with decoupled weight decay. Moments are keyed by parameter name and
/// lazily created on the first step that sees the parameter.
class AdamW {
 public:
  struct Config {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(Config cfg) : cfg_(cfg) {}

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::int64_t steps() const { return step_; }

  /// One update from the gradients currently held by the parameters.
  /// Any non-finite gradient aborts the whole step before touching values.
  void step(const std::vector<ad::Parameter*>& params);

 private:
  struct Moments {
    Tensor m, v;
  };
  Config cfg_{};
  std::int64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace xmpr

#endif  // XMPR_OPTIM_HPP
