#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "rawformer/checkpoint.hpp"
#include "rawformer/nn/tape.hpp"

namespace rawformer {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled weight decay (AdamW) when > 0: w <- w - lr*wd*w before the moment step.
  double weight_decay = 0.0;

  void validate() const;
};

/// Adam / AdamW over a ParamSet. Parameters without a gradient this step are
/// left untouched, moments included.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  /// Throws NumericError naming the parameter on a non-finite gradient,
  /// before any parameter is modified.
  void step(nn::ParamSet<float>& params);

  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const noexcept { return cfg_; }
  std::int64_t step_count(const std::string& name) const;

  /// Moments under `<prefix>m.<name>` / `<prefix>v.<name>`, step counts in metadata.
  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);

 private:
  struct Slot {
    nn::Tensor<float> m, v;
    std::int64_t t = 0;
  };
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
};

/// Cosine annealing with warm restarts evaluated at a (possibly fractional)
/// epoch position: cycle i lasts T0 * T_mult^i epochs.
double lr_schedule(double epoch, double T0, double T_mult, double lr_max, double lr_min = 0.0);

}  // namespace rawformer
