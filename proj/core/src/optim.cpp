#include "rawformer/optim.hpp"

#include <cmath>

#include "rawformer/errors.hpp"

namespace rawformer {

void AdamConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("optimizer: lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("optimizer: betas must lie in [0,1)");
  if (!(eps > 0)) throw ConfigError("optimizer: eps must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("optimizer: weight decay must be >= 0");
}

void Adam::step(nn::ParamSet<float>& params) {
  for (const auto& [name, p] : params) {
    if (p.grad.empty()) continue;
    if (p.grad.shape() != p.value.shape())
      throw DimensionError("optimizer: gradient of '" + name + "' has shape " + nn::to_string(p.grad.shape()));
    for (float g : p.grad.values())
      if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient in parameter '" + name + "'");
  }
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  for (auto& [name, p] : params) {
    if (p.grad.empty()) continue;
    Slot& s = slots_[name];
    if (s.m.empty()) {
      s.m = nn::Tensor<float>(p.value.shape());
      s.v = nn::Tensor<float>(p.value.shape());
    }
    ++s.t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    float* w = p.value.data();
    const float* g = p.grad.data();
    float* m = s.m.data();
    float* v = s.v.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double wi = w[i];
      if (cfg_.weight_decay > 0) wi *= decay;
      const double mi = b1 * m[i] + (1 - b1) * g[i];
      const double vi = b2 * v[i] + (1 - b2) * static_cast<double>(g[i]) * g[i];
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      wi -= cfg_.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

std::int64_t Adam::step_count(const std::string& name) const {
  auto it = slots_.find(name);
  return it == slots_.end() ? 0 : it->second.t;
}

void Adam::save(Checkpoint& ckpt, const std::string& prefix) const {
  for (const auto& [name, s] : slots_) {
    ckpt.tensors[prefix + "m." + name] = s.m;
    ckpt.tensors[prefix + "v." + name] = s.v;
    ckpt.meta[prefix + "t." + name] = std::to_string(s.t);
  }
}

void Adam::load(const Checkpoint& ckpt, const std::string& prefix) {
  slots_.clear();
  const std::string tkey = prefix + "t.";
  for (auto it = ckpt.meta.lower_bound(tkey); it != ckpt.meta.end() && it->first.starts_with(tkey); ++it) {
    const std::string name = it->first.substr(tkey.size());
    Slot s;
    s.t = std::stoll(it->second);
    s.m = ckpt.tensor(prefix + "m." + name);
    s.v = ckpt.tensor(prefix + "v." + name);
    slots_[name] = std::move(s);
  }
}

double lr_schedule(double epoch, double T0, double T_mult, double lr_max, double lr_min) {
  if (epoch < 0) epoch = 0;
  double t_cur = epoch, t_i = T0;
  if (epoch >= T0) {
    if (T_mult == 1.0) {
      t_cur = std::fmod(epoch, T0);
    } else {
      const double n = std::floor(std::log(epoch / T0 * (T_mult - 1) + 1) / std::log(T_mult));
      t_i = T0 * std::pow(T_mult, n);
      t_cur = epoch - T0 * (std::pow(T_mult, n) - 1) / (T_mult - 1);
      // Guard the boundary against log/pow rounding.
      if (t_cur >= t_i) {
        t_cur -= t_i;
        t_i *= T_mult;
      } else if (t_cur < 0) {
        t_i /= T_mult;
        t_cur += t_i;
      }
    }
  }
  return lr_min + 0.5 * (lr_max - lr_min) * (1 + std::cos(M_PI * t_cur / t_i));
}

}  // namespace rawformer
