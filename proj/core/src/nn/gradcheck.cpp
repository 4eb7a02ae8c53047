#include "rawformer/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rawformer::nn {
namespace {

double weighted_sum(const std::string& op, const Tensor<double>& y, const Tensor<double>& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!std::isfinite(y[i])) throw NumericError(op + ": non-finite value in forward pass");
    acc += w[i] * y[i];
  }
  return acc;
}

}  // namespace

GradCheckReport grad_check(const std::string& op, const std::function<Var<double>(Tape<double>&)>& f,
                           const std::vector<GradTarget>& targets, const GradCheckOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  GradCheckReport report;
  report.op = op;

  // Analytic pass; also fixes the output weighting.
  Tensor<double> weights;
  {
    Tape<double> tape;
    for (const auto& [_, p] : targets) p->grad = Tensor<double>();
    const Var<double> y = f(tape);
    weights = Tensor<double>(y.value().shape());
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : weights.values()) v = dist(rng);
    weighted_sum(op, y.value(), weights);
    tape.backward(y, weights);
  }
  std::vector<Tensor<double>> analytic;
  analytic.reserve(targets.size());
  for (const auto& [_, p] : targets)
    analytic.push_back(p->grad.empty() ? Tensor<double>(p->value.shape()) : p->grad);

  auto evaluate = [&]() {
    Tape<double> tape;
    const Var<double> y = f(tape);
    if (y.value().shape() != weights.shape())
      throw NumericError(op + ": output shape changed between evaluations");
    return weighted_sum(op, y.value(), weights);
  };

  for (std::size_t t = 0; t < targets.size(); ++t) {
    auto& [name, p] = targets[t];
    GradCheckEntry entry;
    entry.name = name;
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > static_cast<std::size_t>(opt.coords_per_tensor)) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      double& x = p->value[idx];
      const double orig = x;
      const double h = opt.step;
      x = orig + h;
      const double fp = evaluate();
      x = orig - h;
      const double fm = evaluate();
      x = orig + h / 2;
      const double fp2 = evaluate();
      x = orig - h / 2;
      const double fm2 = evaluate();
      x = orig;
      const double num = (fp - fm) / (2 * h);
      const double num2 = (fp2 - fm2) / h;
      const double scale = std::max({std::abs(num), std::abs(num2), 1e-6});
      if (std::abs(num - num2) > opt.kink_tolerance * scale) {
        ++entry.skipped;
        continue;
      }
      const double a = analytic[t][idx];
      // The spread between the two step sizes bounds the numeric estimate's own
      // error; only disagreement beyond it counts against the analytic value.
      const double excess = std::max(0.0, std::abs(a - num) - std::abs(num - num2));
      const double rel = excess / std::max({std::abs(a), std::abs(num), opt.gradient_floor});
      ++entry.checked;
      if (rel >= entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.argmax = idx;
      }
    }
    report.checked += entry.checked;
    report.skipped += entry.skipped;
    if (entry.max_rel_err >= report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_tensor = entry.name;
      report.worst_index = entry.argmax;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

std::vector<GradTarget> targets_of(ParamSet<double>& params, const std::string& prefix) {
  std::vector<GradTarget> out;
  for (auto& [name, p] : params) out.emplace_back(prefix + name, &p);
  return out;
}

}  // namespace rawformer::nn
