#pragma once

#include <cstdint>
#include <string>

#include "rawformer/imgio.hpp"
#include "rawformer/nn/blocks.hpp"

namespace rawformer {

enum class GeneratorArch { rawformer, baseline_unet };

std::string to_string(GeneratorArch a);
GeneratorArch parse_generator_arch(const std::string& s);

struct GeneratorConfig {
  int levels = 3;
  int base_channels = 16;
  /// Training resolution; fixes the bottleneck positional grid (image_size / 2^levels).
  int image_size = 32;
  nn::VitConfig vit{};
  nn::CqaConfig cqa{};
  bool use_cqa = true;
  bool use_style = true;
  bool use_spfn = true;
  bool use_composite = true;
  GeneratorArch arch = GeneratorArch::rawformer;
  std::uint64_t seed = 0;

  /// Ablation rows 1..5: baseline UNet, +CQA, +style, +SPFN, +composite samplers.
  static GeneratorConfig ablation(int row);

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  int channels(int level) const { return base_channels << level; }
};

/// The output is sigmoid(head + logit(clamp(x, eps, 1 - eps))), so a zero head
/// reproduces the input on [eps, 1 - eps]. A small eps starves gradients on
/// zeroed (masked) pixels, where sigmoid' ~ eps.
inline constexpr double kResidualClamp = 0.05;

struct GeneratorWeights {
  GeneratorConfig config;
  nn::ParamSet<float> params;

  std::size_t param_count() const { return params.element_count(); }
};

/// Registers every parameter of the configured network into `params`.
template <typename T>
void add_generator_params(const GeneratorConfig& cfg, nn::ParamSet<T>& params);

GeneratorWeights build_generator(const GeneratorConfig& cfg);

/// x (N,3,H,W) with H, W multiples of 2^levels -> (N,3,H,W) in (0,1).
template <typename T>
nn::Var<T> generator_forward(const GeneratorConfig& cfg, nn::ParamSet<T>& params, nn::Tape<T>& tape, nn::Var<T> x,
                             bool trainable = true);

/// Gradient-free inference on a batch.
ImageTensor generator_apply(GeneratorWeights& g, const ImageTensor& x);

}  // namespace rawformer
