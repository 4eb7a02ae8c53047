#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "rawformer/discriminator.hpp"
#include "rawformer/generator.hpp"

namespace rawformer {

/// Mean Gaussian-window SSIM (window 11, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2,
/// dynamic range 1, valid filtering) over pixels and channels, shape (1,1,1,1).
template <typename T>
nn::Var<T> ssim_index(nn::Var<T> x, nn::Var<T> y);

inline constexpr int kSsimWindow = 11;

/// Frozen convolutional feature stack standing in for pretrained perceptual
/// features: three 3x3 stride-2 stages (16/32/64 channels) with LeakyReLU.
struct PerceptualExtractor {
  nn::ParamSet<float> params;

  static PerceptualExtractor random(std::uint64_t seed = 0x5EED);
  /// Loads `percep.stage{0,1,2}.{weight,bias}` tensors from a checkpoint file.
  static PerceptualExtractor load(const std::filesystem::path& path);
};

template <typename T>
void add_extractor_params(nn::ParamSet<T>& params, std::uint64_t seed);

template <typename T>
std::vector<nn::Var<T>> extractor_features(nn::ParamSet<T>& params, nn::Tape<T>& tape, nn::Var<T> x);

struct PixelwiseWeights {
  double l1 = 1.0;
  double ssim = 1.0;
  double perceptual = 1.0;
};

template <typename T>
struct PixelwiseTerms {
  nn::Var<T> l1;          // mean |pred - target|
  nn::Var<T> ssim;        // 1 - SSIM
  nn::Var<T> perceptual;  // sum over stages of mean squared feature distance
  nn::Var<T> total;
};

template <typename T>
PixelwiseTerms<T> pixelwise_terms(nn::Var<T> pred, nn::Var<T> target, nn::ParamSet<T>& extractor,
                                  const PixelwiseWeights& w = {});

template <typename T>
nn::Var<T> pixelwise_loss(nn::Var<T> pred, nn::Var<T> target, nn::ParamSet<T>& extractor,
                          const PixelwiseWeights& w = {}) {
  return pixelwise_terms(pred, target, extractor, w).total;
}

/// Mean binary cross-entropy of the logit map against a constant label (0 or 1).
template <typename T>
nn::Var<T> gan_loss(nn::Var<T> logits, int label);

struct DiscriminatorLosses {
  nn::Var<float> dis_A;  // gan(D_A(fake_a), 0) + gan(D_A(a), 1)
  nn::Var<float> dis_B;  // gan(D_B(fake_b), 0) + gan(D_B(b), 1)
  /// Body features of each evaluation, for pushing into the caches.
  nn::Var<float> feat_real_a, feat_fake_a, feat_real_b, feat_fake_b;
};

/// Fakes must not carry generator gradients (ContractError otherwise).
DiscriminatorLosses discriminator_losses(DiscriminatorState& d_a, DiscriminatorState& d_b, nn::Tape<float>& tape,
                                         nn::Var<float> a, nn::Var<float> b, nn::Var<float> fake_a,
                                         nn::Var<float> fake_b);

struct LossWeights {
  double gan = 1.0;  // beta1
  double idt = 10.0;  // beta2
  double cyc = 0.5;  // beta3
  PixelwiseWeights pixel{};
};

struct GeneratorLoss {
  nn::Var<float> total;
  nn::Var<float> gan_A, gan_B, idt_A, idt_B, cyc_A, cyc_B;
  nn::Var<float> fake_a, fake_b;  // G_BA(b), G_AB(a)
};

/// beta1 (gan_A + gan_B) + beta2 (idt_A + idt_B) + beta3 (cyc_A + cyc_B) with
///   gan_A = gan(D_B(G_AB(a)), 1),  idt_A = pix(G_BA(a), a),  cyc_A = pix(G_BA(G_AB(a)), a)
/// and the mirrored B terms. Discriminators enter as constants. Fakes already
/// computed on `tape` may be passed in to avoid recomputing them.
GeneratorLoss generator_loss(GeneratorWeights& g_ab, GeneratorWeights& g_ba, DiscriminatorState& d_a,
                             DiscriminatorState& d_b, nn::Tape<float>& tape, nn::Var<float> a, nn::Var<float> b,
                             const LossWeights& weights, PerceptualExtractor& extractor,
                             nn::Var<float> fake_b = {}, nn::Var<float> fake_a = {});

}  // namespace rawformer
