#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rawformer/checkpoint.hpp"
#include "rawformer/discriminator.hpp"
#include "rawformer/generator.hpp"
#include "rawformer/losses.hpp"
#include "rawformer/optim.hpp"
#include "rawformer/synthcam.hpp"

namespace rawformer {

// ---- data helpers -----------------------------------------------------------------

struct MaskedImage {
  ImageTensor masked;
  ImageTensor mask;  // (1,1,H,W), 1 where pixels were zeroed
};

/// Zeroes exactly round(fraction * n_blocks) block x block tiles picked
/// without replacement. DimensionError unless `block` divides H and W.
MaskedImage mask_blocks(const ImageTensor& img, int block, double fraction, std::uint64_t seed);

/// Random crop (crop <= 0 keeps the full image) followed by independent
/// horizontal and vertical flips with probability 1/2 each.
ImageTensor augment(const ImageTensor& img, int crop, bool flips, std::mt19937_64& rng);

/// Concatenates single images along the batch axis.
ImageTensor stack_batch(const std::vector<ImageTensor>& images);

// ---- checkpoint helpers -----------------------------------------------------------

void put_generator(Checkpoint& ckpt, const std::string& prefix, const GeneratorWeights& g);
/// Rebuilds a generator from `<prefix>` tensors and its config echo;
/// CheckpointError when absent.
GeneratorWeights get_generator(const Checkpoint& ckpt, const std::string& prefix);

// ---- pretraining ----------------------------------------------------------------

struct PretrainConfig {
  int epochs = 20;
  int batch_size = 16;
  int crop = 32;
  int mask_block = 8;
  double mask_fraction = 0.40;
  bool flips = true;
  // 0.005 at full scale; at toy scale the first warm restart can saturate
  // the output sigmoid for good.
  AdamConfig adam{0.002, 0.9, 0.99, 1e-8, 0.05};
  double T0 = 10.0;
  double T_mult = 2.0;
  double lr_min = 0.0;
  /// Stop after this many optimizer steps (0: no limit).
  int max_steps = 0;
  /// Write ckpt/pretrain_eNNNN.rfck every this many epochs (0: final only).
  int save_every = 0;
  bool log_wall_time = true;
  PixelwiseWeights pixel{};
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_loss;
  int steps = 0;
};

/// Masked-inpainting pretraining of one generator on train_A and train_B.
/// Writes `<run_dir>/train.csv` (epoch,lr,loss,wall_s) and
/// `<run_dir>/ckpt/pretrain.rfck`; the weights sit under the `gen.` prefix.
PretrainResult run_pretrain(const PretrainConfig& cfg, const DatasetManifest& data, const GeneratorConfig& gen_cfg,
                            const std::filesystem::path& run_dir, PerceptualExtractor& extractor);

// ---- adversarial training ---------------------------------------------------------

struct GanConfig {
  int epochs = 50;
  int batch_size = 1;
  int crop = 32;
  bool flips = true;
  /// Steps per epoch (0: max(|train_A|, |train_B|) / batch_size).
  int steps_per_epoch = 0;
  int max_steps = 0;
  AdamConfig gen_adam{5e-5, 0.5, 0.99, 1e-8, 0.0};
  AdamConfig disc_adam{1e-4, 0.5, 0.99, 1e-8, 0.0};
  LossWeights weights{};
  /// Paired test evaluation every this many epochs (0: never).
  int eval_every = 1;
  int save_every = 0;
  bool log_wall_time = true;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Both generators, both discriminators (with their feature caches) and the
/// four optimizers.
struct GanModels {
  GeneratorWeights g_ab, g_ba;
  DiscriminatorState d_a, d_b;
  Adam opt_g_ab, opt_g_ba, opt_d_a, opt_d_b;

  static GanModels build(const GeneratorConfig& gen_cfg, const DiscriminatorConfig& disc_cfg, const GanConfig& cfg);
  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);
};

struct GanStepLosses {
  double gan_A = 0, gan_B = 0, idt_A = 0, idt_B = 0, cyc_A = 0, cyc_B = 0, dis_A = 0, dis_B = 0;
};

/// Discriminator half of a step: clears D gradients and backpropagates
/// dis_A + dis_B with the generators' fakes as constants. The returned body
/// features are the ones pushed into the caches. No optimizer step.
struct DiscriminatorPhase {
  double dis_A = 0, dis_B = 0;
  nn::Tensor<float> feat_real_a, feat_fake_a, feat_real_b, feat_fake_b;
};
DiscriminatorPhase discriminator_phase(GanModels& m, const ImageTensor& a, const ImageTensor& b,
                                       const ImageTensor& fake_a, const ImageTensor& fake_b);

/// Generator half: clears G gradients and backpropagates the joint generator
/// objective; discriminators enter as constants. No optimizer step.
GanStepLosses generator_phase(GanModels& m, nn::Tape<float>& tape, nn::Var<float> a, nn::Var<float> b,
                              nn::Var<float> fake_b, nn::Var<float> fake_a, const LossWeights& w,
                              PerceptualExtractor& extractor);

/// One full step: fakes, D update, cache pushes, joint G update. NumericError
/// naming the term and step on a non-finite loss.
GanStepLosses gan_step(GanModels& m, const ImageTensor& a, const ImageTensor& b, const LossWeights& w,
                       PerceptualExtractor& extractor, long step);

struct PairedScore {
  double psnr = 0, ssim = 0;
  /// PSNR(G_BA(G_AB(a)), a); only filled when G_BA is given.
  std::optional<double> cycle_psnr;
};
/// Mean PSNR/SSIM of G_AB(test_A) against test_B (same scenes).
PairedScore paired_test_score(GeneratorWeights& g_ab, const DatasetManifest& data, GeneratorWeights* g_ba = nullptr);

struct GanResult {
  Checkpoint checkpoint;
  std::vector<GanStepLosses> epoch_losses;
  std::optional<PairedScore> final_score;
  long steps = 0;
};

/// CycleGAN-style fine-tuning. `init` may be a pretraining checkpoint (its
/// `gen.` weights seed both generators) or an adversarial checkpoint to resume
/// from. Writes `<run_dir>/train.csv`, `<run_dir>/ckpt/gan.rfck` and a few
/// rendered test translations under `<run_dir>/img/`.
GanResult run_gan_train(const GanConfig& cfg, const DatasetManifest& data, const GeneratorConfig& gen_cfg,
                        const DiscriminatorConfig& disc_cfg, const std::filesystem::path& run_dir,
                        PerceptualExtractor& extractor, const Checkpoint* init = nullptr);

// ---- inference --------------------------------------------------------------------

enum class Direction { A2B, B2A };
Direction parse_direction(const std::string& s);

/// Maps every `.rawimg` of in_dir into out_dir under the same file name.
/// Pretraining checkpoints serve both directions with their one generator.
std::size_t translate(const Checkpoint& ckpt, Direction dir, const std::filesystem::path& in_dir,
                      const std::filesystem::path& out_dir);

}  // namespace rawformer
