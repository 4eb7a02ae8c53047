#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "rawformer/nn/blocks.hpp"

namespace rawformer {

enum class DiscriminatorArch { rawformer, patchgan };

std::string to_string(DiscriminatorArch a);
DiscriminatorArch parse_discriminator_arch(const std::string& s);

struct DiscriminatorConfig {
  /// CQA residual block before every strided stage of the body.
  bool use_attention = true;
  /// Batch normalisation after every strided convolution of the body.
  bool use_batchnorm = false;
  /// Head: batch normalisation over [current; cached] features, then two 3x3 convs.
  bool use_batch_head = true;
  DiscriminatorArch arch = DiscriminatorArch::rawformer;
  int base_channels = 16;
  int cache_capacity = 3;
  nn::CqaConfig cqa{};
  std::uint64_t seed = 0;

  /// Ablation rows 1..4: plain body, +attention, +body batchnorm, attention + batch head.
  static DiscriminatorConfig ablation(int row);
  static DiscriminatorConfig patchgan();

  void validate() const;
};

/// FIFO store of detached body features.
class FeatureCache {
 public:
  explicit FeatureCache(int capacity = 3) : capacity_(capacity) {}

  /// Appends a copy; evicts the oldest entry beyond capacity. The first push
  /// fixes the accepted shape.
  void push(const nn::Tensor<float>& features);
  int capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::deque<nn::Tensor<float>>& entries() const noexcept { return entries_; }
  void clear() { entries_.clear(); }

 private:
  int capacity_;
  std::deque<nn::Tensor<float>> entries_;
};

enum class CacheKey { real_A = 0, real_B = 1, fake_A = 2, fake_B = 3 };

std::string to_string(CacheKey k);
/// "real_A", "real_B", "fake_A", "fake_B"; anything else throws KeyError.
CacheKey parse_cache_key(const std::string& s);

struct DiscriminatorState {
  DiscriminatorConfig config;
  nn::ParamSet<float> params;
  std::array<FeatureCache, 4> caches{FeatureCache(3), FeatureCache(3), FeatureCache(3), FeatureCache(3)};

  FeatureCache& cache(CacheKey k) { return caches[static_cast<int>(k)]; }
  const FeatureCache& cache(CacheKey k) const { return caches[static_cast<int>(k)]; }
};

template <typename T>
void add_discriminator_params(const DiscriminatorConfig& cfg, nn::ParamSet<T>& params);

DiscriminatorState build_discriminator(const DiscriminatorConfig& cfg);

template <typename T>
struct DiscriminatorOutput {
  /// Logit map of the current samples only, (N, 1, H/8, W/8).
  nn::Var<T> logits;
  /// Body features of the current samples.
  nn::Var<T> features;
  /// Batch size seen by the head (current + cached).
  int head_batch = 0;
};

/// Body on x, then the head on x's features concatenated (along the batch)
/// with `cached` features, which enter as constants.
template <typename T>
DiscriminatorOutput<T> discriminator_forward(const DiscriminatorConfig& cfg, nn::ParamSet<T>& params,
                                             nn::Tape<T>& tape, nn::Var<T> x,
                                             std::span<const nn::Tensor<T>> cached = {}, bool trainable = true);

/// Uses the state's cache for `key`; pushes the current features afterwards
/// when `update_cache` is set.
DiscriminatorOutput<float> discriminator_forward(DiscriminatorState& d, nn::Tape<float>& tape, nn::Var<float> x,
                                                 CacheKey key, bool update_cache, bool trainable = true);

}  // namespace rawformer
