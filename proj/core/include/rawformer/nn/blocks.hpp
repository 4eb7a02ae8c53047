#pragma once

#include <string>

#include "rawformer/nn/module.hpp"

// Network building blocks. Each block has an `add_*` function that registers
// its parameters under a name prefix and a forward function that reads them
// back through a Binder.
namespace rawformer::nn {

// ---- condensed query attention ----------------------------------------------

/// Which projection the condensed token set is pooled from.
enum class CompressTarget { query, key, value };

/// How the condensed tokens are produced from the full-resolution map.
enum class PoolKind {
  avg_linear,         // r x r average pool, then 1x1 projection
  max_linear,         // r x r max pool, then 1x1 projection
  strided_conv,       // r x r convolution with stride r
  strided_depthwise,  // r x r depthwise convolution with stride r
  patch_merge,        // pixel unshuffle by r, then 1x1 projection
};

struct CqaConfig {
  int heads = 2;
  int r = 2;
  CompressTarget target = CompressTarget::query;
  PoolKind pool = PoolKind::avg_linear;
};

CompressTarget parse_compress_target(const std::string& s);
PoolKind parse_pool_kind(const std::string& s);
std::string to_string(CompressTarget t);
std::string to_string(PoolKind p);

template <typename T>
void add_cqa(Initializer<T>& init, const std::string& prefix, int channels, const CqaConfig& cfg);

/// Q, K, V 1x1 projections, condensed tokens, condensed attention, output
/// projection. When `style` (B, C, 1, 1) is given, the query projection
/// weights are modulated and demodulated per sample.
template <typename T>
Var<T> cqa_block(const Binder<T>& b, const std::string& prefix, Var<T> x, const CqaConfig& cfg,
                 Var<T> style = {});

// ---- scale perceptive feed-forward ------------------------------------------

template <typename T>
void add_spfn(Initializer<T>& init, const std::string& prefix, int channels, int expansion = 2);

/// x + fuse(concat(lrelu(dw3(pw1(LN x))), lrelu(dw5(pw2(LN x))))).
template <typename T>
Var<T> spfn_block(const Binder<T>& b, const std::string& prefix, Var<T> x, T slope = T(0.2));

// ---- resamplers ---------------------------------------------------------------

/// 3x3 stride-2 convolution; with `composite`, in parallel with a pixel
/// unshuffle + 1x1 branch, the two fused by 1x1 over their concatenation.
template <typename T>
void add_cdown(Initializer<T>& init, const std::string& prefix, int cin, int cout, bool composite);
template <typename T>
Var<T> cdown_block(const Binder<T>& b, const std::string& prefix, Var<T> x);

/// 4x4 stride-2 transposed convolution; with `composite`, in parallel with a
/// pixel shuffle + 1x1 branch, fused the same way.
template <typename T>
void add_cup(Initializer<T>& init, const std::string& prefix, int cin, int cout, bool composite);
template <typename T>
Var<T> cup_block(const Binder<T>& b, const std::string& prefix, Var<T> x);

// ---- linking layer -------------------------------------------------------------

/// Gated encoder projection concatenated with the decoder map and fused back
/// to the decoder width. The gate starts at 0 and the fusion starts as the
/// identity on the decoder half, so the initial output equals `dec`.
template <typename T>
void add_llayer(Initializer<T>& init, const std::string& prefix, int enc_channels, int dec_channels);
template <typename T>
Var<T> llayer_fuse(const Binder<T>& b, const std::string& prefix, Var<T> enc, Var<T> dec);

// ---- transformer bottleneck ------------------------------------------------------

struct VitConfig {
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 2;
  /// Grid of the learned positional embedding.
  int grid_h = 4;
  int grid_w = 4;
  /// Resample the positional embedding to other grids instead of rejecting them.
  bool resize_pos = true;
};

template <typename T>
void add_vit(Initializer<T>& init, const std::string& prefix, int channels, const VitConfig& cfg);

template <typename T>
struct VitOutput {
  Var<T> image;
  /// Transformed style token (B, C, 1, 1); invalid when no token was given.
  Var<T> style;
};

/// Pixels of x become tokens; an optional style token (1, C, 1, 1) is
/// appended to every sample's sequence. Pre-norm encoder layers.
template <typename T>
VitOutput<T> vit_bottleneck(const Binder<T>& b, const std::string& prefix, Var<T> x, Var<T> style_token,
                            const VitConfig& cfg);

}  // namespace rawformer::nn
