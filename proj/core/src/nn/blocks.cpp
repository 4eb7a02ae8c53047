#include "rawformer/nn/blocks.hpp"

#include "rawformer/nn/attention.hpp"

namespace rawformer::nn {

CompressTarget parse_compress_target(const std::string& s) {
  if (s == "Q" || s == "q" || s == "query") return CompressTarget::query;
  if (s == "K" || s == "k" || s == "key") return CompressTarget::key;
  if (s == "V" || s == "v" || s == "value") return CompressTarget::value;
  throw ConfigError("unknown attention compress target '" + s + "' (expected Q, K or V)");
}

PoolKind parse_pool_kind(const std::string& s) {
  if (s == "avg") return PoolKind::avg_linear;
  if (s == "max") return PoolKind::max_linear;
  if (s == "conv") return PoolKind::strided_conv;
  if (s == "dwconv") return PoolKind::strided_depthwise;
  if (s == "merge") return PoolKind::patch_merge;
  throw ConfigError("unknown condensing pool '" + s + "' (expected avg, max, conv, dwconv or merge)");
}

std::string to_string(CompressTarget t) {
  switch (t) {
    case CompressTarget::query: return "Q";
    case CompressTarget::key: return "K";
    case CompressTarget::value: return "V";
  }
  return "?";
}

std::string to_string(PoolKind p) {
  switch (p) {
    case PoolKind::avg_linear: return "avg";
    case PoolKind::max_linear: return "max";
    case PoolKind::strided_conv: return "conv";
    case PoolKind::strided_depthwise: return "dwconv";
    case PoolKind::patch_merge: return "merge";
  }
  return "?";
}

// ---- CQA ---------------------------------------------------------------------

template <typename T>
void add_cqa(Initializer<T>& init, const std::string& prefix, int channels, const CqaConfig& cfg) {
  if (cfg.heads < 1 || channels % cfg.heads != 0)
    throw ModelError(prefix + ": " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(cfg.heads) + " heads");
  if (cfg.r < 1) throw ModelError(prefix + ": condense factor must be >= 1");
  init.linear(prefix + ".q", channels, channels);
  init.linear(prefix + ".k", channels, channels);
  init.linear(prefix + ".v", channels, channels);
  const std::string c = prefix + ".condense";
  switch (cfg.pool) {
    case PoolKind::avg_linear:
    case PoolKind::max_linear: init.linear(c, channels, channels); break;
    case PoolKind::strided_conv: init.conv(c, channels, channels, cfg.r, cfg.r); break;
    case PoolKind::strided_depthwise: init.conv(c, channels, 1, cfg.r, cfg.r); break;
    case PoolKind::patch_merge: init.linear(c, channels, channels * cfg.r * cfg.r); break;
  }
  init.linear(prefix + ".out", channels, channels);
}

namespace {

template <typename T>
Var<T> modulated_query(const Binder<T>& b, const std::string& name, Var<T> x, Var<T> style) {
  const Var<T> w = b(name + ".weight");
  const Var<T> bias = b.optional(name + ".bias");
  const Shape xs = x.value().shape();
  if (style.value().shape() != Shape{xs.n, xs.c, 1, 1})
    throw DimensionError(name + ": style vector " + to_string(style.value().shape()) + " does not match input " +
                         to_string(xs));
  ScopeGuard<T> scope(b.tape(), name);
  if (xs.n == 1) return conv2d(x, modulate_weights(w, style, T(1e-8), true), bias);
  std::vector<Var<T>> outs;
  outs.reserve(xs.n);
  for (int i = 0; i < xs.n; ++i) {
    const Var<T> wi = modulate_weights(w, slice(style, 0, i, 1), T(1e-8), true);
    outs.push_back(conv2d(slice(x, 0, i, 1), wi, bias));
  }
  return concat(outs, 0);
}

}  // namespace

template <typename T>
Var<T> cqa_block(const Binder<T>& b, const std::string& prefix, Var<T> x, const CqaConfig& cfg, Var<T> style) {
  const Shape xs = x.value().shape();
  if (xs.h % cfg.r != 0 || xs.w % cfg.r != 0)
    throw DimensionError(prefix + ": condense factor " + std::to_string(cfg.r) + " does not divide " +
                         std::to_string(xs.h) + "x" + std::to_string(xs.w));
  const Var<T> q = style.valid() ? modulated_query(b, prefix + ".q", x, style) : b.conv(prefix + ".q", x);
  const Var<T> k = b.conv(prefix + ".k", x);
  const Var<T> v = b.conv(prefix + ".v", x);
  const Var<T> src = cfg.target == CompressTarget::query ? q : (cfg.target == CompressTarget::key ? k : v);
  const std::string c = prefix + ".condense";
  Var<T> condensed;
  switch (cfg.pool) {
    case PoolKind::avg_linear: condensed = b.conv(c, avg_pool2d(src, cfg.r)); break;
    case PoolKind::max_linear: condensed = b.conv(c, max_pool2d(src, cfg.r)); break;
    case PoolKind::strided_conv: condensed = b.conv(c, src, {cfg.r, 0, 1}); break;
    case PoolKind::strided_depthwise: condensed = b.conv(c, src, {cfg.r, 0, xs.c}); break;
    case PoolKind::patch_merge: condensed = b.conv(c, pixel_unshuffle(src, cfg.r)); break;
  }
  Var<T> y;
  {
    ScopeGuard<T> scope(b.tape(), prefix);
    y = condensed_attention(q, k, v, condensed, cfg.heads);
  }
  return b.conv(prefix + ".out", y);
}

// ---- SPFN ----------------------------------------------------------------------

template <typename T>
void add_spfn(Initializer<T>& init, const std::string& prefix, int channels, int expansion) {
  const int hidden = channels * expansion;
  init.norm(prefix + ".norm", channels);
  init.conv(prefix + ".pw1", hidden, channels, 1, 1);
  init.conv(prefix + ".pw2", hidden, channels, 1, 1);
  init.conv(prefix + ".dw3", hidden, 1, 3, 3);
  init.conv(prefix + ".dw5", hidden, 1, 5, 5);
  init.conv(prefix + ".fuse", channels, 2 * hidden, 1, 1);
}

template <typename T>
Var<T> spfn_block(const Binder<T>& b, const std::string& prefix, Var<T> x, T slope) {
  const Var<T> a = b.layer_norm(prefix + ".norm", x);
  const Var<T> h1 = b.conv(prefix + ".pw1", a);
  const Var<T> h2 = b.conv(prefix + ".pw2", a);
  const int hidden = h1.value().shape().c;
  const Var<T> x1 = leaky_relu(b.conv(prefix + ".dw3", h1, {1, -1, hidden}), slope);
  const Var<T> x2 = leaky_relu(b.conv(prefix + ".dw5", h2, {1, -1, hidden}), slope);
  return add(b.conv(prefix + ".fuse", concat<T>({x1, x2}, 1)), x);
}

// ---- resamplers ----------------------------------------------------------------

template <typename T>
void add_cdown(Initializer<T>& init, const std::string& prefix, int cin, int cout, bool composite) {
  init.conv(prefix + ".conv", cout, cin, 3, 3);
  if (composite) {
    init.conv(prefix + ".unshuffle", cout, 4 * cin, 1, 1);
    init.conv(prefix + ".fuse", cout, 2 * cout, 1, 1);
  }
}

template <typename T>
Var<T> cdown_block(const Binder<T>& b, const std::string& prefix, Var<T> x) {
  const Shape xs = x.value().shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0)
    throw DimensionError(prefix + ": downsampling needs even spatial dims, got " + to_string(xs));
  const Var<T> strided = b.conv(prefix + ".conv", x, {2, 1, 1});
  if (!b.has(prefix + ".fuse.weight")) return strided;
  const Var<T> packed = b.conv(prefix + ".unshuffle", pixel_unshuffle(x, 2));
  return b.conv(prefix + ".fuse", concat<T>({packed, strided}, 1));
}

template <typename T>
void add_cup(Initializer<T>& init, const std::string& prefix, int cin, int cout, bool composite) {
  init.deconv(prefix + ".deconv", cin, cout, 4);
  if (composite) {
    if (cin % 4 != 0) throw ModelError(prefix + ": shuffle branch needs channels divisible by 4");
    init.conv(prefix + ".shuffle", cout, cin / 4, 1, 1);
    init.conv(prefix + ".fuse", cout, 2 * cout, 1, 1);
  }
}

template <typename T>
Var<T> cup_block(const Binder<T>& b, const std::string& prefix, Var<T> x) {
  const Var<T> deconv = b.deconv(prefix + ".deconv", x, 2, 1);
  if (!b.has(prefix + ".fuse.weight")) return deconv;
  const Var<T> spread = b.conv(prefix + ".shuffle", pixel_shuffle(x, 2));
  return b.conv(prefix + ".fuse", concat<T>({spread, deconv}, 1));
}

// ---- LLayer ----------------------------------------------------------------------

template <typename T>
void add_llayer(Initializer<T>& init, const std::string& prefix, int enc_channels, int dec_channels) {
  init.conv(prefix + ".proj", dec_channels, enc_channels, 1, 1);
  init.add(prefix + ".gate", Tensor<T>(Shape{1, 1, 1, 1}));
  Tensor<T> fuse = init.kaiming(Shape{dec_channels, 2 * dec_channels, 1, 1}, 2 * dec_channels);
  for (int j = 0; j < dec_channels; ++j)
    for (int i = 0; i < dec_channels; ++i) fuse.at(j, dec_channels + i, 0, 0) = i == j ? T(1) : T(0);
  init.add(prefix + ".fuse.weight", std::move(fuse));
  init.add(prefix + ".fuse.bias", Tensor<T>(Shape{1, dec_channels, 1, 1}));
}

template <typename T>
Var<T> llayer_fuse(const Binder<T>& b, const std::string& prefix, Var<T> enc, Var<T> dec) {
  const Shape es = enc.value().shape(), ds = dec.value().shape();
  if (es.n != ds.n || es.h != ds.h || es.w != ds.w)
    throw DimensionError(prefix + ": encoder map " + to_string(es) + " and decoder map " + to_string(ds) +
                         " differ spatially");
  const Var<T> gated = mul(b.conv(prefix + ".proj", enc), b(prefix + ".gate"));
  return b.conv(prefix + ".fuse", concat<T>({gated, dec}, 1));
}

// ---- ViT -------------------------------------------------------------------------

template <typename T>
void add_vit(Initializer<T>& init, const std::string& prefix, int channels, const VitConfig& cfg) {
  if (cfg.heads < 1 || channels % cfg.heads != 0)
    throw ModelError(prefix + ": " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(cfg.heads) + " heads");
  init.add(prefix + ".pos", init.trunc_normal(Shape{1, channels, cfg.grid_h, cfg.grid_w}, 0.02));
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    init.norm(p + ".norm1", channels);
    init.linear(p + ".qkv", 3 * channels, channels);
    init.linear(p + ".proj", channels, channels);
    init.norm(p + ".norm2", channels);
    init.linear(p + ".fc1", cfg.mlp_ratio * channels, channels);
    init.linear(p + ".fc2", channels, cfg.mlp_ratio * channels);
  }
}

template <typename T>
VitOutput<T> vit_bottleneck(const Binder<T>& b, const std::string& prefix, Var<T> x, Var<T> style_token,
                            const VitConfig& cfg) {
  const Shape xs = x.value().shape();
  Var<T> pos = b(prefix + ".pos");
  const Shape ps = pos.value().shape();
  if (ps.c != xs.c)
    throw DimensionError(prefix + ": input " + to_string(xs) + " does not match embedding width " +
                         std::to_string(ps.c));
  if (ps.h != xs.h || ps.w != xs.w) {
    if (!cfg.resize_pos)
      throw DimensionError(prefix + ": " + std::to_string(xs.h * xs.w) + " image tokens do not match the " +
                           std::to_string(ps.h * ps.w) + "-token positional grid");
    pos = resize_bilinear(pos, xs.h, xs.w);
  }
  const int n_img = xs.h * xs.w;
  Var<T> t = reshape(add(x, pos), Shape{xs.n, xs.c, 1, n_img});
  if (style_token.valid()) {
    if (style_token.value().shape() != Shape{1, xs.c, 1, 1})
      throw DimensionError(prefix + ": style token " + to_string(style_token.value().shape()) +
                           " does not match width " + std::to_string(xs.c));
    t = concat<T>({t, expand(style_token, Shape{xs.n, xs.c, 1, 1})}, 3);
  }
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    const Var<T> qkv = b.conv(p + ".qkv", b.layer_norm(p + ".norm1", t));
    Var<T> attn;
    {
      ScopeGuard<T> scope(b.tape(), p);
      attn = dense_attention(slice(qkv, 1, 0, xs.c), slice(qkv, 1, xs.c, xs.c), slice(qkv, 1, 2 * xs.c, xs.c),
                             cfg.heads);
    }
    t = add(t, b.conv(p + ".proj", attn));
    const Var<T> h = gelu(b.conv(p + ".fc1", b.layer_norm(p + ".norm2", t)));
    t = add(t, b.conv(p + ".fc2", h));
  }
  VitOutput<T> out;
  if (style_token.valid()) {
    out.image = reshape(slice(t, 3, 0, n_img), xs);
    out.style = slice(t, 3, n_img, 1);
  } else {
    out.image = reshape(t, xs);
  }
  return out;
}

#define RAWFORMER_INSTANTIATE(T)                                                                        \
  template void add_cqa(Initializer<T>&, const std::string&, int, const CqaConfig&);                   \
  template Var<T> cqa_block(const Binder<T>&, const std::string&, Var<T>, const CqaConfig&, Var<T>);   \
  template void add_spfn(Initializer<T>&, const std::string&, int, int);                               \
  template Var<T> spfn_block(const Binder<T>&, const std::string&, Var<T>, T);                         \
  template void add_cdown(Initializer<T>&, const std::string&, int, int, bool);                        \
  template Var<T> cdown_block(const Binder<T>&, const std::string&, Var<T>);                           \
  template void add_cup(Initializer<T>&, const std::string&, int, int, bool);                          \
  template Var<T> cup_block(const Binder<T>&, const std::string&, Var<T>);                             \
  template void add_llayer(Initializer<T>&, const std::string&, int, int);                             \
  template Var<T> llayer_fuse(const Binder<T>&, const std::string&, Var<T>, Var<T>);                   \
  template void add_vit(Initializer<T>&, const std::string&, int, const VitConfig&);                   \
  template VitOutput<T> vit_bottleneck(const Binder<T>&, const std::string&, Var<T>, Var<T>,           \
                                       const VitConfig&);

RAWFORMER_INSTANTIATE(float)
RAWFORMER_INSTANTIATE(double)

#undef RAWFORMER_INSTANTIATE

}  // namespace rawformer::nn
