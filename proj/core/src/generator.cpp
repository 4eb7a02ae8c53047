#include "rawformer/generator.hpp"

#include "rawformer/errors.hpp"

namespace rawformer {

using nn::Var;

std::string to_string(GeneratorArch a) { return a == GeneratorArch::rawformer ? "rawformer" : "baseline_unet"; }

GeneratorArch parse_generator_arch(const std::string& s) {
  if (s == "rawformer") return GeneratorArch::rawformer;
  if (s == "baseline_unet") return GeneratorArch::baseline_unet;
  throw ConfigError("unknown generator arch '" + s + "' (expected rawformer or baseline_unet)");
}

GeneratorConfig GeneratorConfig::ablation(int row) {
  if (row < 1 || row > 5) throw ConfigError("generator ablation row must be 1..5, got " + std::to_string(row));
  GeneratorConfig c;
  c.arch = row == 1 ? GeneratorArch::baseline_unet : GeneratorArch::rawformer;
  c.use_cqa = row >= 2;
  c.use_style = row >= 3;
  c.use_spfn = row >= 4;
  c.use_composite = row >= 5;
  return c;
}

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("generator: " + m); };
  if (levels < 1) fail("levels must be >= 1");
  if (base_channels < 4 || base_channels % 4 != 0) fail("base_channels must be a positive multiple of 4");
  const int multiple = 1 << levels;
  if (image_size < multiple || image_size % multiple != 0)
    fail("image_size " + std::to_string(image_size) + " must be a multiple of " + std::to_string(multiple));
  if (vit.depth < 0 || vit.heads < 1 || channels(levels) % vit.heads != 0)
    fail("vit_heads must divide the bottleneck width " + std::to_string(channels(levels)));
  if (vit.mlp_ratio < 1) fail("vit mlp ratio must be >= 1");
  if (arch == GeneratorArch::baseline_unet) {
    if (use_cqa || use_style || use_spfn || use_composite)
      fail("baseline_unet takes no rawformer toggles (use_cqa/use_style/use_spfn/use_composite)");
    return;
  }
  if (use_style && !use_cqa) fail("use_style modulates the attention query and needs use_cqa");
  if (use_cqa) {
    if (cqa.heads < 1 || base_channels % cqa.heads != 0) fail("cqa_heads must divide base_channels");
    if (cqa.r < 1 || (image_size >> (levels - 1)) % cqa.r != 0)
      fail("cqa_r must divide the deepest attention map (" + std::to_string(image_size >> (levels - 1)) + " px)");
  }
}

template <typename T>
void add_generator_params(const GeneratorConfig& cfg, nn::ParamSet<T>& params) {
  cfg.validate();
  nn::Initializer<T> init(params, cfg.seed);
  const bool rf = cfg.arch == GeneratorArch::rawformer;
  const int L = cfg.levels;
  init.conv("stem", cfg.channels(0), 3, 3, 3);
  for (int i = 0; i < L; ++i) {
    const std::string p = "enc" + std::to_string(i);
    const int c = cfg.channels(i);
    init.norm(p + ".norm1", c);
    init.conv(p + ".local", c, 1, 3, 3);
    if (rf && cfg.use_cqa) nn::add_cqa(init, p + ".cqa", c, cfg.cqa);
    if (rf && cfg.use_spfn) nn::add_spfn(init, p + ".spfn", c);
    nn::add_cdown(init, p + ".down", c, 2 * c, rf && cfg.use_composite);
  }
  nn::VitConfig vit = cfg.vit;
  vit.grid_h = vit.grid_w = cfg.image_size >> L;
  nn::add_vit(init, "vit", cfg.channels(L), vit);
  const bool style = rf && cfg.use_style;
  if (style) init.add("style.token", init.trunc_normal(nn::Shape{1, cfg.channels(L), 1, 1}, 0.02));
  for (int i = L - 1; i >= 0; --i) {
    const std::string p = "dec" + std::to_string(i);
    const int c = cfg.channels(i);
    nn::add_cup(init, p + ".up", 2 * c, c, rf && cfg.use_composite);
    if (rf) nn::add_llayer(init, p + ".link", c, c);
    init.norm(p + ".norm1", c);
    init.conv(p + ".local", c, 1, 3, 3);
    if (rf && cfg.use_cqa) nn::add_cqa(init, p + ".cqa", c, cfg.cqa);
    if (style) {
      init.linear(p + ".style", c, cfg.channels(L), false);
      init.add(p + ".style.bias", nn::Tensor<T>(nn::Shape{1, c, 1, 1}, T(1)));
    }
    if (rf && cfg.use_spfn) nn::add_spfn(init, p + ".spfn", c);
  }
  // Zero head: the network starts as the identity map.
  init.add("head.weight", nn::Tensor<T>(nn::Shape{3, cfg.channels(0), 3, 3}));
  init.add("head.bias", nn::Tensor<T>(nn::Shape{1, 3, 1, 1}));
}

GeneratorWeights build_generator(const GeneratorConfig& cfg) {
  GeneratorWeights g;
  g.config = cfg;
  add_generator_params(cfg, g.params);
  return g;
}

namespace {

// Token mixing of one level: x + local(LN x) [+ CQA(LN x)].
template <typename T>
Var<T> mix(const nn::Binder<T>& b, const GeneratorConfig& cfg, const std::string& p, Var<T> x, Var<T> style) {
  const int c = x.value().shape().c;
  const Var<T> a = b.layer_norm(p + ".norm1", x);
  Var<T> m = b.conv(p + ".local", a, {1, -1, c});
  if (b.has(p + ".cqa.q.weight")) m = nn::add(m, nn::cqa_block(b, p + ".cqa", a, cfg.cqa, style));
  x = nn::add(x, m);
  if (b.has(p + ".spfn.fuse.weight")) x = nn::spfn_block(b, p + ".spfn", x);
  return x;
}

}  // namespace

template <typename T>
Var<T> generator_forward(const GeneratorConfig& cfg, nn::ParamSet<T>& params, nn::Tape<T>& tape, Var<T> x,
                         bool trainable) {
  const nn::Shape xs = x.value().shape();
  const int multiple = 1 << cfg.levels;
  if (xs.c != 3) throw DimensionError("generator: expected 3 input channels, got " + nn::to_string(xs));
  if (xs.h % multiple != 0 || xs.w % multiple != 0)
    throw DimensionError("generator: input " + std::to_string(xs.h) + "x" + std::to_string(xs.w) +
                         " must be a multiple of " + std::to_string(multiple));
  const nn::Binder<T> b(tape, params, trainable);
  const bool rf = cfg.arch == GeneratorArch::rawformer;

  Var<T> h = b.conv("stem", x);
  std::vector<Var<T>> skips;
  for (int i = 0; i < cfg.levels; ++i) {
    const std::string p = "enc" + std::to_string(i);
    h = mix(b, cfg, p, h, Var<T>());
    skips.push_back(h);
    h = nn::cdown_block(b, p + ".down", h);
  }

  nn::VitConfig vit = cfg.vit;
  vit.grid_h = vit.grid_w = cfg.image_size >> cfg.levels;
  const auto bottleneck = nn::vit_bottleneck(b, "vit", h, b.optional("style.token"), vit);
  h = bottleneck.image;

  for (int i = cfg.levels - 1; i >= 0; --i) {
    const std::string p = "dec" + std::to_string(i);
    h = nn::cup_block(b, p + ".up", h);
    h = rf ? nn::llayer_fuse(b, p + ".link", skips[i], h) : nn::add(h, skips[i]);
    Var<T> style;
    if (bottleneck.style.valid() && b.has(p + ".style.weight")) style = b.conv(p + ".style", bottleneck.style);
    h = mix(b, cfg, p, h, style);
  }
  const Var<T> residual = b.conv("head", h);
  return nn::sigmoid(nn::add(residual, nn::logit(x, T(kResidualClamp))));
}

ImageTensor generator_apply(GeneratorWeights& g, const ImageTensor& x) {
  nn::Tape<float> tape;
  const Var<float> in = tape.constant(x);
  return generator_forward(g.config, g.params, tape, in, false).value();
}

template void add_generator_params(const GeneratorConfig&, nn::ParamSet<float>&);
template void add_generator_params(const GeneratorConfig&, nn::ParamSet<double>&);
template Var<float> generator_forward(const GeneratorConfig&, nn::ParamSet<float>&, nn::Tape<float>&, Var<float>,
                                      bool);
template Var<double> generator_forward(const GeneratorConfig&, nn::ParamSet<double>&, nn::Tape<double>&,
                                       Var<double>, bool);

}  // namespace rawformer
