#include "rawformer/losses.hpp"

#include <cmath>

#include "rawformer/checkpoint.hpp"
#include "rawformer/errors.hpp"

namespace rawformer {

using nn::Var;

namespace {

template <typename T>
nn::Tensor<T> gaussian_window(int channels) {
  constexpr double sigma = 1.5;
  double g[kSsimWindow];
  double total = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += g[i];
  }
  nn::Tensor<T> w(nn::Shape{channels, 1, kSsimWindow, kSsimWindow});
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < kSsimWindow; ++i)
      for (int j = 0; j < kSsimWindow; ++j) w.at(c, 0, i, j) = static_cast<T>(g[i] * g[j] / (total * total));
  return w;
}

void check_same_shape(const char* op, const nn::Shape& a, const nn::Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes " + nn::to_string(a) + " and " + nn::to_string(b) + " differ");
}

}  // namespace

template <typename T>
Var<T> ssim_index(Var<T> x, Var<T> y) {
  const nn::Shape s = x.value().shape();
  check_same_shape("ssim", s, y.value().shape());
  if (s.h < kSsimWindow || s.w < kSsimWindow)
    throw DimensionError("ssim: images must be at least " + std::to_string(kSsimWindow) + " px per side, got " +
                         nn::to_string(s));
  nn::Tape<T>& tape = x.tape();
  const Var<T> win = tape.constant(gaussian_window<T>(s.c));
  const nn::Conv2dSpec valid{1, 0, s.c};
  auto blur = [&](Var<T> v) { return nn::conv2d(v, win, Var<T>(), valid); };
  constexpr T C1 = T(0.01 * 0.01), C2 = T(0.03 * 0.03);
  const Var<T> mx = blur(x), my = blur(y);
  const Var<T> mxx = nn::square(mx), myy = nn::square(my), mxy = nn::mul(mx, my);
  const Var<T> sxx = nn::sub(blur(nn::square(x)), mxx);
  const Var<T> syy = nn::sub(blur(nn::square(y)), myy);
  const Var<T> sxy = nn::sub(blur(nn::mul(x, y)), mxy);
  const Var<T> num = nn::mul(nn::add_scalar(nn::scale(mxy, T(2)), C1), nn::add_scalar(nn::scale(sxy, T(2)), C2));
  const Var<T> den = nn::mul(nn::add_scalar(nn::add(mxx, myy), C1), nn::add_scalar(nn::add(sxx, syy), C2));
  return nn::mean(nn::div(num, den));
}

// ---- perceptual features ---------------------------------------------------------

namespace {
constexpr int kExtractorWidths[3] = {16, 32, 64};
}

template <typename T>
void add_extractor_params(nn::ParamSet<T>& params, std::uint64_t seed) {
  nn::Initializer<T> init(params, seed);
  int cin = 3;
  for (int s = 0; s < 3; ++s) {
    const std::string p = "percep.stage" + std::to_string(s);
    // He-uniform scale keeps activations from shrinking through the stack.
    nn::Tensor<T> w = init.kaiming(nn::Shape{kExtractorWidths[s], cin, 3, 3}, cin * 9);
    for (auto& v : w.values()) v *= static_cast<T>(std::sqrt(6.0));
    init.add(p + ".weight", std::move(w));
    init.add(p + ".bias", nn::Tensor<T>(nn::Shape{1, kExtractorWidths[s], 1, 1}));
    cin = kExtractorWidths[s];
  }
  params.frozen = true;
}

PerceptualExtractor PerceptualExtractor::random(std::uint64_t seed) {
  PerceptualExtractor e;
  add_extractor_params(e.params, seed);
  return e;
}

PerceptualExtractor PerceptualExtractor::load(const std::filesystem::path& path) {
  PerceptualExtractor e = random();
  load_checkpoint(path).get("", e.params);
  e.params.frozen = true;
  return e;
}

template <typename T>
std::vector<Var<T>> extractor_features(nn::ParamSet<T>& params, nn::Tape<T>& tape, Var<T> x) {
  const nn::Binder<T> b(tape, params, false);
  std::vector<Var<T>> out;
  Var<T> h = x;
  for (int s = 0; s < 3; ++s) {
    h = nn::leaky_relu(b.conv("percep.stage" + std::to_string(s), h, {2, 1, 1}), T(0.2));
    out.push_back(h);
  }
  return out;
}

template <typename T>
PixelwiseTerms<T> pixelwise_terms(Var<T> pred, Var<T> target, nn::ParamSet<T>& extractor, const PixelwiseWeights& w) {
  check_same_shape("pixelwise_loss", pred.value().shape(), target.value().shape());
  nn::Tape<T>& tape = pred.tape();
  PixelwiseTerms<T> t;
  const Var<T> diff = nn::sub(pred, target);
  t.l1 = nn::mean(nn::abs(diff));
  t.ssim = nn::add_scalar(nn::scale(ssim_index(pred, target), T(-1)), T(1));
  const auto fp = extractor_features(extractor, tape, pred);
  const auto ft = extractor_features(extractor, tape, target);
  t.perceptual = nn::mean(nn::square(nn::sub(fp[0], ft[0])));
  for (std::size_t s = 1; s < fp.size(); ++s)
    t.perceptual = nn::add(t.perceptual, nn::mean(nn::square(nn::sub(fp[s], ft[s]))));
  t.total = nn::add(nn::add(nn::scale(t.l1, static_cast<T>(w.l1)), nn::scale(t.ssim, static_cast<T>(w.ssim))),
                    nn::scale(t.perceptual, static_cast<T>(w.perceptual)));
  return t;
}

template <typename T>
Var<T> gan_loss(Var<T> logits, int label) {
  if (label != 0 && label != 1) throw ParameterError("gan_loss: label must be 0 or 1");
  // BCE with logits: -log(sigmoid(z)) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z).
  return nn::mean(nn::softplus(label == 1 ? nn::scale(logits, T(-1)) : logits));
}

// ---- adversarial objectives -----------------------------------------------------------

DiscriminatorLosses discriminator_losses(DiscriminatorState& d_a, DiscriminatorState& d_b, nn::Tape<float>& tape,
                                         Var<float> a, Var<float> b, Var<float> fake_a, Var<float> fake_b) {
  if (tape.requires_grad(fake_a) || tape.requires_grad(fake_b))
    throw ContractError("discriminator_losses: fakes must be detached from the generator graph");
  DiscriminatorLosses out;
  const auto ra = discriminator_forward(d_a, tape, a, CacheKey::real_A, false);
  const auto fa = discriminator_forward(d_a, tape, fake_a, CacheKey::fake_A, false);
  const auto rb = discriminator_forward(d_b, tape, b, CacheKey::real_B, false);
  const auto fb = discriminator_forward(d_b, tape, fake_b, CacheKey::fake_B, false);
  out.dis_A = nn::add(gan_loss(fa.logits, 0), gan_loss(ra.logits, 1));
  out.dis_B = nn::add(gan_loss(fb.logits, 0), gan_loss(rb.logits, 1));
  out.feat_real_a = ra.features;
  out.feat_fake_a = fa.features;
  out.feat_real_b = rb.features;
  out.feat_fake_b = fb.features;
  return out;
}

GeneratorLoss generator_loss(GeneratorWeights& g_ab, GeneratorWeights& g_ba, DiscriminatorState& d_a,
                             DiscriminatorState& d_b, nn::Tape<float>& tape, Var<float> a, Var<float> b,
                             const LossWeights& weights, PerceptualExtractor& extractor, Var<float> fake_b,
                             Var<float> fake_a) {
  auto G_ab = [&](Var<float> x) { return generator_forward(g_ab.config, g_ab.params, tape, x); };
  auto G_ba = [&](Var<float> x) { return generator_forward(g_ba.config, g_ba.params, tape, x); };
  GeneratorLoss out;
  out.fake_b = fake_b.valid() ? fake_b : G_ab(a);
  out.fake_a = fake_a.valid() ? fake_a : G_ba(b);
  out.gan_A = gan_loss(discriminator_forward(d_b, tape, out.fake_b, CacheKey::fake_B, false, false).logits, 1);
  out.gan_B = gan_loss(discriminator_forward(d_a, tape, out.fake_a, CacheKey::fake_A, false, false).logits, 1);
  out.idt_A = pixelwise_loss(G_ba(a), a, extractor.params, weights.pixel);
  out.idt_B = pixelwise_loss(G_ab(b), b, extractor.params, weights.pixel);
  out.cyc_A = pixelwise_loss(G_ba(out.fake_b), a, extractor.params, weights.pixel);
  out.cyc_B = pixelwise_loss(G_ab(out.fake_a), b, extractor.params, weights.pixel);
  const Var<float> gan = nn::add(out.gan_A, out.gan_B);
  const Var<float> idt = nn::add(out.idt_A, out.idt_B);
  const Var<float> cyc = nn::add(out.cyc_A, out.cyc_B);
  out.total = nn::add(nn::add(nn::scale(gan, static_cast<float>(weights.gan)), nn::scale(idt, static_cast<float>(weights.idt))),
                      nn::scale(cyc, static_cast<float>(weights.cyc)));
  return out;
}

#define RAWFORMER_INSTANTIATE(T)                                                                     \
  template Var<T> ssim_index(Var<T>, Var<T>);                                                       \
  template void add_extractor_params(nn::ParamSet<T>&, std::uint64_t);                              \
  template std::vector<Var<T>> extractor_features(nn::ParamSet<T>&, nn::Tape<T>&, Var<T>);          \
  template PixelwiseTerms<T> pixelwise_terms(Var<T>, Var<T>, nn::ParamSet<T>&, const PixelwiseWeights&); \
  template Var<T> gan_loss(Var<T>, int);

RAWFORMER_INSTANTIATE(float)
RAWFORMER_INSTANTIATE(double)

#undef RAWFORMER_INSTANTIATE

}  // namespace rawformer
