#include "rawformer/gradcheck_suite.hpp"

#include <memory>
#include <random>

#include "rawformer/discriminator.hpp"
#include "rawformer/generator.hpp"
#include "rawformer/losses.hpp"
#include "rawformer/nn/attention.hpp"
#include "rawformer/nn/blocks.hpp"

namespace rawformer {

using nn::Binder;
using nn::GradCheckOptions;
using nn::GradCheckReport;
using nn::ParamSet;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;
using D = double;

namespace {

Tensor<D> uniform(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<D> t(s);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Zero-initialised parameters (heads, gates, biases) would hide whole
/// gradient paths; jitter every tensor a little.
void jitter(ParamSet<D>& ps, std::mt19937_64& rng, double amount = 0.1) {
  std::uniform_real_distribution<double> u(-amount, amount);
  for (auto& [_, p] : ps)
    for (auto& v : p.value.values()) v += u(rng);
}

using Forward = std::function<Var<D>(Tape<D>&, ParamSet<D>&)>;

/// Owns the parameters of a case; every tensor of `ps` is a gradient target.
GradCheckReport check(const std::string& name, std::shared_ptr<ParamSet<D>> ps, Forward f,
                      const GradCheckOptions& opt) {
  return nn::grad_check(name, [ps, f](Tape<D>& t) { return f(t, *ps); }, nn::targets_of(*ps), opt);
}

GradCheckCase unary(const std::string& name, std::function<Var<D>(Var<D>)> op, double lo = -1.0, double hi = 1.0) {
  return {name, kStrictTolerance, [=](const GradCheckOptions& opt) {
            std::mt19937_64 rng(opt.seed);
            auto ps = std::make_shared<ParamSet<D>>();
            ps->add("x", uniform(Shape{2, 3, 4, 5}, rng, lo, hi));
            return check(name, ps, [op](Tape<D>& t, ParamSet<D>& p) { return op(p.bind(t, "x")); }, opt);
          }};
}

GradCheckCase binary(const std::string& name, Shape sa, Shape sb, std::function<Var<D>(Var<D>, Var<D>)> op,
                     double lo_b = -1.0, double hi_b = 1.0) {
  return {name, kStrictTolerance, [=](const GradCheckOptions& opt) {
            std::mt19937_64 rng(opt.seed);
            auto ps = std::make_shared<ParamSet<D>>();
            ps->add("a", uniform(sa, rng));
            ps->add("b", uniform(sb, rng, lo_b, hi_b));
            return check(name, ps,
                         [op](Tape<D>& t, ParamSet<D>& p) { return op(p.bind(t, "a"), p.bind(t, "b")); }, opt);
          }};
}

/// A case whose parameters come from an initializer callback plus an input "x".
GradCheckCase block(const std::string& name, double tol, Shape xs,
                    std::function<void(nn::Initializer<D>&)> build,
                    std::function<Var<D>(const Binder<D>&, Var<D>)> fwd) {
  return {name, tol, [=](const GradCheckOptions& opt) {
            std::mt19937_64 rng(opt.seed);
            auto ps = std::make_shared<ParamSet<D>>();
            nn::Initializer<D> init(*ps, opt.seed);
            build(init);
            jitter(*ps, rng, 0.3);
            ps->add("x", uniform(xs, rng));
            return check(name, ps,
                         [fwd](Tape<D>& t, ParamSet<D>& p) {
                           const Binder<D> b(t, p);
                           return fwd(b, b("x"));
                         },
                         opt);
          }};
}

/// Whole networks: a larger step keeps roundoff below truncation error (the
/// h/2 comparison removes most of the latter), and gradients under 1e-6 are
/// judged absolutely.
GradCheckOptions network_options(GradCheckOptions o) {
  o.step = 1e-4;
  o.gradient_floor = 1e-6;
  return o;
}

}  // namespace

std::vector<GradCheckCase> gradcheck_registry() {
  std::vector<GradCheckCase> r;
  const Shape s{2, 3, 4, 5};

  // ---- tensor primitives
  r.push_back(binary("add", s, s, [](auto a, auto b) { return nn::add(a, b); }));
  r.push_back(binary("add.broadcast", s, Shape{1, 3, 1, 1}, [](auto a, auto b) { return nn::add(a, b); }));
  r.push_back(binary("sub", s, Shape{2, 1, 4, 5}, [](auto a, auto b) { return nn::sub(a, b); }));
  r.push_back(binary("mul", s, Shape{1, 3, 4, 5}, [](auto a, auto b) { return nn::mul(a, b); }));
  r.push_back(binary("div", s, s, [](auto a, auto b) { return nn::div(a, b); }, 0.5, 2.0));
  r.push_back(unary("scale", [](auto a) { return nn::scale(a, D(-1.7)); }));
  r.push_back(unary("add_scalar", [](auto a) { return nn::add_scalar(a, D(0.3)); }));
  r.push_back(unary("square", [](auto a) { return nn::square(a); }));
  r.push_back(unary("abs", [](auto a) { return nn::abs(a); }));
  r.push_back(unary("leaky_relu", [](auto a) { return nn::leaky_relu(a, D(0.2)); }));
  r.push_back(unary("sigmoid", [](auto a) { return nn::sigmoid(a); }, -3, 3));
  r.push_back(unary("gelu", [](auto a) { return nn::gelu(a); }, -3, 3));
  r.push_back(unary("softplus", [](auto a) { return nn::softplus(a); }, -3, 3));
  r.push_back(unary("logit", [](auto a) { return nn::logit(a, D(0.01)); }, 0.05, 0.95));
  r.push_back(unary("sum", [](auto a) { return nn::sum(a); }));
  r.push_back(unary("mean", [](auto a) { return nn::mean(a); }));
  r.push_back(binary("expand", Shape{1, 3, 1, 5}, Shape{1, 1, 1, 1},
                     [](auto a, auto b) { return nn::add(nn::expand(a, Shape{2, 3, 4, 5}), b); }));
  r.push_back(unary("reshape", [](auto a) { return nn::mul(nn::reshape(a, Shape{2, 60, 1, 1}), nn::reshape(a, Shape{2, 60, 1, 1})); }));
  r.push_back(binary("concat", s, Shape{2, 2, 4, 5}, [](auto a, auto b) { return nn::square(nn::concat<D>({a, b}, 1)); }));
  r.push_back(unary("slice", [](auto a) { return nn::square(nn::slice(a, 2, 1, 2)); }));

  r.push_back(block("conv2d", kStrictTolerance, Shape{2, 3, 6, 6},
                    [](auto& i) { i.conv("c", 4, 3, 3, 3); },
                    [](const Binder<D>& b, Var<D> x) { return b.conv("c", x); }));
  r.push_back(block("conv2d.strided", kStrictTolerance, Shape{2, 3, 6, 6},
                    [](auto& i) { i.conv("c", 4, 3, 3, 3); },
                    [](const Binder<D>& b, Var<D> x) { return b.conv("c", x, {2, 1, 1}); }));
  r.push_back(block("conv2d.depthwise", kStrictTolerance, Shape{2, 4, 6, 6},
                    [](auto& i) { i.conv("c", 4, 1, 5, 5); },
                    [](const Binder<D>& b, Var<D> x) { return b.conv("c", x, {1, -1, 4}); }));
  r.push_back(block("conv2d.pointwise", kStrictTolerance, Shape{2, 4, 3, 5},
                    [](auto& i) { i.conv("c", 6, 4, 1, 1); },
                    [](const Binder<D>& b, Var<D> x) { return b.conv("c", x); }));
  r.push_back(block("conv_transpose2d", kStrictTolerance, Shape{2, 4, 3, 3},
                    [](auto& i) { i.deconv("d", 4, 3, 4); },
                    [](const Binder<D>& b, Var<D> x) { return b.deconv("d", x, 2, 1); }));
  r.push_back(block("layer_norm", kStrictTolerance, Shape{2, 5, 3, 3},
                    [](auto& i) { i.norm("n", 5); },
                    [](const Binder<D>& b, Var<D> x) { return b.layer_norm("n", x); }));
  r.push_back(block("batch_norm", kStrictTolerance, Shape{3, 4, 3, 3},
                    [](auto& i) { i.norm("n", 4); },
                    [](const Binder<D>& b, Var<D> x) { return b.batch_norm("n", x); }));
  r.push_back(unary("avg_pool2d", [](auto a) { return nn::avg_pool2d(nn::slice(a, 3, 0, 4), 2); }));
  r.push_back(unary("max_pool2d", [](auto a) { return nn::max_pool2d(nn::slice(a, 3, 0, 4), 2); }));
  r.push_back({"pixel_shuffle", kStrictTolerance, [](const GradCheckOptions& opt) {
                 std::mt19937_64 rng(opt.seed);
                 auto ps = std::make_shared<ParamSet<D>>();
                 ps->add("x", uniform(Shape{2, 8, 3, 3}, rng));
                 return check("pixel_shuffle", ps,
                              [](Tape<D>& t, ParamSet<D>& p) { return nn::square(nn::pixel_shuffle(p.bind(t, "x"), 2)); },
                              opt);
               }});
  r.push_back(unary("pixel_unshuffle", [](auto a) { return nn::square(nn::pixel_unshuffle(nn::slice(a, 3, 0, 4), 2)); }));
  r.push_back(unary("resize_bilinear", [](auto a) { return nn::resize_bilinear(a, 7, 3); }));
  r.push_back(binary("modulate_weights", Shape{4, 3, 3, 3}, Shape{1, 3, 1, 1},
                     [](auto w, auto st) { return nn::modulate_weights(w, st, D(1e-8), true); }, 0.5, 1.5));

  // ---- attention
  r.push_back({"condensed_attention", kLooseTolerance, [](const GradCheckOptions& opt) {
                 std::mt19937_64 rng(opt.seed);
                 auto ps = std::make_shared<ParamSet<D>>();
                 for (const char* n : {"q", "k", "v"}) ps->add(n, uniform(Shape{2, 4, 4, 4}, rng));
                 ps->add("c", uniform(Shape{2, 4, 2, 2}, rng));
                 return check("condensed_attention", ps,
                              [](Tape<D>& t, ParamSet<D>& p) {
                                return nn::condensed_attention(p.bind(t, "q"), p.bind(t, "k"), p.bind(t, "v"),
                                                               p.bind(t, "c"), 2);
                              },
                              opt);
               }});
  r.push_back({"dense_attention", kLooseTolerance, [](const GradCheckOptions& opt) {
                 std::mt19937_64 rng(opt.seed);
                 auto ps = std::make_shared<ParamSet<D>>();
                 for (const char* n : {"q", "k", "v"}) ps->add(n, uniform(Shape{2, 4, 3, 3}, rng));
                 return check("dense_attention", ps,
                              [](Tape<D>& t, ParamSet<D>& p) {
                                return nn::dense_attention(p.bind(t, "q"), p.bind(t, "k"), p.bind(t, "v"), 2);
                              },
                              opt);
               }});

  // ---- blocks
  const nn::CqaConfig cqa{2, 2, nn::CompressTarget::query, nn::PoolKind::avg_linear};
  for (auto pool : {nn::PoolKind::avg_linear, nn::PoolKind::max_linear, nn::PoolKind::strided_conv,
                    nn::PoolKind::strided_depthwise, nn::PoolKind::patch_merge}) {
    nn::CqaConfig c = cqa;
    c.pool = pool;
    r.push_back(block("cqa." + nn::to_string(pool), kLooseTolerance, Shape{2, 4, 4, 4},
                      [c](auto& i) { nn::add_cqa(i, "cqa", 4, c); },
                      [c](const Binder<D>& b, Var<D> x) { return nn::cqa_block(b, "cqa", x, c); }));
  }
  for (auto target : {nn::CompressTarget::key, nn::CompressTarget::value}) {
    nn::CqaConfig c = cqa;
    c.target = target;
    r.push_back(block("cqa.target_" + nn::to_string(target), kLooseTolerance, Shape{2, 4, 4, 4},
                      [c](auto& i) { nn::add_cqa(i, "cqa", 4, c); },
                      [c](const Binder<D>& b, Var<D> x) { return nn::cqa_block(b, "cqa", x, c); }));
  }
  r.push_back(block("cqa.style_modulation", kLooseTolerance, Shape{2, 4, 4, 4},
                    [cqa](auto& i) {
                      nn::add_cqa(i, "cqa", 4, cqa);
                      i.add("style", i.kaiming(Shape{2, 4, 1, 1}, 1));
                    },
                    [cqa](const Binder<D>& b, Var<D> x) {
                      return nn::cqa_block(b, "cqa", x, cqa, nn::add_scalar(b("style"), D(1.5)));
                    }));
  r.push_back(block("spfn", kStrictTolerance, Shape{2, 4, 5, 5},
                    [](auto& i) { nn::add_spfn(i, "spfn", 4); },
                    [](const Binder<D>& b, Var<D> x) { return nn::spfn_block(b, "spfn", x); }));
  r.push_back(block("cdown", kStrictTolerance, Shape{2, 4, 4, 4},
                    [](auto& i) { nn::add_cdown(i, "down", 4, 8, true); },
                    [](const Binder<D>& b, Var<D> x) { return nn::cdown_block(b, "down", x); }));
  r.push_back(block("cup", kStrictTolerance, Shape{2, 8, 3, 3},
                    [](auto& i) { nn::add_cup(i, "up", 8, 4, true); },
                    [](const Binder<D>& b, Var<D> x) { return nn::cup_block(b, "up", x); }));
  r.push_back(block("llayer", kStrictTolerance, Shape{2, 4, 3, 3},
                    [](auto& i) {
                      nn::add_llayer(i, "link", 4, 4);
                      i.add("dec", i.kaiming(Shape{2, 4, 3, 3}, 1));
                    },
                    [](const Binder<D>& b, Var<D> x) { return nn::llayer_fuse(b, "link", x, b("dec")); }));
  r.push_back(block("vit_bottleneck", kLooseTolerance, Shape{2, 8, 2, 2},
                    [](auto& i) {
                      nn::VitConfig v;
                      v.grid_h = v.grid_w = 2;
                      v.heads = 2;
                      nn::add_vit(i, "vit", 8, v);
                      i.add("token", i.kaiming(Shape{1, 8, 1, 1}, 1));
                    },
                    [](const Binder<D>& b, Var<D> x) {
                      nn::VitConfig v;
                      v.grid_h = v.grid_w = 2;
                      v.heads = 2;
                      const auto out = nn::vit_bottleneck(b, "vit", x, b("token"), v);
                      return nn::add(nn::mean(out.image), nn::mean(nn::square(out.style)));
                    }));

  // ---- networks
  r.push_back({"generator", kLooseTolerance, [](const GradCheckOptions& opt) {
                 GeneratorConfig g;
                 g.base_channels = 4;
                 g.image_size = 16;
                 g.vit.heads = 2;
                 g.seed = opt.seed;
                 std::mt19937_64 rng(opt.seed);
                 auto ps = std::make_shared<ParamSet<D>>();
                 add_generator_params(g, *ps);
                 jitter(*ps, rng, 0.05);
                 ps->add("x", uniform(Shape{1, 3, 16, 16}, rng, 0.1, 0.9));
                 GradCheckOptions o = opt;
                 o.coords_per_tensor = 3;
                 o = network_options(o);
                 return check("generator", ps,
                              [g](Tape<D>& t, ParamSet<D>& p) {
                                return generator_forward(g, p, t, p.bind(t, "x"));
                              },
                              o);
               }});
  for (int row : {3, 4}) {
    const std::string name = "discriminator.D" + std::to_string(row);
    r.push_back({name, kLooseTolerance, [row, name](const GradCheckOptions& opt) {
                   DiscriminatorConfig d = DiscriminatorConfig::ablation(row);
                   d.base_channels = 4;
                   d.seed = opt.seed;
                   std::mt19937_64 rng(opt.seed);
                   auto ps = std::make_shared<ParamSet<D>>();
                   add_discriminator_params(d, *ps);
                   jitter(*ps, rng, 0.05);
                   ps->add("x", uniform(Shape{2, 3, 16, 16}, rng, 0.0, 1.0));
                   auto cached = std::make_shared<std::vector<Tensor<D>>>();
                   for (int k = 0; k < 2; ++k) cached->push_back(uniform(Shape{1, 32, 2, 2}, rng, 0.0, 1.0));
                   GradCheckOptions o = opt;
                   o.coords_per_tensor = 6;
                   o = network_options(o);
                   return check(name, ps,
                                [d, cached](Tape<D>& t, ParamSet<D>& p) {
                                  return discriminator_forward<D>(d, p, t, p.bind(t, "x"), *cached).logits;
                                },
                                o);
                 }});
  }
  r.push_back({"discriminator.patchgan", kStrictTolerance, [](const GradCheckOptions& opt) {
                 DiscriminatorConfig d = DiscriminatorConfig::patchgan();
                 d.base_channels = 4;
                 d.seed = opt.seed;
                 std::mt19937_64 rng(opt.seed);
                 auto ps = std::make_shared<ParamSet<D>>();
                 add_discriminator_params(d, *ps);
                 jitter(*ps, rng, 0.05);
                 ps->add("x", uniform(Shape{1, 3, 16, 16}, rng, 0.0, 1.0));
                 GradCheckOptions o = opt;
                 o.coords_per_tensor = 6;
                 o = network_options(o);
                 return check("discriminator.patchgan", ps,
                              [d](Tape<D>& t, ParamSet<D>& p) {
                                return discriminator_forward<D>(d, p, t, p.bind(t, "x")).logits;
                              },
                              o);
               }});

  // ---- losses
  auto image_pair = [](const std::string& name, double tol, std::function<Var<D>(Var<D>, Var<D>, ParamSet<D>&)> f) {
    return GradCheckCase{name, tol, [=](const GradCheckOptions& opt) {
                           std::mt19937_64 rng(opt.seed);
                           auto ps = std::make_shared<ParamSet<D>>();
                           ps->add("x", uniform(Shape{1, 3, 16, 16}, rng, 0.05, 0.95));
                           ps->add("y", uniform(Shape{1, 3, 16, 16}, rng, 0.05, 0.95));
                           auto ex = std::make_shared<ParamSet<D>>();
                           add_extractor_params(*ex, 0x5EED);
                           return check(name, ps,
                                        [f, ex](Tape<D>& t, ParamSet<D>& p) {
                                          return f(p.bind(t, "x"), p.bind(t, "y"), *ex);
                                        },
                                        opt);
                         }};
  };
  r.push_back(image_pair("loss.ssim", kLooseTolerance, [](auto x, auto y, auto&) { return ssim_index(x, y); }));
  r.push_back(image_pair("loss.l1", kStrictTolerance,
                         [](auto x, auto y, auto&) { return nn::mean(nn::abs(nn::sub(x, y))); }));
  r.push_back(image_pair("loss.perceptual", kStrictTolerance, [](auto x, auto y, auto& ex) {
    return pixelwise_terms(x, y, ex, PixelwiseWeights{0, 0, 1}).perceptual;
  }));
  r.push_back(image_pair("loss.pixelwise", kLooseTolerance,
                         [](auto x, auto y, auto& ex) { return pixelwise_loss(x, y, ex); }));
  r.push_back(unary("loss.gan_real", [](auto z) { return gan_loss(z, 1); }, -3, 3));
  r.push_back(unary("loss.gan_fake", [](auto z) { return gan_loss(z, 0); }, -3, 3));
  return r;
}

std::vector<GradCheckOutcome> run_gradcheck_suite(const std::string& filter, std::uint64_t seed) {
  GradCheckOptions opt;
  opt.seed = seed;
  std::vector<GradCheckOutcome> out;
  for (const auto& c : gradcheck_registry()) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    GradCheckOutcome o{c.name, c.tolerance, c.run(opt), false};
    o.passed = o.report.checked > 0 && o.report.max_rel_err < c.tolerance;
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace rawformer
