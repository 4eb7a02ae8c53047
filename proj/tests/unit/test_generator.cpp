#include <doctest.h>

#include <random>

#include "rawformer/errors.hpp"
#include "rawformer/generator.hpp"
#include "rawformer/gradcheck_suite.hpp"

using namespace rawformer;

namespace {

// Closed-form element counts of each block, written from the layer recipe.
std::size_t conv(std::size_t cout, std::size_t cin_g, std::size_t k) { return cout * cin_g * k * k + cout; }
std::size_t norm(std::size_t c) { return 2 * c; }

std::size_t cqa(std::size_t c, const nn::CqaConfig& q) {
  const std::size_t r2 = static_cast<std::size_t>(q.r) * q.r;
  std::size_t condense = 0;
  switch (q.pool) {
    case nn::PoolKind::avg_linear:
    case nn::PoolKind::max_linear: condense = conv(c, c, 1); break;
    case nn::PoolKind::strided_conv: condense = c * c * r2 + c; break;
    case nn::PoolKind::strided_depthwise: condense = c * r2 + c; break;
    case nn::PoolKind::patch_merge: condense = c * c * r2 + c; break;
  }
  return 4 * conv(c, c, 1) + condense;
}

std::size_t spfn(std::size_t c) {
  const std::size_t h = 2 * c;
  return norm(c) + 2 * conv(h, c, 1) + conv(h, 1, 3) + conv(h, 1, 5) + conv(c, 2 * h, 1);
}

std::size_t cdown(std::size_t cin, std::size_t cout, bool comp) {
  return conv(cout, cin, 3) + (comp ? conv(cout, 4 * cin, 1) + conv(cout, 2 * cout, 1) : 0);
}

std::size_t cup(std::size_t cin, std::size_t cout, bool comp) {
  return cin * cout * 16 + cout + (comp ? conv(cout, cin / 4, 1) + conv(cout, 2 * cout, 1) : 0);
}

std::size_t llayer(std::size_t c) { return conv(c, c, 1) + 1 + conv(c, 2 * c, 1); }

std::size_t vit(std::size_t c, std::size_t grid, const nn::VitConfig& v) {
  const std::size_t m = static_cast<std::size_t>(v.mlp_ratio) * c;
  return c * grid * grid +
         v.depth * (norm(c) + conv(3 * c, c, 1) + conv(c, c, 1) + norm(c) + conv(m, c, 1) + conv(c, m, 1));
}

std::size_t closed_form_count(const GeneratorConfig& g) {
  const bool rf = g.arch == GeneratorArch::rawformer;
  const std::size_t top = g.channels(g.levels);
  std::size_t n = conv(g.channels(0), 3, 3);
  for (int i = 0; i < g.levels; ++i) {
    const std::size_t c = g.channels(i);
    n += norm(c) + conv(c, 1, 3);
    if (rf && g.use_cqa) n += cqa(c, g.cqa);
    if (rf && g.use_spfn) n += spfn(c);
    n += cdown(c, 2 * c, rf && g.use_composite);
  }
  n += vit(top, g.image_size >> g.levels, g.vit);
  if (rf && g.use_style) n += top;
  for (int i = 0; i < g.levels; ++i) {
    const std::size_t c = g.channels(i);
    n += cup(2 * c, c, rf && g.use_composite);
    if (rf) n += llayer(c);
    n += norm(c) + conv(c, 1, 3);
    if (rf && g.use_cqa) n += cqa(c, g.cqa);
    if (rf && g.use_style) n += c * top + c;
    if (rf && g.use_spfn) n += spfn(c);
  }
  return n + conv(3, g.channels(0), 3);
}

ImageTensor random_batch(int n, int size, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  ImageTensor x(nn::Shape{n, 3, size, size});
  for (auto& v : x.values()) v = d(rng);
  return x;
}

}  // namespace

TEST_SUITE("generator") {
  TEST_CASE("same seed gives bit-identical weights; another seed does not") {
    GeneratorConfig cfg;
    cfg.seed = 3;
    const GeneratorWeights a = build_generator(cfg), b = build_generator(cfg);
    REQUIRE(a.params.names() == b.params.names());
    for (const auto& name : a.params.names()) CHECK(a.params.at(name).value.storage() == b.params.at(name).value.storage());
    cfg.seed = 4;
    const GeneratorWeights c = build_generator(cfg);
    CHECK(c.params.at("stem.weight").value.storage() != a.params.at("stem.weight").value.storage());
  }

  TEST_CASE("parameter count equals the closed-form block sum for every ablation row and pool") {
    for (int row = 1; row <= 5; ++row) {
      CAPTURE(row);
      const GeneratorConfig cfg = GeneratorConfig::ablation(row);
      CHECK(build_generator(cfg).param_count() == closed_form_count(cfg));
    }
    for (auto pool : {nn::PoolKind::max_linear, nn::PoolKind::strided_conv, nn::PoolKind::strided_depthwise,
                      nn::PoolKind::patch_merge}) {
      GeneratorConfig cfg;
      cfg.cqa.pool = pool;
      CHECK(build_generator(cfg).param_count() == closed_form_count(cfg));
    }
  }

  TEST_CASE("param_count is the sum of tensor element counts") {
    const GeneratorWeights g = build_generator(GeneratorConfig{});
    std::size_t sum = 0;
    for (const auto& [_, p] : g.params) sum += p.value.size();
    CHECK(g.param_count() == sum);
  }

  TEST_CASE("toy default parameter count is pinned") {
    // levels 3, base 16, 32 px training crops, full model
    CHECK(build_generator(GeneratorConfig{}).param_count() == 829366);
  }

  TEST_CASE("parameter count grows along the ablation rows") {
    std::size_t prev = 0;
    for (int row = 1; row <= 5; ++row) {
      const std::size_t n = build_generator(GeneratorConfig::ablation(row)).param_count();
      CHECK(n > prev);
      prev = n;
    }
  }

  TEST_CASE("baseline carries no attention, feed-forward or style tensors") {
    const GeneratorWeights g = build_generator(GeneratorConfig::ablation(1));
    for (const auto& name : g.params.names()) {
      CAPTURE(name);
      CHECK(name.find(".cqa.") == std::string::npos);
      CHECK(name.find(".spfn.") == std::string::npos);
      CHECK(name.find("style") == std::string::npos);
      CHECK(name.find(".link.") == std::string::npos);
    }
  }

  TEST_CASE("inconsistent configs are rejected") {
    GeneratorConfig cfg = GeneratorConfig::ablation(1);
    cfg.use_spfn = true;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = GeneratorConfig{};
    cfg.use_cqa = false;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);  // style needs the attention query
    cfg = GeneratorConfig{};
    cfg.image_size = 36;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(GeneratorConfig::ablation(6), ConfigError);
  }

  TEST_CASE("forward keeps the shape and stays inside (0,1)") {
    GeneratorConfig cfg;
    cfg.image_size = 64;
    GeneratorWeights g = build_generator(cfg);
    // a random head makes the output depend on every block
    std::mt19937_64 rng(1);
    std::normal_distribution<float> d(0.0f, 2.0f);
    for (auto& v : g.params.at("head.weight").value.values()) v = d(rng);
    const ImageTensor y = generator_apply(g, random_batch(1, 64, 2, -0.5f, 1.5f));
    CHECK(y.shape() == nn::Shape{1, 3, 64, 64});
    for (float v : y.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }

  TEST_CASE("zero head reproduces the input away from the clamp") {
    GeneratorWeights g = build_generator(GeneratorConfig{});
    const ImageTensor x = random_batch(2, 32, 3, 0.06f, 0.94f);
    const ImageTensor y = generator_apply(g, x);
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == doctest::Approx(x[i]).epsilon(1e-5));
  }

  TEST_CASE("other resolutions run through the resized positional grid") {
    GeneratorWeights g = build_generator(GeneratorConfig{});
    CHECK(generator_apply(g, random_batch(1, 64, 4)).shape() == nn::Shape{1, 3, 64, 64});
    CHECK_THROWS_AS(generator_apply(g, random_batch(1, 36, 4)), DimensionError);
  }

  TEST_CASE("float and double forwards agree") {
    GeneratorConfig cfg;
    GeneratorWeights g = build_generator(cfg);
    std::mt19937_64 rng(5);
    std::normal_distribution<float> d(0.0f, 0.5f);
    for (auto& v : g.params.at("head.weight").value.values()) v = d(rng);
    const ImageTensor x = random_batch(1, 32, 6);
    const ImageTensor yf = generator_apply(g, x);
    nn::ParamSet<double> pd = g.params.cast<double>();
    nn::Tape<double> t;
    const auto yd = generator_forward(cfg, pd, t, t.constant(x.cast<double>()), false).value();
    double worst = 0;
    for (std::size_t i = 0; i < yf.size(); ++i) worst = std::max(worst, std::abs(yf[i] - yd[i]));
    CHECK(worst < 1e-4);
  }

  TEST_CASE("full-graph gradient check on a 16 px input in float64") {
    const auto outcomes = run_gradcheck_suite("generator");
    REQUIRE(outcomes.size() == 1);
    CHECK(outcomes[0].report.checked > 0);
    CHECK(outcomes[0].report.max_rel_err < 1e-3);
  }

  TEST_CASE("frozen parameters receive no gradient") {
    GeneratorConfig cfg;
    nn::ParamSet<double> ps;
    add_generator_params(cfg, ps);
    ps.frozen = true;
    nn::Tape<double> t;
    const auto x = t.variable(random_batch(1, 32, 7).cast<double>());
    const auto y = generator_forward(cfg, ps, t, x);
    t.backward(nn::sum(y));
    for (const auto& [name, p] : ps) CHECK(p.grad.empty());
    CHECK(t.has_grad(x));
  }
}
