#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "rawformer/errors.hpp"
#include "rawformer/gradcheck_suite.hpp"
#include "rawformer/nn/attention.hpp"
#include "rawformer/nn/blocks.hpp"
#include "rawformer/nn/gradcheck.hpp"

using namespace rawformer;
using namespace rawformer::nn;

namespace {

template <typename U>
Tensor<U> rand_t(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<U> t(s);
  for (auto& v : t.values()) v = static_cast<U>(d(rng));
  return t;
}

// Perturbs every parameter so zero-initialised biases and gates take part.
template <typename U>
void jitter(ParamSet<U>& p, std::uint64_t seed, double amp = 0.1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-amp, amp);
  for (auto& [_, prm] : p)
    for (auto& v : prm.value.values()) v += static_cast<U>(d(rng));
}

GradCheckReport check_block(const std::string& name, ParamSet<double>& ps, Shape xs,
                            const std::function<Var<double>(const Binder<double>&, Var<double>)>& fwd,
                            double step = 1e-5) {
  ps.add("x", rand_t<double>(xs, 99));
  GradCheckOptions opt;
  opt.step = step;
  return grad_check(
      name,
      [&](Tape<double>& t) {
        Binder<double> b(t, ps);
        return fwd(b, b("x"));
      },
      targets_of(ps), opt);
}

}  // namespace

TEST_SUITE("nnkernels") {
  TEST_CASE("1x1 identity convolution returns its input") {
    Tape<float> t;
    const Tensor<float> x = rand_t<float>(Shape{2, 3, 4, 5}, 1);
    Tensor<float> w(Shape{3, 3, 1, 1});
    for (int i = 0; i < 3; ++i) w.at(i, i, 0, 0) = 1.0f;
    const Var<float> y = conv2d(t.constant(x), t.constant(w), Var<float>());
    CHECK(y.value().storage() == x.storage());
  }

  TEST_CASE("conv2d agrees with the loop oracle: strided, grouped, padded") {
    struct Case {
      int cin, cout, k, stride, pad, groups;
    };
    for (const Case c : {Case{3, 4, 3, 1, 1, 1}, Case{4, 6, 3, 2, 1, 2}, Case{4, 4, 5, 1, 2, 4}, Case{2, 3, 2, 2, 0, 1}}) {
      Tape<double> t;
      const auto x = rand_t<double>(Shape{2, c.cin, 7, 6}, 2);
      const auto w = rand_t<double>(Shape{c.cout, c.cin / c.groups, c.k, c.k}, 3);
      const auto bias = rand_t<double>(Shape{1, c.cout, 1, 1}, 4);
      const Var<double> y = conv2d(t.constant(x), t.constant(w), t.constant(bias), {c.stride, c.pad, c.groups});
      const auto ref = oracle::conv2d(x, w, &bias, c.stride, c.pad, c.groups);
      REQUIRE(y.value().shape() == ref.shape());
      CHECK(oracle::max_abs_diff(y.value(), ref) < 1e-12);
    }
  }

  TEST_CASE("layer norm has zero mean and unit variance over channels before the affine") {
    Tape<double> t;
    const auto x = rand_t<double>(Shape{2, 8, 3, 4}, 5, -3, 5);
    const Var<double> y =
        layer_norm(t.constant(x), t.constant(Tensor<double>(Shape{1, 8, 1, 1}, 1.0)),
                   t.constant(Tensor<double>(Shape{1, 8, 1, 1})));
    for (int n = 0; n < 2; ++n)
      for (int h = 0; h < 3; ++h)
        for (int w = 0; w < 4; ++w) {
          double mu = 0, var = 0;
          for (int c = 0; c < 8; ++c) mu += y.value().at(n, c, h, w);
          mu /= 8;
          for (int c = 0; c < 8; ++c) var += std::pow(y.value().at(n, c, h, w) - mu, 2);
          var /= 8;
          CHECK(std::abs(mu) < 1e-6);
          CHECK(std::abs(var - 1) < 1e-5);
        }
  }

  TEST_CASE("leaky relu at -1 with slope 0.2") {
    Tape<double> t;
    const Var<double> y = leaky_relu(t.constant(Tensor<double>(Shape{1, 1, 1, 2}, std::vector<double>{-1.0, 2.0})), 0.2);
    CHECK(y.value()[0] == doctest::Approx(-0.2));
    CHECK(y.value()[1] == 2.0);
  }

  TEST_CASE("pooling agrees with the loop oracle") {
    Tape<double> t;
    const auto x = rand_t<double>(Shape{2, 3, 8, 6}, 6);
    CHECK(oracle::max_abs_diff(avg_pool2d(t.constant(x), 2).value(), oracle::avg_pool(x, 2)) < 1e-14);
    CHECK(oracle::max_abs_diff(max_pool2d(t.constant(x), 2).value(), oracle::max_pool(x, 2)) == 0.0);
  }

  TEST_CASE("pixel shuffle shape, placement and inverse") {
    Tape<float> t;
    const auto x = rand_t<float>(Shape{1, 4, 2, 2}, 7);
    const Var<float> y = pixel_shuffle(t.constant(x), 2);
    CHECK(y.value().shape() == Shape{1, 1, 4, 4});

    const auto big = rand_t<float>(Shape{2, 8, 3, 5}, 8);
    const Var<float> s = pixel_shuffle(t.constant(big), 2);
    const int r = 2;
    bool placed = true;
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 2; ++c)
        for (int h = 0; h < 3; ++h)
          for (int w = 0; w < 5; ++w)
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < r; ++j)
                placed = placed && s.value().at(n, c, h * r + i, w * r + j) == big.at(n, c * r * r + i * r + j, h, w);
    CHECK(placed);
    CHECK(pixel_unshuffle(s, 2).value().storage() == big.storage());

    const auto img = rand_t<float>(Shape{1, 3, 6, 4}, 9);
    CHECK(pixel_shuffle(pixel_unshuffle(t.constant(img), 2), 2).value().storage() == img.storage());
    CHECK(oracle::max_abs_diff(oracle::to_double(pixel_unshuffle(t.constant(img), 2).value()),
                               oracle::unshuffle(oracle::to_double(img), 2)) == 0.0);
  }

  TEST_CASE("condensed attention rows are distributions") {
    Tape<float> t;
    int maps = 0;
    double worst = 0;
    t.attention_observer = [&](std::string_view kind, int rows, int cols, const float* a) {
      if (kind != "cqa_h" && kind != "cqa_u") return;
      ++maps;
      for (int i = 0; i < rows; ++i) {
        double s = 0;
        for (int j = 0; j < cols; ++j) s += a[i * cols + j];
        worst = std::max(worst, std::abs(s - 1.0));
      }
    };
    ParamSet<float> ps;
    Initializer<float> init(ps, 3);
    CqaConfig cfg;
    add_cqa(init, "cqa", 16, cfg);
    Binder<float> b(t, ps);
    const Var<float> y = cqa_block(b, "cqa", t.constant(rand_t<float>(Shape{1, 16, 8, 8}, 10)), cfg);
    CHECK(y.value().shape() == Shape{1, 16, 8, 8});
    CHECK(maps == 2 * cfg.heads);
    CHECK(worst < 1e-5);
  }

  TEST_CASE("float CQA block matches a float64 loop evaluation for every pool and target") {
    for (PoolKind pool : {PoolKind::avg_linear, PoolKind::max_linear, PoolKind::strided_conv,
                          PoolKind::strided_depthwise, PoolKind::patch_merge})
      for (CompressTarget target : {CompressTarget::query, CompressTarget::key, CompressTarget::value}) {
        CAPTURE(to_string(pool));
        CAPTURE(to_string(target));
        CqaConfig cfg{2, 2, target, pool};
        ParamSet<float> ps;
        Initializer<float> init(ps, 17);
        add_cqa(init, "cqa", 16, cfg);
        jitter(ps, 4, 0.2);
        const auto x = rand_t<float>(Shape{1, 16, 8, 8}, 11);
        Tape<float> t;
        const Var<float> y = cqa_block(Binder<float>(t, ps), "cqa", t.constant(x), cfg);
        const auto ref = oracle::cqa_block(ps.cast<double>(), "cqa", oracle::to_double(x), cfg);
        CHECK(oracle::max_abs_diff(oracle::to_double(y.value()), ref) < 1e-4);
      }
  }

  TEST_CASE("dense attention matches the loop oracle") {
    Tape<double> t;
    const auto q = rand_t<double>(Shape{1, 4, 3, 3}, 12), k = rand_t<double>(Shape{1, 4, 3, 3}, 13),
               v = rand_t<double>(Shape{1, 4, 3, 3}, 14);
    const Var<double> y = dense_attention(t.constant(q), t.constant(k), t.constant(v), 2);
    CHECK(oracle::max_abs_diff(y.value(), oracle::attend(q, k, v, 2)) < 1e-12);
  }

  TEST_CASE("attention FLOP counts: condensed value products are r^2 cheaper than dense") {
    for (int side : {16, 32}) {
      for (int r : {2, 4}) {
        Tape<float> t;
        FlopLedger ledger;
        t.flop_ledger = &ledger;
        const Shape s{1, 8, side, side};
        const Var<float> q = t.constant(rand_t<float>(s, 1)), k = t.constant(rand_t<float>(s, 2)),
                         v = t.constant(rand_t<float>(s, 3));
        const Var<float> c = t.constant(rand_t<float>(Shape{1, 8, side / r, side / r}, 4));
        condensed_attention(q, k, v, c, 2);
        dense_attention(q, k, v, 2);
        const double n = static_cast<double>(side) * side, m = n / (r * r), d = 4;
        CHECK(ledger.total("attention.cqa.mix_h") == static_cast<std::uint64_t>(2 * 2 * n * m * d));
        CHECK(ledger.total("attention.dense") == static_cast<std::uint64_t>(2 * 2 * 2 * n * n * d));
        CHECK(static_cast<double>(ledger.total("attention.dense")) / ledger.total("attention.cqa.mix") ==
              doctest::Approx(r * r));
      }
    }
  }

  TEST_CASE("SPFN: zero fuse weights give the residual; float64 matches the oracle to 1e-10") {
    ParamSet<double> ps;
    Initializer<double> init(ps, 5);
    add_spfn(init, "spfn", 8);
    jitter(ps, 6);
    const auto x = rand_t<double>(Shape{1, 8, 6, 6}, 15);
    Tape<double> t;
    const Var<double> y = spfn_block(Binder<double>(t, ps), "spfn", t.constant(x));
    CHECK(oracle::max_abs_diff(y.value(), oracle::spfn_block(ps, "spfn", x)) < 1e-10);

    ps.at("spfn.fuse.weight").value.fill(0.0);
    ps.at("spfn.fuse.bias").value.fill(0.0);
    Tape<double> t2;
    CHECK(spfn_block(Binder<double>(t2, ps), "spfn", t2.constant(x)).value().storage() == x.storage());
  }

  TEST_CASE("SPFN keeps the input shape") {
    ParamSet<float> ps;
    Initializer<float> init(ps, 5);
    add_spfn(init, "spfn", 32);
    Tape<float> t;
    CHECK(spfn_block(Binder<float>(t, ps), "spfn", t.constant(rand_t<float>(Shape{2, 32, 16, 16}, 1))).value().shape() ==
          Shape{2, 32, 16, 16});
  }

  TEST_CASE("composite down and up samplers: shapes and shape inverse") {
    ParamSet<float> ps;
    Initializer<float> init(ps, 7);
    add_cdown(init, "down", 16, 32, true);
    add_cup(init, "up", 32, 16, true);
    Tape<float> t;
    Binder<float> b(t, ps);
    const Var<float> x = t.constant(rand_t<float>(Shape{1, 16, 32, 32}, 2));
    const Var<float> d = cdown_block(b, "down", x);
    CHECK(d.value().shape() == Shape{1, 32, 16, 16});
    const Var<float> u = cup_block(b, "up", d);
    CHECK(u.value().shape() == Shape{1, 16, 32, 32});
    for (Shape s : {Shape{2, 16, 8, 8}, Shape{1, 16, 4, 12}})
      CHECK(cup_block(b, "up", cdown_block(b, "down", t.constant(rand_t<float>(s, 3)))).value().shape() == s);
    CHECK_THROWS_AS(cdown_block(b, "down", t.constant(rand_t<float>(Shape{1, 16, 5, 4}, 3))), DimensionError);
  }

  TEST_CASE("the unshuffle branch of a constant map is constant") {
    Tape<float> t;
    const Var<float> packed = pixel_unshuffle(t.constant(Tensor<float>(Shape{1, 16, 32, 32}, 0.37f)), 2);
    for (float v : packed.value().values()) CHECK(v == 0.37f);
  }

  TEST_CASE("resampler gradients match central differences") {
    {
      ParamSet<double> ps;
      Initializer<double> init(ps, 8);
      add_cdown(init, "down", 4, 8, true);
      jitter(ps, 1);
      const auto r = check_block("cdown", ps, Shape{1, 4, 6, 6},
                                 [](const Binder<double>& b, Var<double> x) { return cdown_block(b, "down", x); });
      CHECK(r.checked > 0);
      CHECK(r.max_rel_err < 1e-4);
    }
    {
      ParamSet<double> ps;
      Initializer<double> init(ps, 9);
      add_cup(init, "up", 8, 4, true);
      jitter(ps, 2);
      const auto r = check_block("cup", ps, Shape{1, 8, 3, 3},
                                 [](const Binder<double>& b, Var<double> x) { return cup_block(b, "up", x); });
      CHECK(r.checked > 0);
      CHECK(r.max_rel_err < 1e-4);
    }
  }

  TEST_CASE("style modulation: unit style is a no-op, demodulated rows have unit norm, scale cancels") {
    Tape<double> t;
    const auto w = rand_t<double>(Shape{5, 4, 3, 3}, 20);
    const Var<double> wv = t.constant(w);
    const Var<double> same = modulate_weights(wv, t.constant(Tensor<double>(Shape{1, 4, 1, 1}, 1.0)), 1e-8, false);
    CHECK(same.value().storage() == w.storage());

    const auto s = rand_t<double>(Shape{1, 4, 1, 1}, 21, 0.5, 2.0);
    const Var<double> dm = modulate_weights(wv, t.constant(s), 1e-8, true);
    for (int o = 0; o < 5; ++o) {
      double ss = 0;
      for (int i = 0; i < 4 * 9; ++i) ss += std::pow(dm.value()[o * 36 + i], 2);
      CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-6);
    }
    Tensor<double> s3 = s;
    for (auto& v : s3.values()) v *= 3.7;
    const Var<double> dm3 = modulate_weights(wv, t.constant(s3), 1e-8, true);
    CHECK(oracle::max_abs_diff(dm.value(), dm3.value()) < 1e-6);
  }

  TEST_CASE("vit bottleneck: 8x8 map plus style token is 65 tokens, image shape kept") {
    ParamSet<float> ps;
    Initializer<float> init(ps, 4);
    VitConfig cfg;
    cfg.grid_h = cfg.grid_w = 8;
    add_vit(init, "vit", 16, cfg);
    Tape<float> t;
    std::vector<std::pair<int, int>> maps;
    t.attention_observer = [&](std::string_view kind, int rows, int cols, const float*) {
      if (kind == "dense") maps.emplace_back(rows, cols);
    };
    const Var<float> x = t.constant(rand_t<float>(Shape{1, 16, 8, 8}, 5));
    const Var<float> style = t.constant(rand_t<float>(Shape{1, 16, 1, 1}, 6));
    const VitOutput<float> out = vit_bottleneck(Binder<float>(t, ps), "vit", x, style, cfg);
    REQUIRE(!maps.empty());
    for (auto [r, c] : maps) {
      CHECK(r == 65);
      CHECK(c == 65);
    }
    CHECK(out.image.value().shape() == Shape{1, 16, 8, 8});
    CHECK(out.style.value().shape() == Shape{1, 16, 1, 1});
  }

  TEST_CASE("vit bottleneck gradient through two layers") {
    ParamSet<double> ps;
    Initializer<double> init(ps, 4);
    VitConfig cfg;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.grid_h = cfg.grid_w = 2;
    add_vit(init, "vit", 8, cfg);
    ps.add("style", rand_t<double>(Shape{1, 8, 1, 1}, 7));
    jitter(ps, 3, 0.2);
    const auto r = check_block("vit", ps, Shape{1, 8, 2, 2}, [&](const Binder<double>& b, Var<double> x) {
      const auto o = vit_bottleneck(b, "vit", x, b("style"), cfg);
      return concat<double>({reshape(o.image, Shape{1, 8, 1, 4}), o.style}, 3);
    });
    CHECK(r.checked > 0);
    CHECK(r.max_rel_err < 1e-3);
  }

  TEST_CASE("linking layer: zero gate passes the decoder through") {
    ParamSet<float> ps;
    Initializer<float> init(ps, 2);
    add_llayer(init, "link", 64, 64);
    Tape<float> t;
    const auto dec = rand_t<float>(Shape{1, 64, 16, 16}, 8);
    const Var<float> y = llayer_fuse(Binder<float>(t, ps), "link", t.constant(rand_t<float>(Shape{1, 64, 16, 16}, 9)),
                                     t.constant(dec));
    CHECK(y.value().shape() == Shape{1, 64, 16, 16});
    CHECK(oracle::max_abs_diff(oracle::to_double(y.value()), oracle::to_double(dec)) == 0.0);
  }

  TEST_CASE("linking layer gradient with an open gate") {
    ParamSet<double> ps;
    Initializer<double> init(ps, 2);
    add_llayer(init, "link", 4, 6);
    jitter(ps, 5);
    ps.add("dec", rand_t<double>(Shape{1, 6, 3, 3}, 3));
    const auto r = check_block("llayer", ps, Shape{1, 4, 3, 3}, [](const Binder<double>& b, Var<double> x) {
      return llayer_fuse(b, "link", x, b("dec"));
    });
    CHECK(r.max_rel_err < 1e-4);
  }

  TEST_CASE("grad check harness: exact on a 1x1 convolution, tight on CQA and SPFN") {
    {
      ParamSet<double> ps;
      Initializer<double> init(ps, 1);
      init.conv("c", 3, 4, 1, 1);
      jitter(ps, 1);
      const auto r = check_block("conv1x1", ps, Shape{1, 4, 3, 3},
                                 [](const Binder<double>& b, Var<double> x) { return b.conv("c", x); });
      CHECK(r.max_rel_err < 1e-8);
    }
    {
      ParamSet<double> ps;
      Initializer<double> init(ps, 2);
      CqaConfig cfg;
      add_cqa(init, "cqa", 8, cfg);
      jitter(ps, 2, 0.3);
      const auto r = check_block("cqa", ps, Shape{1, 8, 4, 4},
                                 [&](const Binder<double>& b, Var<double> x) { return cqa_block(b, "cqa", x, cfg); });
      CHECK(r.max_rel_err < 1e-4);
    }
    {
      ParamSet<double> ps;
      Initializer<double> init(ps, 3);
      add_spfn(init, "spfn", 4);
      jitter(ps, 3);
      const auto r = check_block("spfn", ps, Shape{1, 4, 5, 5},
                                 [](const Binder<double>& b, Var<double> x) { return spfn_block(b, "spfn", x); });
      CHECK(r.max_rel_err < 1e-4);
    }
  }

  TEST_CASE("grad check harness catches a wrong gradient") {
    ParamSet<double> ps;
    ps.add("x", rand_t<double>(Shape{1, 1, 2, 2}, 4, 0.5, 1.5));
    // A deliberately broken op: forward x^2, backward claims 3x.
    const auto r = grad_check(
        "broken",
        [&](Tape<double>& t) {
          const Var<double> x = t.parameter(ps.at("x"));
          Tensor<double> y = x.value();
          for (auto& v : y.values()) v *= v;
          return t.record(std::move(y), {x}, [x](Tape<double>& tp, const Tensor<double>&, const Tensor<double>& g) {
            Tensor<double>& gx = tp.grad_accumulator(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 3.0 * tp.value(x)[i] * g[i];
          });
        },
        targets_of(ps));
    CHECK(r.max_rel_err > 0.1);
  }

  TEST_CASE("every registered kernel passes its gradient check") {
    // networks and losses are checked in their own suites
    int ran = 0;
    for (const auto& c : gradcheck_registry()) {
      if (c.name.starts_with("generator") || c.name.starts_with("discriminator") || c.name.starts_with("loss."))
        continue;
      GradCheckOptions opt;
      const GradCheckReport r = c.run(opt);
      CAPTURE(c.name);
      CAPTURE(r.max_rel_err);
      CHECK(r.checked > 0);
      CHECK(r.max_rel_err < c.tolerance);
      ++ran;
    }
    CHECK(ran > 40);
  }

  TEST_CASE("pool and target names round trip") {
    for (PoolKind p : {PoolKind::avg_linear, PoolKind::max_linear, PoolKind::strided_conv,
                       PoolKind::strided_depthwise, PoolKind::patch_merge})
      CHECK(parse_pool_kind(to_string(p)) == p);
    for (CompressTarget c : {CompressTarget::query, CompressTarget::key, CompressTarget::value})
      CHECK(parse_compress_target(to_string(c)) == c);
    CHECK(parse_compress_target("query") == CompressTarget::query);
    CHECK_THROWS(parse_pool_kind("median"));
  }
}
