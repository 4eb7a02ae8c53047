#include <doctest.h>

#include <cmath>
#include <random>

#include "rawformer/errors.hpp"
#include "rawformer/metrics.hpp"
#include "rawformer/train.hpp"
#include "scratch.hpp"

using namespace rawformer;

namespace {

ImageTensor ramp(int c, int size) {
  ImageTensor img = make_image(c, size, size);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = 0.1f + 0.8f * static_cast<float>(i % 97) / 97.0f;
  return img;
}

int zeroed_blocks(const ImageTensor& mask, int block) {
  int n = 0;
  for (int by = 0; by < mask.shape().h / block; ++by)
    for (int bx = 0; bx < mask.shape().w / block; ++bx) n += mask.at(0, 0, by * block, bx * block) > 0.5f;
  return n;
}

DatasetManifest tiny_dataset(const std::filesystem::path& root) {
  DatasetConfig cfg;
  cfg.root = root;
  cfg.n_train = 2;
  cfg.n_test = 2;
  cfg.image_size = 32;
  cfg.seed = 3;
  return generate_dataset(cfg);
}

GeneratorConfig tiny_generator() {
  GeneratorConfig g;
  g.base_channels = 8;
  g.levels = 2;
  g.image_size = 16;
  g.vit.depth = 1;
  g.vit.heads = 2;
  return g;
}

PretrainConfig tiny_pretrain(int epochs) {
  PretrainConfig p;
  p.epochs = epochs;
  p.batch_size = 2;
  p.crop = 16;
  p.mask_block = 4;
  p.log_wall_time = false;
  return p;
}

GanConfig tiny_gan(int epochs) {
  GanConfig g;
  g.epochs = epochs;
  g.crop = 16;
  g.steps_per_epoch = 2;
  g.log_wall_time = false;
  return g;
}

DiscriminatorConfig tiny_disc() {
  DiscriminatorConfig d;
  d.base_channels = 8;
  return d;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("mask fraction 0 keeps the image, fraction 1 blanks it") {
    const ImageTensor img = ramp(3, 16);
    const MaskedImage none = mask_blocks(img, 4, 0.0, 1);
    CHECK(none.masked.storage() == img.storage());
    for (float v : none.mask.values()) CHECK(v == 0.0f);
    const MaskedImage all = mask_blocks(img, 4, 1.0, 1);
    for (float v : all.masked.values()) CHECK(v == 0.0f);
  }

  TEST_CASE("40 percent of 64 blocks is exactly 26, reproducible by seed") {
    const ImageTensor img = ramp(3, 64);
    const MaskedImage m = mask_blocks(img, 8, 0.40, 17);
    CHECK(zeroed_blocks(m.mask, 8) == 26);
    CHECK(mask_blocks(img, 8, 0.40, 17).mask.storage() == m.mask.storage());
    CHECK(mask_blocks(img, 8, 0.40, 18).mask.storage() != m.mask.storage());
    // masked pixels are zero, the rest untouched, and blocks are whole
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const bool hidden = m.mask.at(0, 0, y, x) > 0.5f;
        CHECK(hidden == (m.mask.at(0, 0, y - y % 8, x - x % 8) > 0.5f));
        for (int c = 0; c < 3; ++c) CHECK(m.masked.at(0, c, y, x) == (hidden ? 0.0f : img.at(0, c, y, x)));
      }
    CHECK_THROWS_AS(mask_blocks(img, 7, 0.4, 1), DimensionError);
  }

  TEST_CASE("augment crops to the requested size and flips only rearrange values") {
    std::mt19937_64 rng(2);
    const ImageTensor img = ramp(3, 32);
    for (int i = 0; i < 5; ++i) {
      const ImageTensor a = augment(img, 16, true, rng);
      CHECK(a.shape() == nn::Shape{1, 3, 16, 16});
    }
    std::vector<float> sorted_in(img.storage()), sorted_out(augment(img, 0, true, rng).storage());
    std::sort(sorted_in.begin(), sorted_in.end());
    std::sort(sorted_out.begin(), sorted_out.end());
    CHECK(sorted_in == sorted_out);
    CHECK(stack_batch({img, img}).shape() == nn::Shape{2, 3, 32, 32});
  }

  TEST_CASE("zero-epoch pretraining returns the initialization and an empty CSV body") {
    testing::ScratchDir dir("pre0");
    const DatasetManifest data = tiny_dataset(dir / "data");
    PerceptualExtractor ex = PerceptualExtractor::random();
    const GeneratorConfig gc = tiny_generator();
    const PretrainResult r = run_pretrain(tiny_pretrain(0), data, gc, dir / "run", ex);
    CHECK(r.steps == 0);
    CHECK(testing::slurp(dir / "run/train.csv") == "epoch,lr,loss,wall_s\n");
    const GeneratorWeights init = build_generator(gc);
    const GeneratorWeights got = get_generator(r.checkpoint, "gen.");
    for (const auto& name : init.params.names())
      CHECK(got.params.at(name).value.storage() == init.params.at(name).value.storage());
    CHECK(std::filesystem::exists(dir / "run/ckpt/pretrain.rfck"));
  }

  TEST_CASE("pretraining is deterministic for fixed seeds") {
    testing::ScratchDir dir("pre2");
    const DatasetManifest data = tiny_dataset(dir / "data");
    PerceptualExtractor ex = PerceptualExtractor::random();
    const PretrainResult a = run_pretrain(tiny_pretrain(2), data, tiny_generator(), dir / "r1", ex);
    const PretrainResult b = run_pretrain(tiny_pretrain(2), data, tiny_generator(), dir / "r2", ex);
    CHECK(a.steps == 4);
    CHECK(a.epoch_loss.size() == 2);
    CHECK(testing::slurp(dir / "r1/train.csv") == testing::slurp(dir / "r2/train.csv"));
    CHECK(testing::slurp(dir / "r1/ckpt/pretrain.rfck") == testing::slurp(dir / "r2/ckpt/pretrain.rfck"));
  }

  TEST_CASE("pretraining honours the step cap") {
    testing::ScratchDir dir("precap");
    const DatasetManifest data = tiny_dataset(dir / "data");
    PerceptualExtractor ex = PerceptualExtractor::random();
    PretrainConfig p = tiny_pretrain(5);
    p.max_steps = 3;
    CHECK(run_pretrain(p, data, tiny_generator(), dir / "run", ex).steps == 3);
  }

  TEST_CASE("zero-logit discriminators give ln 2 adversarial terms at step start") {
    const GeneratorConfig gc = tiny_generator();
    GanModels m = GanModels::build(gc, tiny_disc(), tiny_gan(1));
    for (DiscriminatorState* d : {&m.d_a, &m.d_b}) {
      d->params.at("head.conv2.weight").value.fill(0.0f);
      d->params.at("head.conv2.bias").value.fill(0.0f);
    }
    PerceptualExtractor ex = PerceptualExtractor::random();
    nn::Tape<float> tape;
    const auto a = tape.constant(ramp(3, 16)), b = tape.constant(ramp(3, 16));
    const GanStepLosses l = generator_phase(m, tape, a, b, {}, {}, LossWeights{}, ex);
    CHECK(l.gan_A == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    CHECK(l.gan_B == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }

  TEST_CASE("feature caches never exceed capacity across training steps") {
    const GeneratorConfig gc = tiny_generator();
    GanModels m = GanModels::build(gc, tiny_disc(), tiny_gan(1));
    PerceptualExtractor ex = PerceptualExtractor::random();
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (long step = 0; step < 5; ++step) {
      ImageTensor a = make_image(3, 16, 16), b = make_image(3, 16, 16);
      for (auto& v : a.values()) v = d(rng);
      for (auto& v : b.values()) v = d(rng);
      const GanStepLosses l = gan_step(m, a, b, LossWeights{}, ex, step);
      CHECK(std::isfinite(l.dis_A));
      for (const DiscriminatorState* ds : {&m.d_a, &m.d_b})
        for (const auto& c : ds->caches) CHECK(c.size() <= 3);
      CHECK(m.d_a.cache(CacheKey::real_A).size() == static_cast<std::size_t>(std::min<long>(step + 1, 3)));
    }
  }

  TEST_CASE("adversarial run writes its CSV, checkpoint and a paired score; reruns match") {
    testing::ScratchDir dir("gan");
    const DatasetManifest data = tiny_dataset(dir / "data");
    PerceptualExtractor ex = PerceptualExtractor::random();
    const GanResult r1 = run_gan_train(tiny_gan(2), data, tiny_generator(), tiny_disc(), dir / "g1", ex);
    const GanResult r2 = run_gan_train(tiny_gan(2), data, tiny_generator(), tiny_disc(), dir / "g2", ex);
    CHECK(r1.steps == 4);
    REQUIRE(r1.final_score.has_value());
    CHECK(r1.final_score->cycle_psnr.has_value());
    const std::string csv = testing::slurp(dir / "g1/train.csv");
    CHECK(csv.starts_with("epoch,lr_gen,lr_disc,gan_A,gan_B,idt_A,idt_B,cyc_A,cyc_B,dis_A,dis_B,test_psnr"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv == testing::slurp(dir / "g2/train.csv"));
    CHECK(std::filesystem::exists(dir / "g1/ckpt/gan.rfck"));
  }

  TEST_CASE("adversarial training can start from a pretraining checkpoint") {
    testing::ScratchDir dir("ganinit");
    const DatasetManifest data = tiny_dataset(dir / "data");
    PerceptualExtractor ex = PerceptualExtractor::random();
    const PretrainResult pre = run_pretrain(tiny_pretrain(1), data, tiny_generator(), dir / "pre", ex);
    GanConfig g = tiny_gan(0);
    const GanResult r = run_gan_train(g, data, tiny_generator(), tiny_disc(), dir / "gan", ex, &pre.checkpoint);
    const GeneratorWeights src = get_generator(pre.checkpoint, "gen.");
    const GeneratorWeights ab = get_generator(r.checkpoint, "G_AB.");
    const GeneratorWeights ba = get_generator(r.checkpoint, "G_BA.");
    for (const auto& name : src.params.names()) {
      CHECK(ab.params.at(name).value.storage() == src.params.at(name).value.storage());
      CHECK(ba.params.at(name).value.storage() == src.params.at(name).value.storage());
    }
  }

  TEST_CASE("translate: empty input, one output per input, deterministic") {
    testing::ScratchDir dir("tr");
    const DatasetManifest data = tiny_dataset(dir / "data");
    Checkpoint ck;
    GeneratorWeights g = build_generator(tiny_generator());
    std::mt19937_64 rng(3);
    std::normal_distribution<float> d(0.0f, 0.2f);
    for (auto& v : g.params.at("head.weight").value.values()) v = d(rng);
    put_generator(ck, "G_AB.", g);
    put_generator(ck, "G_BA.", g);

    std::filesystem::create_directories(dir / "empty");
    CHECK(translate(ck, Direction::A2B, dir / "empty", dir / "out0") == 0);
    CHECK(list_rawimg(dir / "out0").empty());

    CHECK(translate(ck, Direction::A2B, dir / "data/test_A", dir / "o1") == 2);
    CHECK(translate(ck, Direction::A2B, dir / "data/test_A", dir / "o2") == 2);
    const auto files = list_rawimg(dir / "o1");
    REQUIRE(files.size() == 2);
    for (const auto& f : files) CHECK(testing::slurp(f) == testing::slurp(dir / "o2" / f.filename()));
    CHECK(read_rawimg(files[0]).storage() == generator_apply(g, read_rawimg(dir / "data/test_A/000000.rawimg")).storage());
  }

  TEST_CASE("translate serves both directions from a pretraining checkpoint") {
    testing::ScratchDir dir("trpre");
    const DatasetManifest data = tiny_dataset(dir / "data");
    Checkpoint ck;
    put_generator(ck, "gen.", build_generator(tiny_generator()));
    CHECK(translate(ck, Direction::B2A, dir / "data/test_B", dir / "o") == 2);
    CHECK_THROWS_AS(translate(Checkpoint{}, Direction::A2B, dir / "data/test_A", dir / "x"), CheckpointError);
    CHECK(parse_direction("A2B") == Direction::A2B);
    CHECK_THROWS(parse_direction("A2C"));
  }
}
