#include "rawformer/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "rawformer/errors.hpp"
#include "rawformer/metrics.hpp"
#include "rawformer/rng.hpp"

namespace rawformer {

using nn::Var;

// ---- data helpers -----------------------------------------------------------------

MaskedImage mask_blocks(const ImageTensor& img, int block, double fraction, std::uint64_t seed) {
  const nn::Shape s = img.shape();
  if (block < 1 || s.h % block != 0 || s.w % block != 0)
    throw DimensionError("mask_blocks: block " + std::to_string(block) + " must divide " + nn::to_string(s));
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ParameterError("mask_blocks: fraction must lie in [0,1]");
  const int bh = s.h / block, bw = s.w / block, total = bh * bw;
  const int chosen = static_cast<int>(std::lround(fraction * total));
  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `chosen` slots are a uniform sample.
  for (int i = 0; i < chosen; ++i) {
    std::uniform_int_distribution<int> pick(i, total - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  MaskedImage out{img, nn::Tensor<float>(nn::Shape{s.n, 1, s.h, s.w})};
  for (int k = 0; k < chosen; ++k) {
    const int by = order[k] / bw, bx = order[k] % bw;
    for (int n = 0; n < s.n; ++n)
      for (int y = by * block; y < (by + 1) * block; ++y)
        for (int x = bx * block; x < (bx + 1) * block; ++x) {
          for (int c = 0; c < s.c; ++c) out.masked.at(n, c, y, x) = 0.0f;
          out.mask.at(n, 0, y, x) = 1.0f;
        }
  }
  return out;
}

ImageTensor augment(const ImageTensor& img, int crop, bool flips, std::mt19937_64& rng) {
  const nn::Shape s = img.shape();
  const int ch = crop > 0 ? crop : s.h, cw = crop > 0 ? crop : s.w;
  if (ch > s.h || cw > s.w) throw DimensionError("crop " + std::to_string(crop) + " exceeds image " + nn::to_string(s));
  const int y0 = static_cast<int>(std::uniform_int_distribution<int>(0, s.h - ch)(rng));
  const int x0 = static_cast<int>(std::uniform_int_distribution<int>(0, s.w - cw)(rng));
  bool fh = false, fv = false;
  if (flips) {
    fh = (rng() & 1u) != 0;
    fv = (rng() & 1u) != 0;
  }
  ImageTensor out(nn::Shape{s.n, s.c, ch, cw});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
          out.at(n, c, y, x) = img.at(n, c, y0 + (fv ? ch - 1 - y : y), x0 + (fh ? cw - 1 - x : x));
  return out;
}

ImageTensor stack_batch(const std::vector<ImageTensor>& images) {
  if (images.empty()) throw DimensionError("stack_batch: no images");
  nn::Shape s = images.front().shape();
  s.n = 0;
  for (const auto& im : images) {
    if (im.shape().c != s.c || im.shape().h != s.h || im.shape().w != s.w)
      throw DimensionError("stack_batch: mixed shapes " + nn::to_string(images.front().shape()) + " and " +
                           nn::to_string(im.shape()));
    s.n += im.shape().n;
  }
  ImageTensor out(s);
  std::size_t at = 0;
  for (const auto& im : images) {
    std::copy(im.data(), im.data() + im.size(), out.data() + at);
    at += im.size();
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string epoch_tag(int epoch) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", epoch);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text, bool append = false) {
  std::ofstream f(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

std::vector<ImageTensor> load_split(const DatasetManifest& data, const std::string& split) {
  std::vector<ImageTensor> out;
  for (const auto& f : data.files(split)) out.push_back(read_rawimg(f));
  return out;
}

class WallClock {
 public:
  explicit WallClock(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - start_).count();
    start_ = now;
    return enabled_ ? s : 0.0;
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

void require_finite(double v, const std::string& what, long step) {
  if (!std::isfinite(v)) throw NumericError("non-finite " + what + " at step " + std::to_string(step));
}

}  // namespace

// ---- checkpoint helpers -----------------------------------------------------------

void put_generator(Checkpoint& ckpt, const std::string& prefix, const GeneratorWeights& g) {
  ckpt.put(prefix, g.params);
  const GeneratorConfig& c = g.config;
  auto& m = ckpt.meta;
  const std::string p = prefix + "config.";
  m[p + "levels"] = std::to_string(c.levels);
  m[p + "base_channels"] = std::to_string(c.base_channels);
  m[p + "image_size"] = std::to_string(c.image_size);
  m[p + "vit.depth"] = std::to_string(c.vit.depth);
  m[p + "vit.heads"] = std::to_string(c.vit.heads);
  m[p + "vit.mlp_ratio"] = std::to_string(c.vit.mlp_ratio);
  m[p + "vit.resize_pos"] = std::to_string(c.vit.resize_pos);
  m[p + "cqa.heads"] = std::to_string(c.cqa.heads);
  m[p + "cqa.r"] = std::to_string(c.cqa.r);
  m[p + "cqa.target"] = nn::to_string(c.cqa.target);
  m[p + "cqa.pool"] = nn::to_string(c.cqa.pool);
  m[p + "use_cqa"] = std::to_string(c.use_cqa);
  m[p + "use_style"] = std::to_string(c.use_style);
  m[p + "use_spfn"] = std::to_string(c.use_spfn);
  m[p + "use_composite"] = std::to_string(c.use_composite);
  m[p + "arch"] = to_string(c.arch);
  m[p + "seed"] = std::to_string(c.seed);
}

GeneratorWeights get_generator(const Checkpoint& ckpt, const std::string& prefix) {
  const std::string p = prefix + "config.";
  if (!ckpt.meta.count(p + "levels")) throw CheckpointError("checkpoint holds no generator '" + prefix + "'");
  auto i = [&](const std::string& k) { return std::stoi(ckpt.value(p + k)); };
  GeneratorConfig c;
  c.levels = i("levels");
  c.base_channels = i("base_channels");
  c.image_size = i("image_size");
  c.vit.depth = i("vit.depth");
  c.vit.heads = i("vit.heads");
  c.vit.mlp_ratio = i("vit.mlp_ratio");
  c.vit.resize_pos = i("vit.resize_pos") != 0;
  c.cqa.heads = i("cqa.heads");
  c.cqa.r = i("cqa.r");
  c.cqa.target = nn::parse_compress_target(ckpt.value(p + "cqa.target"));
  c.cqa.pool = nn::parse_pool_kind(ckpt.value(p + "cqa.pool"));
  c.use_cqa = i("use_cqa") != 0;
  c.use_style = i("use_style") != 0;
  c.use_spfn = i("use_spfn") != 0;
  c.use_composite = i("use_composite") != 0;
  c.arch = parse_generator_arch(ckpt.value(p + "arch"));
  c.seed = std::stoull(ckpt.value(p + "seed"));
  GeneratorWeights g = build_generator(c);
  ckpt.get(prefix, g.params);
  return g;
}

// ---- pretraining ----------------------------------------------------------------

void PretrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("pretrain: " + m); };
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (mask_block < 1) fail("mask_block must be >= 1");
  if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0)) fail("mask_fraction must lie in [0,1]");
  if (T0 < 1 || T_mult < 1) fail("schedule needs T0 >= 1 and T_mult >= 1");
  if (max_steps < 0 || save_every < 0) fail("max_steps and save_every must be >= 0");
  adam.validate();
}

PretrainResult run_pretrain(const PretrainConfig& cfg, const DatasetManifest& data, const GeneratorConfig& gen_cfg,
                            const std::filesystem::path& run_dir, PerceptualExtractor& extractor) {
  cfg.validate();
  std::vector<ImageTensor> images = load_split(data, "train_A");
  for (auto& im : load_split(data, "train_B")) images.push_back(std::move(im));
  if (images.empty()) throw IoError("pretrain: dataset " + data.root.string() + " has no training images");

  std::filesystem::create_directories(run_dir / "ckpt");
  const auto csv = run_dir / "train.csv";
  write_text(csv, "epoch,lr,loss,wall_s\n");

  GeneratorWeights g = build_generator(gen_cfg);
  Adam opt(cfg.adam);
  PretrainResult result;
  const int n = static_cast<int>(images.size());
  const int per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  auto snapshot = [&](int epoch) {
    Checkpoint c;
    put_generator(c, "gen.", g);
    opt.save(c, "opt.gen.");
    c.meta["phase"] = "pretrain";
    c.meta["epoch"] = std::to_string(epoch);
    c.meta["seed"] = std::to_string(cfg.seed);
    return c;
  };

  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    WallClock clock(cfg.log_wall_time);
    std::mt19937_64 rng(derive_seed(cfg.seed, "pretrain/epoch", static_cast<std::uint64_t>(epoch)));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, lr = cfg.adam.lr;
    int batches = 0;
    for (int bi = 0; bi < per_epoch; ++bi) {
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
        done = true;
        break;
      }
      std::vector<ImageTensor> clean, masked;
      for (int k = bi * cfg.batch_size; k < std::min(n, (bi + 1) * cfg.batch_size); ++k) {
        ImageTensor im = augment(images[order[k]], cfg.crop, cfg.flips, rng);
        masked.push_back(mask_blocks(im, cfg.mask_block, cfg.mask_fraction, rng()).masked);
        clean.push_back(std::move(im));
      }
      lr = lr_schedule(epoch + static_cast<double>(bi) / per_epoch, cfg.T0, cfg.T_mult, cfg.adam.lr, cfg.lr_min);
      opt.set_lr(lr);
      nn::Tape<float> tape;
      const Var<float> x = tape.constant(stack_batch(masked));
      const Var<float> target = tape.constant(stack_batch(clean));
      const Var<float> recon = generator_forward(g.config, g.params, tape, x);
      const Var<float> loss = pixelwise_loss(recon, target, extractor.params, cfg.pixel);
      require_finite(loss.value()[0], "pretraining loss", result.steps);
      g.params.zero_grad();
      tape.backward(loss);
      opt.step(g.params);
      loss_sum += loss.value()[0];
      ++batches;
      ++result.steps;
    }
    if (batches == 0) break;
    const double mean = loss_sum / batches;
    result.epoch_loss.push_back(mean);
    write_text(csv, std::to_string(epoch) + "," + fmt(lr) + "," + fmt(mean) + "," + fmt(clock.lap()) + "\n", true);
    if (cfg.save_every > 0 && (epoch + 1) % cfg.save_every == 0)
      save_checkpoint(snapshot(epoch), run_dir / "ckpt" / ("pretrain_e" + epoch_tag(epoch) + ".rfck"));
  }
  result.checkpoint = snapshot(static_cast<int>(result.epoch_loss.size()) - 1);
  save_checkpoint(result.checkpoint, run_dir / "ckpt" / "pretrain.rfck");
  return result;
}

// ---- adversarial training ---------------------------------------------------------

void GanConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("gan: " + m); };
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (steps_per_epoch < 0 || max_steps < 0 || eval_every < 0 || save_every < 0)
    fail("step, eval and save counts must be >= 0");
  gen_adam.validate();
  disc_adam.validate();
}

GanModels GanModels::build(const GeneratorConfig& gen_cfg, const DiscriminatorConfig& disc_cfg, const GanConfig& cfg) {
  GeneratorConfig ga = gen_cfg, gb = gen_cfg;
  ga.seed = derive_seed(gen_cfg.seed, "init/G_AB", 0);
  gb.seed = derive_seed(gen_cfg.seed, "init/G_BA", 0);
  DiscriminatorConfig da = disc_cfg, db = disc_cfg;
  da.seed = derive_seed(disc_cfg.seed, "init/D_A", 0);
  db.seed = derive_seed(disc_cfg.seed, "init/D_B", 0);
  return GanModels{build_generator(ga),          build_generator(gb),          build_discriminator(da),
                   build_discriminator(db),      Adam(cfg.gen_adam),           Adam(cfg.gen_adam),
                   Adam(cfg.disc_adam),          Adam(cfg.disc_adam)};
}

void GanModels::save(Checkpoint& ckpt) const {
  put_generator(ckpt, "G_AB.", g_ab);
  put_generator(ckpt, "G_BA.", g_ba);
  ckpt.put("D_A.", d_a.params);
  ckpt.put("D_B.", d_b.params);
  opt_g_ab.save(ckpt, "opt.G_AB.");
  opt_g_ba.save(ckpt, "opt.G_BA.");
  opt_d_a.save(ckpt, "opt.D_A.");
  opt_d_b.save(ckpt, "opt.D_B.");
  const std::pair<const DiscriminatorState*, std::string> ds[] = {{&d_a, "D_A"}, {&d_b, "D_B"}};
  for (const auto& [d, name] : ds)
    for (CacheKey k : {CacheKey::real_A, CacheKey::real_B, CacheKey::fake_A, CacheKey::fake_B}) {
      const auto& entries = d->cache(k).entries();
      const std::string base = "cache." + name + "." + to_string(k);
      ckpt.meta[base + ".size"] = std::to_string(entries.size());
      for (std::size_t i = 0; i < entries.size(); ++i) ckpt.tensors[base + "." + std::to_string(i)] = entries[i];
    }
}

void GanModels::load(const Checkpoint& ckpt) {
  g_ab = get_generator(ckpt, "G_AB.");
  g_ba = get_generator(ckpt, "G_BA.");
  ckpt.get("D_A.", d_a.params);
  ckpt.get("D_B.", d_b.params);
  opt_g_ab.load(ckpt, "opt.G_AB.");
  opt_g_ba.load(ckpt, "opt.G_BA.");
  opt_d_a.load(ckpt, "opt.D_A.");
  opt_d_b.load(ckpt, "opt.D_B.");
  const std::pair<DiscriminatorState*, std::string> ds[] = {{&d_a, "D_A"}, {&d_b, "D_B"}};
  for (const auto& [d, name] : ds)
    for (CacheKey k : {CacheKey::real_A, CacheKey::real_B, CacheKey::fake_A, CacheKey::fake_B}) {
      FeatureCache& cache = d->cache(k);
      cache.clear();
      const std::string base = "cache." + name + "." + to_string(k);
      const auto size = std::stoul(ckpt.value(base + ".size"));
      for (std::size_t i = 0; i < size; ++i) cache.push(ckpt.tensor(base + "." + std::to_string(i)));
    }
}

DiscriminatorPhase discriminator_phase(GanModels& m, const ImageTensor& a, const ImageTensor& b,
                                       const ImageTensor& fake_a, const ImageTensor& fake_b) {
  nn::Tape<float> tape;
  const DiscriminatorLosses l = discriminator_losses(m.d_a, m.d_b, tape, tape.constant(a), tape.constant(b),
                                                     tape.constant(fake_a), tape.constant(fake_b));
  DiscriminatorPhase out;
  out.dis_A = l.dis_A.value()[0];
  out.dis_B = l.dis_B.value()[0];
  out.feat_real_a = l.feat_real_a.value();
  out.feat_fake_a = l.feat_fake_a.value();
  out.feat_real_b = l.feat_real_b.value();
  out.feat_fake_b = l.feat_fake_b.value();
  m.d_a.params.zero_grad();
  m.d_b.params.zero_grad();
  tape.backward(nn::add(l.dis_A, l.dis_B));
  return out;
}

GanStepLosses generator_phase(GanModels& m, nn::Tape<float>& tape, Var<float> a, Var<float> b, Var<float> fake_b,
                              Var<float> fake_a, const LossWeights& w, PerceptualExtractor& extractor) {
  const GeneratorLoss l = generator_loss(m.g_ab, m.g_ba, m.d_a, m.d_b, tape, a, b, w, extractor, fake_b, fake_a);
  GanStepLosses out;
  out.gan_A = l.gan_A.value()[0];
  out.gan_B = l.gan_B.value()[0];
  out.idt_A = l.idt_A.value()[0];
  out.idt_B = l.idt_B.value()[0];
  out.cyc_A = l.cyc_A.value()[0];
  out.cyc_B = l.cyc_B.value()[0];
  m.g_ab.params.zero_grad();
  m.g_ba.params.zero_grad();
  tape.backward(l.total);
  return out;
}

GanStepLosses gan_step(GanModels& m, const ImageTensor& a, const ImageTensor& b, const LossWeights& w,
                       PerceptualExtractor& extractor, long step) {
  nn::Tape<float> tape;
  const Var<float> va = tape.constant(a), vb = tape.constant(b);
  const Var<float> fake_b = generator_forward(m.g_ab.config, m.g_ab.params, tape, va);
  const Var<float> fake_a = generator_forward(m.g_ba.config, m.g_ba.params, tape, vb);

  const DiscriminatorPhase d = discriminator_phase(m, a, b, fake_a.value(), fake_b.value());
  require_finite(d.dis_A, "dis_A", step);
  require_finite(d.dis_B, "dis_B", step);
  m.opt_d_a.step(m.d_a.params);
  m.opt_d_b.step(m.d_b.params);
  m.d_a.cache(CacheKey::real_A).push(d.feat_real_a);
  m.d_b.cache(CacheKey::real_B).push(d.feat_real_b);
  m.d_a.cache(CacheKey::fake_A).push(d.feat_fake_a);
  m.d_b.cache(CacheKey::fake_B).push(d.feat_fake_b);

  GanStepLosses out = generator_phase(m, tape, va, vb, fake_b, fake_a, w, extractor);
  const std::pair<const char*, double> terms[] = {{"gan_A", out.gan_A}, {"gan_B", out.gan_B}, {"idt_A", out.idt_A},
                                                  {"idt_B", out.idt_B}, {"cyc_A", out.cyc_A}, {"cyc_B", out.cyc_B}};
  for (const auto& [name, v] : terms) require_finite(v, name, step);
  m.opt_g_ab.step(m.g_ab.params);
  m.opt_g_ba.step(m.g_ba.params);
  out.dis_A = d.dis_A;
  out.dis_B = d.dis_B;
  return out;
}

PairedScore paired_test_score(GeneratorWeights& g_ab, const DatasetManifest& data, GeneratorWeights* g_ba) {
  const auto src = data.files("test_A"), dst = data.files("test_B");
  if (src.empty() || src.size() != dst.size()) throw IoError("paired test split is empty or unbalanced");
  PairedScore s;
  double cyc = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const ImageTensor a = read_rawimg(src[i]);
    const ImageTensor pred = generator_apply(g_ab, a);
    const ImageTensor gt = read_rawimg(dst[i]);
    s.psnr += psnr(pred, gt);
    s.ssim += ssim(pred, gt);
    if (g_ba) cyc += psnr(generator_apply(*g_ba, pred), a);
  }
  s.psnr /= src.size();
  s.ssim /= src.size();
  if (g_ba) s.cycle_psnr = cyc / src.size();
  return s;
}

GanResult run_gan_train(const GanConfig& cfg, const DatasetManifest& data, const GeneratorConfig& gen_cfg,
                        const DiscriminatorConfig& disc_cfg, const std::filesystem::path& run_dir,
                        PerceptualExtractor& extractor, const Checkpoint* init) {
  cfg.validate();
  const std::vector<ImageTensor> set_a = load_split(data, "train_A"), set_b = load_split(data, "train_B");
  if (set_a.empty() || set_b.empty()) throw IoError("gan: dataset " + data.root.string() + " lacks training images");
  const bool has_test = !data.files("test_A").empty() && data.files("test_A").size() == data.files("test_B").size();

  GanModels m = GanModels::build(gen_cfg, disc_cfg, cfg);
  int first_epoch = 0;
  long step = 0;
  if (init) {
    const auto phase = init->meta.find("phase");
    if (phase != init->meta.end() && phase->second == "gan") {
      m.load(*init);
      first_epoch = std::stoi(init->value("epoch")) + 1;
      step = std::stol(init->value("step"));
    } else {
      init->get("gen.", m.g_ab.params);
      init->get("gen.", m.g_ba.params);
    }
  }

  std::filesystem::create_directories(run_dir / "ckpt");
  std::filesystem::create_directories(run_dir / "img");
  const auto csv = run_dir / "train.csv";
  if (first_epoch == 0 || !std::filesystem::exists(csv))
    write_text(csv, "epoch,lr_gen,lr_disc,gan_A,gan_B,idt_A,idt_B,cyc_A,cyc_B,dis_A,dis_B,test_psnr,test_ssim,test_cycle_psnr,wall_s\n");

  const int per_epoch = cfg.steps_per_epoch > 0
                            ? cfg.steps_per_epoch
                            : std::max<int>(1, static_cast<int>(std::max(set_a.size(), set_b.size())) / cfg.batch_size);
  GanResult result;
  auto snapshot = [&](int epoch) {
    Checkpoint c;
    m.save(c);
    c.meta["phase"] = "gan";
    c.meta["epoch"] = std::to_string(epoch);
    c.meta["step"] = std::to_string(step);
    c.meta["seed"] = std::to_string(cfg.seed);
    return c;
  };

  int last_epoch = first_epoch - 1;
  bool done = false;
  for (int epoch = first_epoch; epoch < cfg.epochs && !done; ++epoch) {
    WallClock clock(cfg.log_wall_time);
    // Derived from (seed, epoch) alone so a resumed run draws the same samples.
    std::mt19937_64 rng(derive_seed(cfg.seed, "gan/epoch", static_cast<std::uint64_t>(epoch)));
    GanStepLosses sum;
    int steps = 0;
    for (int s = 0; s < per_epoch; ++s) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) {
        done = true;
        break;
      }
      std::vector<ImageTensor> ba, bb;
      for (int k = 0; k < cfg.batch_size; ++k) {
        const auto ia = std::uniform_int_distribution<std::size_t>(0, set_a.size() - 1)(rng);
        const auto ib = std::uniform_int_distribution<std::size_t>(0, set_b.size() - 1)(rng);
        ba.push_back(augment(set_a[ia], cfg.crop, cfg.flips, rng));
        bb.push_back(augment(set_b[ib], cfg.crop, cfg.flips, rng));
      }
      const GanStepLosses l = gan_step(m, stack_batch(ba), stack_batch(bb), cfg.weights, extractor, step);
      sum.gan_A += l.gan_A;
      sum.gan_B += l.gan_B;
      sum.idt_A += l.idt_A;
      sum.idt_B += l.idt_B;
      sum.cyc_A += l.cyc_A;
      sum.cyc_B += l.cyc_B;
      sum.dis_A += l.dis_A;
      sum.dis_B += l.dis_B;
      ++steps;
      ++step;
    }
    if (steps == 0) break;
    for (double* v : {&sum.gan_A, &sum.gan_B, &sum.idt_A, &sum.idt_B, &sum.cyc_A, &sum.cyc_B, &sum.dis_A, &sum.dis_B})
      *v /= steps;
    result.epoch_losses.push_back(sum);
    last_epoch = epoch;

    std::string test_psnr, test_ssim, test_cycle;
    const bool final_epoch = done || epoch + 1 == cfg.epochs;
    if (has_test && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || final_epoch)) {
      const PairedScore sc = paired_test_score(m.g_ab, data, &m.g_ba);
      test_psnr = fmt(sc.psnr);
      test_ssim = fmt(sc.ssim);
      test_cycle = fmt(*sc.cycle_psnr);
      if (final_epoch) result.final_score = sc;
    }
    write_text(csv,
               std::to_string(epoch) + "," + fmt(cfg.gen_adam.lr) + "," + fmt(cfg.disc_adam.lr) + "," + fmt(sum.gan_A) +
                   "," + fmt(sum.gan_B) + "," + fmt(sum.idt_A) + "," + fmt(sum.idt_B) + "," + fmt(sum.cyc_A) + "," +
                   fmt(sum.cyc_B) + "," + fmt(sum.dis_A) + "," + fmt(sum.dis_B) + "," + test_psnr + "," + test_ssim +
                   "," + test_cycle + "," + fmt(clock.lap()) + "\n",
               true);
    if (cfg.save_every > 0 && (epoch + 1) % cfg.save_every == 0)
      save_checkpoint(snapshot(epoch), run_dir / "ckpt" / ("gan_e" + epoch_tag(epoch) + ".rfck"));
  }
  result.steps = step;
  result.checkpoint = snapshot(last_epoch);
  save_checkpoint(result.checkpoint, run_dir / "ckpt" / "gan.rfck");

  // A few rendered translations for eyeballing.
  if (has_test) {
    const auto src = data.files("test_A");
    for (std::size_t i = 0; i < std::min<std::size_t>(src.size(), 4); ++i) {
      const ImageTensor raw = read_rawimg(src[i]);
      const std::string stem = src[i].stem().string();
      export_png(render_isp_proxy(raw, data.camera_a), run_dir / "img" / (stem + "_A.png"));
      export_png(render_isp_proxy(generator_apply(m.g_ab, raw), data.camera_b), run_dir / "img" / (stem + "_A2B.png"));
    }
  }
  return result;
}

// ---- inference --------------------------------------------------------------------

Direction parse_direction(const std::string& s) {
  if (s == "A2B") return Direction::A2B;
  if (s == "B2A") return Direction::B2A;
  throw ConfigError("direction must be A2B or B2A, got '" + s + "'");
}

std::size_t translate(const Checkpoint& ckpt, Direction dir, const std::filesystem::path& in_dir,
                      const std::filesystem::path& out_dir) {
  const std::string prefix = dir == Direction::A2B ? "G_AB." : "G_BA.";
  // A pretraining checkpoint has one shared generator.
  GeneratorWeights g = get_generator(ckpt, ckpt.has_prefix(prefix) || !ckpt.has_prefix("gen.") ? prefix : "gen.");
  const auto files = list_rawimg(in_dir);
  std::filesystem::create_directories(out_dir);
  for (const auto& f : files) write_rawimg(out_dir / f.filename(), generator_apply(g, read_rawimg(f)));
  return files.size();
}

}  // namespace rawformer
