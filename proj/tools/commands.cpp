#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <random>

#include "rawformer/errors.hpp"
#include "rawformer/gradcheck_suite.hpp"
#include "rawformer/metrics.hpp"
#include "rawformer/nn/attention.hpp"
#include "rawformer/rng.hpp"

namespace rawformer::cli {

namespace fs = std::filesystem;

namespace {

int narrow(const RunConfig& c, const std::string& key) { return static_cast<int>(c.integer(key)); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw IoError("cannot write " + path.string());
}

/// Resolved config plus the derived seeds of every stream, as comments so the
/// file can be fed back through --config.
std::string resolved_text(const std::string& cmd, const RunConfig& c) {
  const std::uint64_t s = c.u64("seed");
  std::string out = "# command: " + cmd + "\n" + c.dump() + "# derived seeds\n";
  for (const char* tag : {"init/G_AB", "init/G_BA", "init/D_A", "init/D_B", "pretrain/epoch", "gan/epoch",
                          "scene/train_A", "scene/train_B", "scene/test"})
    out += "#   " + std::string(tag) + "[0] = " + std::to_string(derive_seed(s, tag, 0)) + "\n";
  return out;
}

PerceptualExtractor extractor_for(const RunConfig& c) {
  const std::string& path = c.text("perceptual_weights");
  return path.empty() ? PerceptualExtractor::random() : PerceptualExtractor::load(path);
}

DatasetManifest manifest_for(const RunConfig& c) { return load_manifest(c.text("data_root")); }

struct AblationCell {
  std::string generator, discriminator;
  nn::CqaConfig cqa;
  std::uint64_t seed;
};

DiscriminatorConfig discriminator_preset(const std::string& name) {
  if (name == "patchgan") return DiscriminatorConfig::patchgan();
  if (name.size() == 2 && name[0] == 'D') return DiscriminatorConfig::ablation(name[1] - '0');
  throw ConfigError("config key 'discriminator': unknown row '" + name + "'");
}

GeneratorConfig generator_preset(const std::string& name) {
  if (name.size() == 2 && name[0] == 'G') return GeneratorConfig::ablation(name[1] - '0');
  throw ConfigError("config key 'generator': unknown row '" + name + "'");
}

// ---- commands -------------------------------------------------------------------------

void cmd_synth(const RunConfig& c, std::ostream& out) {
  const DatasetManifest m = generate_dataset(dataset_config(c));
  std::size_t n = 0;
  for (const auto& [_, files] : m.splits) n += files.size();
  out << "synth: wrote " << n << " images to " << m.root.string() << "\n";
}

void cmd_pretrain(const RunConfig& c, std::ostream& out) {
  const DatasetManifest data = manifest_for(c);
  PerceptualExtractor ex = extractor_for(c);
  const PretrainResult r = run_pretrain(pretrain_config(c), data, generator_config(c), c.text("run_dir"), ex);
  out << "pretrain: " << r.steps << " steps, loss " << fmt(r.epoch_loss.front()) << " -> " << fmt(r.epoch_loss.back())
      << "\n";
}

void cmd_train(const RunConfig& c, std::ostream& out) {
  const DatasetManifest data = manifest_for(c);
  PerceptualExtractor ex = extractor_for(c);
  std::optional<Checkpoint> init;
  if (!c.text("init").empty()) init = load_checkpoint(c.text("init"));
  const GanResult r = run_gan_train(gan_config(c), data, generator_config(c), discriminator_config(c),
                                    c.text("run_dir"), ex, init ? &*init : nullptr);
  out << "train: " << r.steps << " steps";
  if (r.final_score) out << ", test psnr " << fmt(r.final_score->psnr) << " ssim " << fmt(r.final_score->ssim);
  out << "\n";
}

void cmd_translate(const RunConfig& c, std::ostream& out) {
  if (c.text("checkpoint").empty()) throw ConfigError("translate needs config key 'checkpoint'");
  const Direction dir = parse_direction(c.text("direction"));
  const fs::path in = c.text("input_dir").empty()
                          ? fs::path(c.text("data_root")) / (dir == Direction::A2B ? "test_A" : "test_B")
                          : fs::path(c.text("input_dir"));
  const fs::path dst =
      c.text("output_dir").empty() ? fs::path(c.text("run_dir")) / "translated" : fs::path(c.text("output_dir"));
  const std::size_t n = translate(load_checkpoint(c.text("checkpoint")), dir, in, dst);
  if (n == 0) throw IoError("translate: no .rawimg files in " + in.string());
  out << "translate: " << n << " images -> " << dst.string() << "\n";
}

void cmd_eval(const RunConfig& c, std::ostream& out) {
  const fs::path eval_dir = fs::path(c.text("run_dir")) / "eval";
  if (!c.text("pred_dir").empty() || !c.text("gt_dir").empty()) {
    if (c.text("pred_dir").empty() || c.text("gt_dir").empty())
      throw ConfigError("eval needs both 'pred_dir' and 'gt_dir'");
    const MetricsReport r = evaluate_pairs(c.text("pred_dir"), c.text("gt_dir"));
    write_file(eval_dir / "metrics.csv", r.csv());
    out << "eval: " << r.count() << " pairs, psnr " << fmt(r.mean.psnr) << "\n";
    return;
  }
  if (c.text("checkpoint").empty()) throw ConfigError("eval needs 'checkpoint' or 'pred_dir' and 'gt_dir'");
  const DatasetManifest data = manifest_for(c);
  const Checkpoint ckpt = load_checkpoint(c.text("checkpoint"));
  const fs::path pred = eval_dir / "A2B";
  translate(ckpt, Direction::A2B, data.root / "test_A", pred);
  const MetricsReport r = evaluate_pairs(pred, data.root / "test_B");
  write_file(eval_dir / "metrics.csv", r.csv());

  std::optional<GeneratorWeights> ab, ba;
  const bool gan = ckpt.has_prefix("G_AB.");
  ab = get_generator(ckpt, gan ? "G_AB." : "gen.");
  if (gan && ckpt.has_prefix("G_BA.")) ba = get_generator(ckpt, "G_BA.");
  else if (!gan) ba = get_generator(ckpt, "gen.");
  std::map<std::pair<std::string, std::string>, GeneratorWeights*> translators{{{"A", "B"}, &*ab}};
  if (ba) translators[{"B", "A"}] = &*ba;
  write_file(eval_dir / "cross_domain.csv", cross_domain_csv(cross_domain_eval(data, translators)));
  out << "eval: " << r.count() << " pairs, psnr " << fmt(r.mean.psnr) << " ssim " << fmt(r.mean.ssim) << "\n";
}

void cmd_ablate(const RunConfig& c, std::ostream& out) {
  const DatasetManifest data = manifest_for(c);
  PerceptualExtractor ex = extractor_for(c);

  std::vector<std::string> gens = split_list(c.text("ablate_generators"));
  std::vector<std::string> discs = split_list(c.text("ablate_discriminators"));
  if (discs.empty()) discs = {c.text("discriminator")};
  std::vector<nn::CqaConfig> variants;
  for (const auto& v : split_list(c.text("ablate_cqa"))) {
    const auto colon = v.find(':');
    if (colon == std::string::npos) throw ConfigError("config key 'ablate_cqa': expected target:pool, got '" + v + "'");
    nn::CqaConfig q = generator_config(c).cqa;
    q.target = nn::parse_compress_target(v.substr(0, colon));
    q.pool = nn::parse_pool_kind(v.substr(colon + 1));
    variants.push_back(q);
  }
  if (variants.empty()) variants = {generator_config(c).cqa};
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(c.text("ablate_seeds"))) {
    RunConfig probe = c;
    probe.set("seed", s);  // reuse the key's validation
    seeds.push_back(probe.u64("seed"));
  }
  if (gens.empty() || seeds.empty()) throw ConfigError("ablate needs at least one generator row and one seed");

  // Validate the whole grid before training anything.
  std::vector<AblationCell> cells;
  for (const auto& g : gens)
    for (const auto& d : discs)
      for (const auto& q : variants)
        for (const auto s : seeds) {
          RunConfig probe = c;
          probe.set("generator", g);
          probe.set("discriminator", d);
          probe.set("seed", std::to_string(s));
          GeneratorConfig gc = generator_config(probe);
          gc.cqa = q;
          gc.validate();
          cells.push_back({g, d, q, s});
        }

  const fs::path root = fs::path(c.text("run_dir")) / "ablate";
  std::string csv =
      "generator,discriminator,cqa_target,cqa_pool,seed,cqa,style,spfn,composite,d_attention,d_body_bn,d_batch_head,"
      "gen_params,psnr,ssim,cycle_psnr\n";
  for (const auto& cell : cells) {
    RunConfig rc = c;
    rc.set("generator", cell.generator);
    rc.set("discriminator", cell.discriminator);
    rc.set("seed", std::to_string(cell.seed));
    GeneratorConfig gc = generator_config(rc);
    gc.cqa = cell.cqa;
    const DiscriminatorConfig dc = discriminator_config(rc);
    const std::string tag = cell.generator + "_" + cell.discriminator + "_" + nn::to_string(cell.cqa.target) + "-" +
                            nn::to_string(cell.cqa.pool) + "_s" + std::to_string(cell.seed);
    const PretrainResult pre = run_pretrain(pretrain_config(rc), data, gc, root / tag / "pretrain", ex);
    GanConfig gan = gan_config(rc);
    gan.eval_every = 0;
    const GanResult res = run_gan_train(gan, data, gc, dc, root / tag / "train", ex, &pre.checkpoint);
    GeneratorWeights ab = get_generator(res.checkpoint, "G_AB."), ba = get_generator(res.checkpoint, "G_BA.");
    const PairedScore sc = paired_test_score(ab, data, &ba);
    const bool rf = gc.arch == GeneratorArch::rawformer;
    auto flag = [](bool b) { return b ? "1" : "0"; };
    csv += cell.generator + "," + cell.discriminator + "," + nn::to_string(cell.cqa.target) + "," +
           nn::to_string(cell.cqa.pool) + "," + std::to_string(cell.seed) + "," + flag(rf && gc.use_cqa) + "," +
           flag(rf && gc.use_style) + "," + flag(rf && gc.use_spfn) + "," + flag(rf && gc.use_composite) + "," +
           flag(dc.use_attention) + "," + flag(dc.use_batchnorm) + "," + flag(dc.use_batch_head) + "," +
           std::to_string(ab.param_count()) + "," + fmt(sc.psnr) + "," + fmt(sc.ssim) + "," + fmt(*sc.cycle_psnr) +
           "\n";
    out << "ablate: " << tag << " psnr " << fmt(sc.psnr) << " ssim " << fmt(sc.ssim) << "\n";
    write_file(fs::path(c.text("run_dir")) / "ablation.csv", csv);  // partial results survive an abort
  }
}

void cmd_bench(const RunConfig& c, std::ostream& out) {
  std::vector<AttentionCost> rows;
  for (const auto& t : split_list(c.text("bench_tokens"))) {
    int n = 0;
    try {
      n = std::stoi(t);
    } catch (const std::exception&) {
      throw ConfigError("config key 'bench_tokens': '" + t + "' is not an integer");
    }
    rows.push_back(attention_cost(n, narrow(c, "bench_channels"), narrow(c, "bench_heads"), narrow(c, "cqa_r"),
                                  narrow(c, "bench_reps")));
  }
  if (rows.empty()) throw ConfigError("config key 'bench_tokens' is empty");
  const std::string csv = attention_cost_csv(rows);
  write_file(fs::path(c.text("run_dir")) / "bench.csv", csv);
  out << csv;
}

int cmd_gradcheck(const RunConfig& c, std::ostream& out) {
  const auto outcomes = run_gradcheck_suite(c.text("gradcheck_filter"), c.u64("seed") + 1);
  if (outcomes.empty()) throw ConfigError("config key 'gradcheck_filter' matches no case");
  std::string csv = "case,tolerance,max_rel_err,checked,skipped,worst,passed\n";
  int failed = 0;
  for (const auto& o : outcomes) {
    char line[64];
    std::snprintf(line, sizeof line, "%.3e", o.report.max_rel_err);
    csv += o.name + "," + fmt(o.tolerance) + "," + line + "," + std::to_string(o.report.checked) + "," +
           std::to_string(o.report.skipped) + "," + o.report.worst_tensor + "," + (o.passed ? "1" : "0") + "\n";
    out << (o.passed ? "PASS " : "FAIL ") << o.name << " rel " << line << " (tol " << o.tolerance << ")\n";
    failed += !o.passed;
  }
  write_file(fs::path(c.text("run_dir")) / "gradcheck.csv", csv);
  out << "gradcheck: " << outcomes.size() - failed << "/" << outcomes.size() << " passed\n";
  return failed ? kExitCheckFailed : kExitOk;
}

}  // namespace

// ---- typed views ---------------------------------------------------------------------

DatasetConfig dataset_config(const RunConfig& c) {
  DatasetConfig d;
  d.root = c.text("data_root");
  d.n_train = narrow(c, "n_train");
  d.n_test = narrow(c, "n_test");
  d.image_size = narrow(c, "image_size");
  d.seed = c.u64("seed");
  d.noise = c.boolean("noise");
  d.overwrite = c.boolean("overwrite");
  if (d.noise) {
    for (CameraModel* cam : {&d.camera_a, &d.camera_b}) {
      cam->read_noise_std = c.real("read_noise");
      cam->shot_noise_scale = c.real("shot_noise");
    }
  }
  return d;
}

GeneratorConfig generator_config(const RunConfig& c) {
  GeneratorConfig g = generator_preset(c.text("generator"));
  g.levels = narrow(c, "levels");
  g.base_channels = narrow(c, "base_channels");
  g.image_size = c.integer("crop") > 0 ? narrow(c, "crop") : narrow(c, "image_size");
  g.vit.depth = narrow(c, "vit_depth");
  g.vit.heads = narrow(c, "vit_heads");
  g.vit.mlp_ratio = narrow(c, "vit_mlp_ratio");
  g.cqa.heads = narrow(c, "cqa_heads");
  g.cqa.r = narrow(c, "cqa_r");
  g.cqa.target = nn::parse_compress_target(c.text("cqa_target"));
  g.cqa.pool = nn::parse_pool_kind(c.text("cqa_pool"));
  g.seed = c.u64("seed");
  g.validate();
  return g;
}

DiscriminatorConfig discriminator_config(const RunConfig& c) {
  DiscriminatorConfig d = discriminator_preset(c.text("discriminator"));
  d.base_channels = narrow(c, "disc_base_channels");
  d.cache_capacity = narrow(c, "cache_capacity");
  d.cqa.heads = narrow(c, "cqa_heads");
  d.cqa.r = narrow(c, "cqa_r");
  d.cqa.target = nn::parse_compress_target(c.text("cqa_target"));
  d.cqa.pool = nn::parse_pool_kind(c.text("cqa_pool"));
  d.seed = c.u64("seed");
  d.validate();
  return d;
}

PretrainConfig pretrain_config(const RunConfig& c) {
  PretrainConfig p;
  p.epochs = narrow(c, "pretrain_epochs");
  p.batch_size = narrow(c, "pretrain_batch");
  p.crop = narrow(c, "crop");
  p.mask_block = narrow(c, "mask_block");
  p.mask_fraction = c.real("mask_fraction");
  p.flips = c.boolean("flips");
  p.adam.lr = c.real("pretrain_lr");
  p.adam.weight_decay = c.real("pretrain_weight_decay");
  p.T0 = c.real("T0");
  p.T_mult = c.real("T_mult");
  p.max_steps = narrow(c, "pretrain_max_steps");
  p.save_every = narrow(c, "save_every");
  p.log_wall_time = c.boolean("log_wall_time");
  p.pixel = {c.real("w_l1"), c.real("w_ssim"), c.real("w_perceptual")};
  p.seed = c.u64("seed");
  const int side = p.crop > 0 ? p.crop : narrow(c, "image_size");
  if (side % p.mask_block != 0)
    throw ConfigError("config key 'mask_block': " + std::to_string(p.mask_block) + " does not divide the " +
                      std::to_string(side) + " px training crop");
  if (p.crop > narrow(c, "image_size"))
    throw ConfigError("config key 'crop': larger than image_size " + std::to_string(c.integer("image_size")));
  p.validate();
  return p;
}

GanConfig gan_config(const RunConfig& c) {
  GanConfig g;
  g.epochs = narrow(c, "epochs");
  g.batch_size = narrow(c, "batch");
  g.crop = narrow(c, "crop");
  g.flips = c.boolean("flips");
  g.steps_per_epoch = narrow(c, "steps_per_epoch");
  g.max_steps = narrow(c, "max_steps");
  g.gen_adam.lr = c.real("gen_lr");
  g.disc_adam.lr = c.real("disc_lr");
  g.gen_adam.beta1 = g.disc_adam.beta1 = c.real("adam_beta1");
  g.gen_adam.beta2 = g.disc_adam.beta2 = c.real("adam_beta2");
  g.weights = {c.real("beta1"), c.real("beta2"), c.real("beta3"), {c.real("w_l1"), c.real("w_ssim"), c.real("w_perceptual")}};
  g.eval_every = narrow(c, "eval_every");
  g.save_every = narrow(c, "save_every");
  g.log_wall_time = c.boolean("log_wall_time");
  g.seed = c.u64("seed");
  g.validate();
  return g;
}

// ---- dispatch --------------------------------------------------------------------------

int run_command(const std::string& cmd, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (std::find(command_names().begin(), command_names().end(), cmd) == command_names().end()) {
    err << "error: unknown command '" << cmd << "'\n";
    return kExitConfig;
  }
  try {
    // Fail on inconsistent settings before anything touches the disk.
    if (cmd == "synth") dataset_config(cfg);
    if (cmd == "pretrain" || cmd == "ablate") pretrain_config(cfg);
    if (cmd == "pretrain" || cmd == "train" || cmd == "ablate") generator_config(cfg);
    if (cmd == "train" || cmd == "ablate") {
      gan_config(cfg);
      discriminator_config(cfg);
    }
    write_file(fs::path(cfg.text("run_dir")) / "config.resolved", resolved_text(cmd, cfg));

    if (cmd == "synth") cmd_synth(cfg, out);
    else if (cmd == "pretrain") cmd_pretrain(cfg, out);
    else if (cmd == "train") cmd_train(cfg, out);
    else if (cmd == "translate") cmd_translate(cfg, out);
    else if (cmd == "eval") cmd_eval(cfg, out);
    else if (cmd == "ablate") cmd_ablate(cfg, out);
    else if (cmd == "bench") cmd_bench(cfg, out);
    else return cmd_gradcheck(cfg, out);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << cmd << " aborted: " << e.what() << "\n";
    return kExitRuntime;
  }
}

// ---- attention cost ----------------------------------------------------------------------

AttentionCost attention_cost(int tokens, int channels, int heads, int r, int reps) {
  int side = 1;
  while (side * side < tokens) ++side;
  if (side * side != tokens) throw ConfigError("bench: token count " + std::to_string(tokens) + " is not a square");
  if (side % r != 0) throw ConfigError("bench: r = " + std::to_string(r) + " does not divide the side " + std::to_string(side));
  if (channels % heads != 0) throw ConfigError("bench: heads must divide channels");

  std::mt19937_64 rng(derive_seed(0, "bench", static_cast<std::uint64_t>(tokens)));
  std::normal_distribution<float> dist(0.0f, 1.0f);
  auto random = [&](nn::Shape s) {
    nn::Tensor<float> t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
  };
  const nn::Tensor<float> q = random({1, channels, side, side}), k = random({1, channels, side, side}),
                          v = random({1, channels, side, side}), cond = random({1, channels, side / r, side / r});

  AttentionCost out{tokens, channels, heads, r};
  {
    nn::FlopLedger ledger;
    nn::Tape<float> tape;
    tape.flop_ledger = &ledger;
    nn::condensed_attention(tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(cond), heads);
    nn::dense_attention(tape.constant(q), tape.constant(k), tape.constant(v), heads);
    out.cqa_products = ledger.total("attention.cqa.mix");
    out.cqa_scores = ledger.total("attention.cqa.score");
    out.dense = ledger.total("attention.dense.");
  }

  auto median_ms = [&](auto&& run) {
    std::vector<double> ms;
    for (int i = 0; i < reps; ++i) {
      nn::Tape<float> tape;
      const auto t0 = std::chrono::steady_clock::now();
      run(tape);
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    return ms.empty() ? 0.0 : ms[ms.size() / 2];
  };
  if (reps > 0) {
    out.cqa_ms = median_ms([&](nn::Tape<float>& t) {
      nn::condensed_attention(t.constant(q), t.constant(k), t.constant(v), t.constant(cond), heads);
    });
    out.dense_ms =
        median_ms([&](nn::Tape<float>& t) { nn::dense_attention(t.constant(q), t.constant(k), t.constant(v), heads); });
  }
  return out;
}

std::string attention_cost_csv(const std::vector<AttentionCost>& rows) {
  std::string out = "tokens,channels,heads,r,cqa_product_flops,cqa_score_flops,dense_flops,dense_over_cqa,cqa_ms,dense_ms\n";
  for (const auto& a : rows) {
    out += std::to_string(a.tokens) + "," + std::to_string(a.channels) + "," + std::to_string(a.heads) + "," +
           std::to_string(a.r) + "," + std::to_string(a.cqa_products) + "," + std::to_string(a.cqa_scores) + "," +
           std::to_string(a.dense) + "," + fmt(a.cqa_products ? double(a.dense) / a.cqa_products : 0.0) + "," +
           fmt(a.cqa_ms) + "," + fmt(a.dense_ms) + "\n";
  }
  return out;
}

}  // namespace rawformer::cli
