#include "config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "rawformer/errors.hpp"

namespace rawformer::cli {

namespace {

constexpr double kBig = 1e12;

KeySpec integer(std::string name, std::int64_t def, double lo, double hi, std::string doc) {
  return {std::move(name), KeyType::integer, std::to_string(def), std::move(doc), lo, hi, {}};
}
KeySpec real(std::string name, std::string def, double lo, double hi, std::string doc) {
  return {std::move(name), KeyType::real, std::move(def), std::move(doc), lo, hi, {}};
}
KeySpec boolean(std::string name, bool def, std::string doc) {
  return {std::move(name), KeyType::boolean, def ? "true" : "false", std::move(doc), 0, 0, {}};
}
KeySpec text(std::string name, std::string def, std::string doc) {
  return {std::move(name), KeyType::text, std::move(def), std::move(doc), 0, 0, {}};
}
KeySpec choice(std::string name, std::string def, std::vector<std::string> choices, std::string doc) {
  return {std::move(name), KeyType::choice, std::move(def), std::move(doc), 0, 0, std::move(choices)};
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const KeySpec& k, const std::string& value, const std::string& why) {
  throw ConfigError("config key '" + k.name + "': " + why + " (got '" + value + "')");
}

std::string normalise(const KeySpec& k, const std::string& raw) {
  const std::string v = trim(raw);
  switch (k.type) {
    case KeyType::integer: {
      std::int64_t x = 0;
      const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(k, raw, "expected an integer");
      if (x < k.min || x > k.max)
        bad_value(k, raw, "out of range [" + std::to_string(static_cast<std::int64_t>(k.min)) + ", " +
                              std::to_string(static_cast<std::int64_t>(k.max)) + "]");
      return std::to_string(x);
    }
    case KeyType::real: {
      double x = 0;
      const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(x))
        bad_value(k, raw, "expected a finite number");
      if (x < k.min || x > k.max) {
        std::ostringstream os;
        os << "out of range [" << k.min << ", " << k.max << "]";
        bad_value(k, raw, os.str());
      }
      return v;
    }
    case KeyType::boolean: {
      std::string l = v;
      std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
      if (l == "true" || l == "1" || l == "yes" || l == "on") return "true";
      if (l == "false" || l == "0" || l == "no" || l == "off") return "false";
      bad_value(k, raw, "expected true or false");
    }
    case KeyType::text:
      return v;
    case KeyType::choice: {
      if (std::find(k.choices.begin(), k.choices.end(), v) != k.choices.end()) return v;
      std::string all;
      for (const auto& c : k.choices) all += (all.empty() ? "" : "|") + c;
      bad_value(k, raw, "expected one of " + all);
    }
  }
  return v;
}

}  // namespace

const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = {
      // run
      integer("seed", 0, 0, 9.2e18, "master seed; every random stream is derived from it"),
      text("run_dir", "runs/default", "output directory of the command"),
      boolean("log_wall_time", false, "write elapsed seconds into train.csv (breaks byte-identical reruns)"),
      // dataset
      text("data_root", "data", "synthetic dataset directory"),
      integer("n_train", 32, 1, 1e6, "training images per camera"),
      integer("n_test", 8, 0, 1e6, "paired test scenes"),
      integer("image_size", 64, 32, 4096, "side of generated images"),
      boolean("noise", false, "heteroscedastic sensor noise on both cameras"),
      real("read_noise", "0.005", 0, 0.5, "read noise std when noise is on"),
      real("shot_noise", "0.0001", 0, 0.5, "shot noise variance per unit signal when noise is on"),
      boolean("overwrite", false, "let synth replace a populated data_root"),
      // generator
      choice("generator", "G5", {"G1", "G2", "G3", "G4", "G5"},
             "architecture row: G1 baseline UNet, G2 +CQA, G3 +style, G4 +SPFN, G5 +composite samplers"),
      integer("levels", 3, 1, 6, "encoder/decoder levels"),
      integer("base_channels", 16, 2, 1024, "channels at the first level"),
      integer("vit_depth", 2, 0, 48, "bottleneck transformer layers"),
      integer("vit_heads", 4, 1, 64, "bottleneck attention heads"),
      integer("vit_mlp_ratio", 2, 1, 16, "bottleneck feed-forward expansion"),
      integer("cqa_heads", 2, 1, 64, "condensed attention heads"),
      integer("cqa_r", 2, 1, 16, "condensation factor per spatial axis"),
      choice("cqa_target", "query", {"query", "key", "value"}, "projection the condensed tokens are pooled from"),
      choice("cqa_pool", "avg", {"avg", "max", "conv", "dwconv", "merge"},
             "condensation: avg/max pool + projection, strided conv, strided depthwise conv, patch merge"),
      // discriminator
      choice("discriminator", "D4", {"D1", "D2", "D3", "D4", "patchgan"},
             "D1 plain body, D2 +attention, D3 +body batchnorm, D4 attention + batch head, patchgan baseline"),
      integer("disc_base_channels", 16, 2, 1024, "discriminator channels at the first stage"),
      integer("cache_capacity", 3, 1, 64, "entries per feature cache"),
      // losses
      real("beta1", "1", 0, kBig, "adversarial weight"),
      real("beta2", "10", 0, kBig, "identity weight"),
      real("beta3", "0.5", 0, kBig, "cycle weight"),
      real("w_l1", "1", 0, kBig, "pixel loss: L1 weight"),
      real("w_ssim", "1", 0, kBig, "pixel loss: 1 - SSIM weight"),
      real("w_perceptual", "1", 0, kBig, "pixel loss: perceptual weight"),
      text("perceptual_weights", "", "checkpoint with percep.* tensors (empty: fixed random extractor)"),
      // pretraining
      integer("pretrain_epochs", 20, 1, 1e7, "masked-inpainting epochs"),
      integer("pretrain_batch", 16, 1, 4096, "pretraining batch size"),
      integer("crop", 32, 0, 4096, "training crop side (0: full image)"),
      integer("mask_block", 8, 1, 4096, "side of masked tiles"),
      real("mask_fraction", "0.4", 0, 1, "fraction of tiles zeroed"),
      real("pretrain_lr", "0.002", 1e-12, 1, "AdamW peak learning rate"),
      real("pretrain_weight_decay", "0.05", 0, 1, "AdamW decoupled weight decay"),
      real("T0", "10", 1, 1e7, "epochs of the first cosine cycle"),
      real("T_mult", "2", 1, 100, "cycle length multiplier"),
      integer("pretrain_max_steps", 0, 0, 1e12, "stop after this many steps (0: no limit)"),
      // adversarial training
      integer("epochs", 50, 1, 1e7, "adversarial epochs"),
      integer("batch", 1, 1, 4096, "adversarial batch size"),
      integer("steps_per_epoch", 0, 0, 1e9, "0: max(|train_A|, |train_B|) / batch"),
      integer("max_steps", 0, 0, 1e12, "stop after this many steps (0: no limit)"),
      real("gen_lr", "5e-5", 1e-12, 1, "generator Adam learning rate"),
      real("disc_lr", "1e-4", 1e-12, 1, "discriminator Adam learning rate"),
      real("adam_beta1", "0.5", 0, 0.999999, "adversarial Adam beta1"),
      real("adam_beta2", "0.99", 0, 0.999999, "adversarial Adam beta2"),
      integer("eval_every", 1, 0, 1e9, "paired test evaluation period in epochs (0: never)"),
      integer("save_every", 0, 0, 1e9, "intermediate checkpoint period in epochs (0: final only)"),
      boolean("flips", true, "random horizontal and vertical flips"),
      text("init", "", "checkpoint to start from: pretraining output or an adversarial run to resume"),
      // translate / eval
      text("checkpoint", "", "checkpoint used by translate and eval"),
      choice("direction", "A2B", {"A2B", "B2A"}, "translation direction"),
      text("input_dir", "", "translate input (empty: the source test split)"),
      text("output_dir", "", "translate output (empty: <run_dir>/translated)"),
      text("pred_dir", "", "eval: predictions; with gt_dir, compared file by file"),
      text("gt_dir", "", "eval: ground truth"),
      // ablate
      text("ablate_generators", "G1,G2,G3,G4,G5", "generator rows to run"),
      text("ablate_discriminators", "", "discriminator rows to run (empty: the discriminator key)"),
      text("ablate_cqa", "", "target:pool variants to run, e.g. query:avg,key:conv (empty: the cqa_* keys)"),
      text("ablate_seeds", "0", "seeds to run"),
      // bench
      text("bench_tokens", "256,1024,4096", "token counts N = H*W (perfect squares)"),
      integer("bench_channels", 32, 1, 4096, "attention width"),
      integer("bench_heads", 2, 1, 64, "attention heads"),
      integer("bench_reps", 3, 0, 1e6, "timed repetitions per point (0: count only)"),
      // gradcheck
      text("gradcheck_filter", "", "only cases whose name contains this"),
  };
  return schema;
}

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : config_schema())
    if (k.name == name) return &k;
  return nullptr;
}

RunConfig RunConfig::defaults() {
  RunConfig c;
  for (const auto& k : config_schema()) c.values_[k.name] = k.default_value;
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeySpec* k = find_key(key);
  if (!k) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = normalise(*k, value);
}

const std::string& RunConfig::text(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::integer(const std::string& key) const { return std::stoll(text(key)); }
std::uint64_t RunConfig::u64(const std::string& key) const { return std::stoull(text(key)); }
double RunConfig::real(const std::string& key) const { return std::stod(text(key)); }
bool RunConfig::boolean(const std::string& key) const { return text(key) == "true"; }

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& k : config_schema()) out += "# " + k.doc + "\n" + k.name + " = " + text(k.name) + "\n";
  return out;
}

const std::vector<std::pair<std::string, std::string>>& paper_scale_preset() {
  static const std::vector<std::pair<std::string, std::string>> preset = {
      {"pretrain_epochs", "500"}, {"epochs", "500"}, {"pretrain_lr", "0.005"}, {"crop", "0"}, {"mask_block", "32"}};
  return preset;
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  for (int no = 1; std::getline(is, line); ++no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(no) + ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(no) + ": missing key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

RunConfig parse_config(const std::optional<std::filesystem::path>& file,
                       const std::vector<std::pair<std::string, std::string>>& flags, bool paper_scale) {
  RunConfig c = RunConfig::defaults();
  if (paper_scale)
    for (const auto& [k, v] : paper_scale_preset()) c.set(k, v);
  if (file) {
    std::ifstream is(*file);
    if (!is) throw ConfigError("cannot read config file " + file->string());
    std::stringstream ss;
    ss << is.rdbuf();
    for (const auto& [k, v] : parse_config_text(ss.str())) c.set(k, v);
  }
  for (const auto& [k, v] : flags) c.set(k, v);
  return c;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ','))
    if (!(item = trim(item)).empty()) out.push_back(item);
  return out;
}

}  // namespace rawformer::cli
