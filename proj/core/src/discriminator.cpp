#include "rawformer/discriminator.hpp"

#include "rawformer/errors.hpp"

namespace rawformer {

using nn::Var;

std::string to_string(DiscriminatorArch a) { return a == DiscriminatorArch::rawformer ? "rawformer" : "patchgan"; }

DiscriminatorArch parse_discriminator_arch(const std::string& s) {
  if (s == "rawformer") return DiscriminatorArch::rawformer;
  if (s == "patchgan") return DiscriminatorArch::patchgan;
  throw ConfigError("unknown discriminator arch '" + s + "' (expected rawformer or patchgan)");
}

DiscriminatorConfig DiscriminatorConfig::ablation(int row) {
  if (row < 1 || row > 4) throw ConfigError("discriminator ablation row must be 1..4, got " + std::to_string(row));
  DiscriminatorConfig c;
  c.use_attention = row >= 2;
  c.use_batchnorm = row == 3;
  c.use_batch_head = row == 4;
  return c;
}

DiscriminatorConfig DiscriminatorConfig::patchgan() {
  DiscriminatorConfig c;
  c.arch = DiscriminatorArch::patchgan;
  c.use_attention = c.use_batchnorm = c.use_batch_head = false;
  return c;
}

void DiscriminatorConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("discriminator: " + m); };
  if (base_channels < 1) fail("base_channels must be >= 1");
  if (cache_capacity < 0) fail("cache capacity must be >= 0");
  if (arch == DiscriminatorArch::patchgan) {
    if (use_attention || use_batchnorm || use_batch_head)
      fail("patchgan takes no attention/batchnorm/batch-head toggles");
    return;
  }
  if (use_attention && (cqa.heads < 1 || base_channels % cqa.heads != 0)) fail("cqa_heads must divide base_channels");
}

void FeatureCache::push(const nn::Tensor<float>& features) {
  if (!entries_.empty() && entries_.front().shape() != features.shape())
    throw DimensionError("feature cache holds " + nn::to_string(entries_.front().shape()) + ", cannot push " +
                         nn::to_string(features.shape()));
  if (capacity_ == 0) return;
  entries_.push_back(features);
  while (entries_.size() > static_cast<std::size_t>(capacity_)) entries_.pop_front();
}

std::string to_string(CacheKey k) {
  switch (k) {
    case CacheKey::real_A: return "real_A";
    case CacheKey::real_B: return "real_B";
    case CacheKey::fake_A: return "fake_A";
    case CacheKey::fake_B: return "fake_B";
  }
  return "?";
}

CacheKey parse_cache_key(const std::string& s) {
  for (CacheKey k : {CacheKey::real_A, CacheKey::real_B, CacheKey::fake_A, CacheKey::fake_B})
    if (to_string(k) == s) return k;
  throw KeyError("unknown feature cache '" + s + "'");
}

namespace {
constexpr int kStages = 3;
constexpr float kSlope = 0.2f;
}  // namespace

template <typename T>
void add_discriminator_params(const DiscriminatorConfig& cfg, nn::ParamSet<T>& params) {
  cfg.validate();
  nn::Initializer<T> init(params, cfg.seed);
  const int c = cfg.base_channels;
  if (cfg.arch == DiscriminatorArch::patchgan) {
    int cin = 3;
    for (int s = 0; s < kStages; ++s) {
      init.conv("pg.conv" + std::to_string(s), c << s, cin, 4, 4);
      cin = c << s;
    }
    init.conv("pg.logit", 1, cin, 3, 3);
    return;
  }
  init.conv("stem", c, 3, 3, 3);
  for (int s = 0; s < kStages; ++s) {
    const std::string p = "body" + std::to_string(s);
    const int ch = c << s;
    if (cfg.use_attention) {
      init.norm(p + ".norm", ch);
      nn::add_cqa(init, p + ".cqa", ch, cfg.cqa);
    }
    init.conv(p + ".down", 2 * ch, ch, 3, 3);
    if (cfg.use_batchnorm) init.norm(p + ".bn", 2 * ch);
  }
  const int cf = c << kStages;
  if (cfg.use_batch_head) {
    init.norm("head.bn", cf);
    init.conv("head.conv1", cf, cf, 3, 3);
    init.conv("head.conv2", 1, cf, 3, 3);
  } else {
    init.conv("logit", 1, cf, 3, 3);
  }
}

DiscriminatorState build_discriminator(const DiscriminatorConfig& cfg) {
  DiscriminatorState d;
  d.config = cfg;
  add_discriminator_params(cfg, d.params);
  for (auto& cache : d.caches) cache = FeatureCache(cfg.cache_capacity);
  return d;
}

template <typename T>
DiscriminatorOutput<T> discriminator_forward(const DiscriminatorConfig& cfg, nn::ParamSet<T>& params,
                                             nn::Tape<T>& tape, Var<T> x, std::span<const nn::Tensor<T>> cached,
                                             bool trainable) {
  const nn::Shape xs = x.value().shape();
  const int multiple = 1 << kStages;
  if (xs.c != 3 || xs.h % multiple != 0 || xs.w % multiple != 0)
    throw DimensionError("discriminator: input " + nn::to_string(xs) + " needs 3 channels and sides divisible by " +
                         std::to_string(multiple));
  const nn::Binder<T> b(tape, params, trainable);
  DiscriminatorOutput<T> out;
  out.head_batch = xs.n;

  if (cfg.arch == DiscriminatorArch::patchgan) {
    Var<T> h = x;
    for (int s = 0; s < kStages; ++s) h = nn::leaky_relu(b.conv("pg.conv" + std::to_string(s), h, {2, 1, 1}), T(kSlope));
    out.features = h;
    out.logits = b.conv("pg.logit", h);
    return out;
  }

  Var<T> h = nn::leaky_relu(b.conv("stem", x), T(kSlope));
  for (int s = 0; s < kStages; ++s) {
    const std::string p = "body" + std::to_string(s);
    if (b.has(p + ".cqa.q.weight")) h = nn::add(h, nn::cqa_block(b, p + ".cqa", b.layer_norm(p + ".norm", h), cfg.cqa));
    h = b.conv(p + ".down", h, {2, 1, 1});
    if (b.has(p + ".bn.weight")) h = b.batch_norm(p + ".bn", h);
    h = nn::leaky_relu(h, T(kSlope));
  }
  out.features = h;

  if (!b.has("head.bn.weight")) {
    out.logits = b.conv("logit", h);
    return out;
  }
  Var<T> batch = h;
  if (!cached.empty()) {
    std::vector<Var<T>> parts{h};
    for (const auto& f : cached) {
      if (f.shape().c != h.value().shape().c || f.shape().h != h.value().shape().h ||
          f.shape().w != h.value().shape().w)
        throw DimensionError("discriminator: cached features " + nn::to_string(f.shape()) + " do not match " +
                             nn::to_string(h.value().shape()));
      parts.push_back(tape.constant(f));
    }
    batch = nn::concat(parts, 0);
  }
  out.head_batch = batch.value().shape().n;
  Var<T> z = b.batch_norm("head.bn", batch);
  z = nn::leaky_relu(b.conv("head.conv1", z), T(kSlope));
  z = b.conv("head.conv2", z);
  out.logits = out.head_batch == xs.n ? z : nn::slice(z, 0, 0, xs.n);
  return out;
}

DiscriminatorOutput<float> discriminator_forward(DiscriminatorState& d, nn::Tape<float>& tape, Var<float> x,
                                                 CacheKey key, bool update_cache, bool trainable) {
  FeatureCache& cache = d.cache(key);
  std::vector<nn::Tensor<float>> cached(cache.entries().begin(), cache.entries().end());
  auto out = discriminator_forward<float>(d.config, d.params, tape, x, cached, trainable);
  if (update_cache) cache.push(out.features.value());
  return out;
}

template void add_discriminator_params(const DiscriminatorConfig&, nn::ParamSet<float>&);
template void add_discriminator_params(const DiscriminatorConfig&, nn::ParamSet<double>&);
template DiscriminatorOutput<float> discriminator_forward(const DiscriminatorConfig&, nn::ParamSet<float>&,
                                                          nn::Tape<float>&, Var<float>,
                                                          std::span<const nn::Tensor<float>>, bool);
template DiscriminatorOutput<double> discriminator_forward(const DiscriminatorConfig&, nn::ParamSet<double>&,
                                                           nn::Tape<double>&, Var<double>,
                                                           std::span<const nn::Tensor<double>>, bool);

}  // namespace rawformer
