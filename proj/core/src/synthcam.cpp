#include "rawformer/synthcam.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "rawformer/errors.hpp"
#include "rawformer/rng.hpp"

namespace rawformer {

namespace fs = std::filesystem;

void CameraModel::validate() const {
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(response);
  const auto sv = svd.singularValues();
  if (!(sv(2) > 0.0) || sv(0) / sv(2) >= 100.0)
    throw ModelError("camera '" + name + "': response matrix is not well conditioned");
  if ((gains.array() <= 0.0).any()) throw ModelError("camera '" + name + "': gains must be positive");
  if (!(black_level >= 0.0 && black_level <= 0.2))
    throw ModelError("camera '" + name + "': black level must lie in [0, 0.2]");
  if (read_noise_std < 0.0 || shot_noise_scale < 0.0)
    throw ModelError("camera '" + name + "': noise parameters must be non-negative");
}

CameraModel CameraModel::with_native_render() const {
  CameraModel c = *this;
  c.wb = gains.cwiseInverse();
  c.ccm = response.inverse();
  return c;
}

CameraModel default_camera_a() {
  CameraModel c;
  c.name = "A";
  c.black_level = 0.02;
  return c.with_native_render();
}

CameraModel default_camera_b() {
  CameraModel c;
  c.name = "B";
  c.response << 0.85, 0.12, 0.03, 0.06, 0.88, 0.06, 0.02, 0.15, 0.83;
  c.gains << 1.3, 1.0, 1.6;
  c.black_level = 0.04;
  return c.with_native_render();
}

ImageTensor make_scene(std::uint64_t seed, int size) {
  if (size < 32) throw ParameterError("make_scene: size must be >= 32");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  ImageTensor img = make_image(3, size, size);
  double base[3];
  for (double& b : base) b = uni(0.3, 0.5);

  // Low-frequency sinusoidal fields and a linear gradient per channel.
  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[3][3];
  double grad[3][2];
  for (int c = 0; c < 3; ++c) {
    for (auto& w : waves[c]) {
      const double freq = uni(0.5, 2.0), angle = uni(0.0, 2.0 * std::numbers::pi);
      w = {freq * std::cos(angle), freq * std::sin(angle), uni(0.0, 2.0 * std::numbers::pi), uni(0.02, 0.06)};
    }
    grad[c][0] = uni(-0.1, 0.1);
    grad[c][1] = uni(-0.1, 0.1);
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double ny = static_cast<double>(y) / size, nx = static_cast<double>(x) / size;
        double v = base[c] + grad[c][0] * (nx - 0.5) + grad[c][1] * (ny - 0.5);
        for (const auto& w : waves[c]) v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * nx + w.fy * ny) + w.phase);
        img.at(0, c, y, x) = static_cast<float>(v);
      }

  // Flat-coloured rectangles give hard edges.
  const int rects = 3 + static_cast<int>(rng() % 4);
  for (int r = 0; r < rects; ++r) {
    const int h = size / 8 + static_cast<int>(rng() % static_cast<unsigned>(size / 2 - size / 8 + 1));
    const int w = size / 8 + static_cast<int>(rng() % static_cast<unsigned>(size / 2 - size / 8 + 1));
    const int y0 = static_cast<int>(rng() % static_cast<unsigned>(size - h + 1));
    const int x0 = static_cast<int>(rng() % static_cast<unsigned>(size - w + 1));
    float colour[3];
    for (float& c : colour) c = static_cast<float>(uni(0.2, 0.6));
    for (int c = 0; c < 3; ++c)
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) img.at(0, c, y, x) = colour[c];
  }
  for (auto& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

ImageTensor capture_raw(const ImageTensor& scene, const CameraModel& cam, std::uint64_t seed) {
  const nn::Shape s = scene.shape();
  if (s.n != 1 || s.c != 3) throw DimensionError("capture_raw: expected a 3-channel scene, got " + nn::to_string(s));
  const bool noisy = cam.read_noise_std > 0.0 || cam.shot_noise_scale > 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ImageTensor raw(s);
  const std::size_t plane = s.plane();
  const float* src = scene.data();
  float* dst = raw.data();
  for (std::size_t i = 0; i < plane; ++i) {
    const Eigen::Vector3d p(src[i], src[plane + i], src[2 * plane + i]);
    const Eigen::Vector3d signal = cam.gains.cwiseProduct(cam.response * p);
    for (int c = 0; c < 3; ++c) {
      double v = signal(c) + cam.black_level;
      if (noisy) {
        const double var = cam.read_noise_std * cam.read_noise_std + cam.shot_noise_scale * std::max(signal(c), 0.0);
        v += std::sqrt(var) * normal(rng);
      }
      dst[c * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return raw;
}

ImageTensor render_isp_proxy(const ImageTensor& raw, const CameraModel& cam) {
  const nn::Shape s = raw.shape();
  if (s.c != 3) throw DimensionError("render_isp_proxy: expected 3 channels, got " + nn::to_string(s));
  ImageTensor out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const float* src = raw.plane(n, 0);
    float* dst = out.plane(n, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      const Eigen::Vector3d p(src[i], src[plane + i], src[2 * plane + i]);
      const Eigen::Vector3d lin = cam.ccm * (cam.wb.array() * (p.array() - cam.black_level)).matrix();
      for (int c = 0; c < 3; ++c)
        dst[c * plane + i] = static_cast<float>(std::pow(std::clamp(lin(c), 0.0, 1.0), 1.0 / 2.2));
    }
  }
  return out;
}

ImageTensor analytic_translate(const ImageTensor& raw, const CameraModel& from, const CameraModel& to) {
  const nn::Shape s = raw.shape();
  if (s.c != 3) throw DimensionError("analytic_translate: expected 3 channels, got " + nn::to_string(s));
  const Eigen::Matrix3d m = to.response * from.response.inverse();
  ImageTensor out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const float* src = raw.plane(n, 0);
    float* dst = out.plane(n, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      const Eigen::Vector3d p(src[i], src[plane + i], src[2 * plane + i]);
      const Eigen::Vector3d scene_sig = ((p.array() - from.black_level) / from.gains.array()).matrix();
      const Eigen::Vector3d q = to.gains.cwiseProduct(m * scene_sig);
      for (int c = 0; c < 3; ++c) dst[c * plane + i] = static_cast<float>(std::clamp(q(c) + to.black_level, 0.0, 1.0));
    }
  }
  return out;
}

// ---- dataset -------------------------------------------------------------------

std::vector<fs::path> DatasetManifest::files(const std::string& split) const {
  auto it = splits.find(split);
  if (it == splits.end()) throw KeyError("dataset has no split '" + split + "'");
  std::vector<fs::path> out;
  out.reserve(it->second.size());
  for (const auto& f : it->second) out.push_back(root / f);
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename M>
std::string join(const M& m) {
  std::string s;
  for (Eigen::Index i = 0; i < m.size(); ++i) s += (i ? " " : "") + fmt(m.data()[i]);
  return s;
}

void write_camera(std::ostream& os, const std::string& key, const CameraModel& c) {
  // Matrices are written row-major.
  const Eigen::Matrix<double, 3, 3, Eigen::RowMajor> r = c.response, ccm = c.ccm;
  os << key << ".name=" << c.name << "\n"
     << key << ".response=" << join(r) << "\n"
     << key << ".gains=" << join(c.gains) << "\n"
     << key << ".black_level=" << fmt(c.black_level) << "\n"
     << key << ".read_noise_std=" << fmt(c.read_noise_std) << "\n"
     << key << ".shot_noise_scale=" << fmt(c.shot_noise_scale) << "\n"
     << key << ".ccm=" << join(ccm) << "\n"
     << key << ".wb=" << join(c.wb) << "\n";
}

std::vector<double> parse_numbers(const std::string& key, const std::string& v, std::size_t count) {
  std::istringstream is(v);
  std::vector<double> out;
  double x;
  while (is >> x) out.push_back(x);
  if (out.size() != count) throw IoError("manifest: key '" + key + "' expects " + std::to_string(count) + " numbers");
  return out;
}

bool populated(const fs::path& root) {
  if (!fs::exists(root)) return false;
  if (fs::exists(root / "manifest.txt")) return true;
  for (const char* split : kSplits)
    if (fs::is_directory(root / split) && !fs::is_empty(root / split)) return true;
  return false;
}

}  // namespace

DatasetManifest generate_dataset(const DatasetConfig& cfg) {
  cfg.camera_a.validate();
  cfg.camera_b.validate();
  if (cfg.n_train < 1 || cfg.n_test < 0) throw ConfigError("dataset: need n_train >= 1 and n_test >= 0");
  if (populated(cfg.root)) {
    if (!cfg.overwrite)
      throw ConfigError("dataset root " + cfg.root.string() + " is already populated (set overwrite to replace it)");
    fs::remove(cfg.root / "manifest.txt");
    for (const char* split : kSplits) fs::remove_all(cfg.root / split);
  }
  for (const char* split : kSplits) fs::create_directories(cfg.root / split);

  CameraModel cam_a = cfg.camera_a, cam_b = cfg.camera_b;
  if (cfg.noise) {
    for (CameraModel* c : {&cam_a, &cam_b}) {
      if (c->read_noise_std == 0.0) c->read_noise_std = 0.005;
      if (c->shot_noise_scale == 0.0) c->shot_noise_scale = 1e-4;
    }
  } else {
    for (CameraModel* c : {&cam_a, &cam_b}) c->read_noise_std = c->shot_noise_scale = 0.0;
  }

  DatasetManifest m;
  m.root = cfg.root;
  m.seed = cfg.seed;
  m.image_size = cfg.image_size;
  m.camera_a = cam_a;
  m.camera_b = cam_b;

  auto emit = [&](const std::string& split, int index, std::uint64_t scene_seed, const CameraModel& cam) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.rawimg", index);
    const std::string rel = split + "/" + name;
    const ImageTensor scene = make_scene(scene_seed, cfg.image_size);
    write_rawimg(cfg.root / rel, capture_raw(scene, cam, derive_seed(cfg.seed, "noise/" + split, index)));
    m.splits[split].push_back(rel);
    m.scene_seeds[rel] = scene_seed;
  };
  for (int i = 0; i < cfg.n_train; ++i) emit("train_A", i, derive_seed(cfg.seed, "scene/train_A", i), cam_a);
  for (int i = 0; i < cfg.n_train; ++i) emit("train_B", i, derive_seed(cfg.seed, "scene/train_B", i), cam_b);
  for (int i = 0; i < cfg.n_test; ++i) {
    const std::uint64_t s = derive_seed(cfg.seed, "scene/test", i);
    emit("test_A", i, s, cam_a);
    emit("test_B", i, s, cam_b);
  }
  for (const char* split : kSplits) m.splits[split];  // present even when empty

  std::ofstream os(cfg.root / "manifest.txt");
  if (!os) throw IoError("cannot write manifest in " + cfg.root.string());
  os << "format=rawformer-dataset\nversion=1\n"
     << "seed=" << cfg.seed << "\nimage_size=" << cfg.image_size << "\nn_train=" << cfg.n_train
     << "\nn_test=" << cfg.n_test << "\nnoise=" << (cfg.noise ? 1 : 0) << "\n";
  write_camera(os, "camera_A", cam_a);
  write_camera(os, "camera_B", cam_b);
  for (const char* split : kSplits)
    for (const auto& rel : m.splits[split]) os << "file=" << rel << "," << m.scene_seeds[rel] << "\n";
  if (!os) throw IoError("manifest write failed in " + cfg.root.string());
  return m;
}

DatasetManifest load_manifest(const fs::path& root) {
  std::ifstream is(root / "manifest.txt");
  if (!is) throw IoError("no dataset manifest in " + root.string());
  DatasetManifest m;
  m.root = root;
  for (const char* split : kSplits) m.splits[split];
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("manifest: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "file") {
      const auto comma = value.find(',');
      const std::string rel = value.substr(0, comma);
      const auto slash = rel.find('/');
      if (slash == std::string::npos) throw IoError("manifest: bad file entry '" + value + "'");
      m.splits[rel.substr(0, slash)].push_back(rel);
      if (comma != std::string::npos) m.scene_seeds[rel] = std::stoull(value.substr(comma + 1));
    } else if (key == "seed") {
      m.seed = std::stoull(value);
    } else if (key == "image_size") {
      m.image_size = std::stoi(value);
    } else if (key.starts_with("camera_A.") || key.starts_with("camera_B.")) {
      CameraModel& c = key[7] == 'A' ? m.camera_a : m.camera_b;
      const std::string field = key.substr(9);
      if (field == "name") c.name = value;
      else if (field == "response" || field == "ccm") {
        const auto v = parse_numbers(key, value, 9);
        Eigen::Matrix3d& mat = field == "response" ? c.response : c.ccm;
        for (int r = 0; r < 3; ++r)
          for (int k = 0; k < 3; ++k) mat(r, k) = v[r * 3 + k];
      } else if (field == "gains" || field == "wb") {
        const auto v = parse_numbers(key, value, 3);
        (field == "gains" ? c.gains : c.wb) = Eigen::Vector3d(v[0], v[1], v[2]);
      } else if (field == "black_level") c.black_level = std::stod(value);
      else if (field == "read_noise_std") c.read_noise_std = std::stod(value);
      else if (field == "shot_noise_scale") c.shot_noise_scale = std::stod(value);
    }
  }
  return m;
}

}  // namespace rawformer
