#include "rawformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "rawformer/errors.hpp"
#include "rawformer/losses.hpp"

namespace rawformer {

namespace {

void require_same_shape(const char* op, const ImageTensor& x, const ImageTensor& y) {
  if (x.shape() != y.shape())
    throw DimensionError(std::string(op) + ": shapes " + nn::to_string(x.shape()) + " and " + nn::to_string(y.shape()) +
                         " differ");
}

constexpr double deg(double rad) { return rad * 180.0 / M_PI; }
constexpr double rad(double deg) { return deg * M_PI / 180.0; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

ScalarMetrics scalar_metrics(const ImageTensor& x, const ImageTensor& y) {
  require_same_shape("scalar_metrics", x, y);
  if (x.size() == 0) throw DimensionError("scalar_metrics: empty images");
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - y[i];
    se += d * d;
    ae += std::abs(d);
  }
  ScalarMetrics m;
  m.mse = se / x.size();
  m.mae = ae / x.size();
  m.psnr = m.mse < 1e-10 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / m.mse));
  return m;
}

double psnr(const ImageTensor& x, const ImageTensor& y) { return scalar_metrics(x, y).psnr; }

double ssim(const ImageTensor& x, const ImageTensor& y) {
  require_same_shape("ssim", x, y);
  nn::Tape<double> tape;
  return ssim_index(tape.constant(x.cast<double>()), tape.constant(y.cast<double>())).value()[0];
}

double ciede2000(const Lab& x, const Lab& y) {
  const double c1 = std::hypot(x.a, x.b), c2 = std::hypot(y.a, y.b);
  const double cbar = 0.5 * (c1 + c2);
  const double cbar7 = std::pow(cbar, 7);
  const double g = 0.5 * (1 - std::sqrt(cbar7 / (cbar7 + std::pow(25.0, 7))));
  const double a1 = (1 + g) * x.a, a2 = (1 + g) * y.a;
  const double cp1 = std::hypot(a1, x.b), cp2 = std::hypot(a2, y.b);
  auto hue = [](double b, double a) {
    if (a == 0 && b == 0) return 0.0;
    const double h = deg(std::atan2(b, a));
    return h < 0 ? h + 360 : h;
  };
  const double hp1 = hue(x.b, a1), hp2 = hue(y.b, a2);

  const double dL = y.L - x.L;
  const double dC = cp2 - cp1;
  double dh = 0.0;
  if (cp1 * cp2 != 0) {
    dh = hp2 - hp1;
    if (dh > 180) dh -= 360;
    else if (dh < -180) dh += 360;
  }
  const double dH = 2 * std::sqrt(cp1 * cp2) * std::sin(rad(dh / 2));

  const double Lbar = 0.5 * (x.L + y.L);
  const double cpbar = 0.5 * (cp1 + cp2);
  double hbar = hp1 + hp2;
  if (cp1 * cp2 != 0) {
    if (std::abs(hp1 - hp2) <= 180) hbar *= 0.5;
    else if (hp1 + hp2 < 360) hbar = 0.5 * (hp1 + hp2 + 360);
    else hbar = 0.5 * (hp1 + hp2 - 360);
  }
  const double t = 1 - 0.17 * std::cos(rad(hbar - 30)) + 0.24 * std::cos(rad(2 * hbar)) +
                   0.32 * std::cos(rad(3 * hbar + 6)) - 0.20 * std::cos(rad(4 * hbar - 63));
  const double dtheta = 30 * std::exp(-std::pow((hbar - 275) / 25, 2));
  const double cpbar7 = std::pow(cpbar, 7);
  const double rc = 2 * std::sqrt(cpbar7 / (cpbar7 + std::pow(25.0, 7)));
  const double l50 = (Lbar - 50) * (Lbar - 50);
  const double sl = 1 + 0.015 * l50 / std::sqrt(20 + l50);
  const double sc = 1 + 0.045 * cpbar;
  const double sh = 1 + 0.015 * cpbar * t;
  const double rt = -std::sin(rad(2 * dtheta)) * rc;

  const double tl = dL / sl, tc = dC / sc, th = dH / sh;
  return std::sqrt(tl * tl + tc * tc + th * th + rt * tc * th);
}

Lab linear_rgb_to_lab(double r, double g, double b) {
  const double X = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double Y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double Z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  constexpr double delta = 6.0 / 29.0;
  auto f = [](double t) {
    return t > delta * delta * delta ? std::cbrt(t) : t / (3 * delta * delta) + 4.0 / 29.0;
  };
  const double fx = f(X / 0.95047), fy = f(Y / 1.0), fz = f(Z / 1.08883);
  return {116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)};
}

double delta_e2000(const ImageTensor& x, const ImageTensor& y) {
  require_same_shape("delta_e2000", x, y);
  const nn::Shape s = x.shape();
  if (s.c != 3) throw DimensionError("delta_e2000: expected 3 channels, got " + nn::to_string(s));
  const std::size_t plane = s.plane();
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const float* px = x.plane(n, 0);
    const float* py = y.plane(n, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      const Lab lx = linear_rgb_to_lab(px[i], px[plane + i], px[2 * plane + i]);
      const Lab ly = linear_rgb_to_lab(py[i], py[plane + i], py[2 * plane + i]);
      total += ciede2000(lx, ly);
    }
  }
  return total / (static_cast<double>(plane) * s.n);
}

MetricsRow compare_images(const std::string& name, const ImageTensor& pred, const ImageTensor& gt) {
  const ScalarMetrics m = scalar_metrics(pred, gt);
  return {name, m.psnr, ssim(pred, gt), m.mae, delta_e2000(pred, gt)};
}

MetricsReport summarize(std::vector<MetricsRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.file < b.file; });
  MetricsReport r;
  r.rows = std::move(rows);
  if (r.rows.empty()) return r;
  for (const auto& row : r.rows) {
    r.mean.psnr += row.psnr;
    r.mean.ssim += row.ssim;
    r.mean.mae += row.mae;
    r.mean.delta_e += row.delta_e;
  }
  const double n = static_cast<double>(r.rows.size());
  r.mean.psnr /= n;
  r.mean.ssim /= n;
  r.mean.mae /= n;
  r.mean.delta_e /= n;
  return r;
}

std::string MetricsReport::csv() const {
  std::string out = "file,psnr,ssim,mae,deltaE\n";
  auto line = [&](const MetricsRow& r) {
    out += r.file + "," + fmt(r.psnr) + "," + fmt(r.ssim) + "," + fmt(r.mae) + "," + fmt(r.delta_e) + "\n";
  };
  for (const auto& r : rows) line(r);
  line(mean);
  return out;
}

MetricsReport evaluate_pairs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir) {
  std::set<std::string> pred, gt;
  for (const auto& p : list_rawimg(pred_dir)) pred.insert(p.filename().string());
  for (const auto& p : list_rawimg(gt_dir)) gt.insert(p.filename().string());
  std::string missing;
  for (const auto& f : pred)
    if (!gt.count(f)) missing += " " + f + " (no ground truth)";
  for (const auto& f : gt)
    if (!pred.count(f)) missing += " " + f + " (no prediction)";
  if (!missing.empty()) throw IoError("evaluate: file sets differ:" + missing);
  if (pred.empty()) throw IoError("evaluate: no .rawimg files in " + pred_dir.string());
  std::vector<MetricsRow> rows;
  for (const auto& f : pred) rows.push_back(compare_images(f, read_rawimg(pred_dir / f), read_rawimg(gt_dir / f)));
  return summarize(std::move(rows));
}

std::vector<CrossDomainCell> cross_domain_eval(
    const DatasetManifest& data, const std::map<std::pair<std::string, std::string>, GeneratorWeights*>& translators) {
  const std::map<std::string, const CameraModel*> cams{{"A", &data.camera_a}, {"B", &data.camera_b}};
  std::vector<CrossDomainCell> cells;
  for (const auto& [src, src_cam] : cams) {
    const std::string split = "test_" + src;
    const auto files = data.files(split);
    for (const auto& [dst, dst_cam] : cams) {
      CrossDomainCell cell{src, dst, std::nullopt, std::nullopt};
      GeneratorWeights* g = nullptr;
      if (src != dst) {
        auto it = translators.find({src, dst});
        if (it == translators.end() || it->second == nullptr) {
          cells.push_back(cell);
          continue;
        }
        g = it->second;
      }
      CameraModel clean = *dst_cam;
      clean.read_noise_std = clean.shot_noise_scale = 0.0;
      double sum_psnr = 0.0, sum_ssim = 0.0;
      for (std::size_t i = 0; i < files.size(); ++i) {
        const std::string rel = data.splits.at(split)[i];
        ImageTensor raw = read_rawimg(files[i]);
        if (g) raw = generator_apply(*g, raw);
        const ImageTensor rendered = render_isp_proxy(raw, *dst_cam);
        const ImageTensor scene = make_scene(data.scene_seeds.at(rel), data.image_size);
        const ImageTensor reference = render_isp_proxy(capture_raw(scene, clean, 0), *dst_cam);
        sum_psnr += psnr(rendered, reference);
        sum_ssim += ssim(rendered, reference);
      }
      if (!files.empty()) {
        cell.psnr = sum_psnr / files.size();
        cell.ssim = sum_ssim / files.size();
      }
      cells.push_back(cell);
    }
  }
  return cells;
}

std::string cross_domain_csv(const std::vector<CrossDomainCell>& cells) {
  std::string out = "source,target,psnr,ssim\n";
  for (const auto& c : cells)
    out += c.source + "," + c.target + "," + (c.psnr ? fmt(*c.psnr) : "") + "," + (c.ssim ? fmt(*c.ssim) : "") + "\n";
  return out;
}

}  // namespace rawformer
