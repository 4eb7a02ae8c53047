#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rawformer/generator.hpp"
#include "rawformer/imgio.hpp"
#include "rawformer/synthcam.hpp"

namespace rawformer {

inline constexpr double kPsnrCap = 100.0;

struct ScalarMetrics {
  double psnr = 0.0;  // dB, 10 log10(1 / MSE), capped when MSE < 1e-10
  double mae = 0.0;
  double mse = 0.0;
};

ScalarMetrics scalar_metrics(const ImageTensor& x, const ImageTensor& y);
double psnr(const ImageTensor& x, const ImageTensor& y);
/// Mean Gaussian-window SSIM evaluated in double precision.
double ssim(const ImageTensor& x, const ImageTensor& y);

struct Lab {
  double L = 0.0, a = 0.0, b = 0.0;
};

/// CIEDE2000 colour difference with kL = kC = kH = 1.
double ciede2000(const Lab& x, const Lab& y);
/// Linear RGB -> XYZ (sRGB primaries, D65) -> CIELAB (D65 white).
Lab linear_rgb_to_lab(double r, double g, double b);
/// Pixel mean of CIEDE2000 between two 3-channel linear-RGB images.
double delta_e2000(const ImageTensor& x, const ImageTensor& y);

struct MetricsRow {
  std::string file;
  double psnr = 0.0, ssim = 0.0, mae = 0.0, delta_e = 0.0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;  // sorted by file name
  MetricsRow mean{"MEAN"};

  std::size_t count() const noexcept { return rows.size(); }
  /// `file,psnr,ssim,mae,deltaE` with a closing MEAN row.
  std::string csv() const;
};

MetricsRow compare_images(const std::string& name, const ImageTensor& pred, const ImageTensor& gt);
MetricsReport summarize(std::vector<MetricsRow> rows);

/// Compares same-named `.rawimg` files of two directories. IoError naming
/// the unmatched files when the name sets differ or no files are present.
MetricsReport evaluate_pairs(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir);

struct CrossDomainCell {
  std::string source, target;
  std::optional<double> psnr, ssim;  // empty when no translator was supplied
};

/// Camera names are "A" and "B". For every (source, target) the source test
/// raws are translated (skipped on the diagonal), rendered by the target's
/// ISP proxy and scored against the noise-free scene captured and rendered
/// natively by the target. Translators are keyed (source, target).
std::vector<CrossDomainCell> cross_domain_eval(
    const DatasetManifest& data, const std::map<std::pair<std::string, std::string>, GeneratorWeights*>& translators);

/// `source,target,psnr,ssim`; absent cells leave the scores empty.
std::string cross_domain_csv(const std::vector<CrossDomainCell>& cells);

}  // namespace rawformer
