#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rawformer/imgio.hpp"

namespace rawformer {

/// Synthetic sensor: raw = clip(gains * (response * scene) + black + noise, 0, 1).
/// `ccm` and `wb` drive the analytic ISP render.
struct CameraModel {
  std::string name;
  Eigen::Matrix3d response = Eigen::Matrix3d::Identity();
  Eigen::Vector3d gains = Eigen::Vector3d::Ones();
  double black_level = 0.0;
  double read_noise_std = 0.0;
  double shot_noise_scale = 0.0;
  Eigen::Matrix3d ccm = Eigen::Matrix3d::Identity();
  Eigen::Vector3d wb = Eigen::Vector3d::Ones();

  /// Throws ModelError on a near-singular response (condition >= 100),
  /// non-positive gains, negative noise or black level outside [0, 0.2].
  void validate() const;

  /// Same camera with the render matrices set to undo response and gains,
  /// so a noise-free capture renders back to the gamma-encoded scene.
  CameraModel with_native_render() const;
};

CameraModel default_camera_a();
CameraModel default_camera_b();

/// Smooth fields, linear gradients and flat rectangles; 3 x size x size in [0,1].
ImageTensor make_scene(std::uint64_t seed, int size);

ImageTensor capture_raw(const ImageTensor& scene, const CameraModel& cam, std::uint64_t seed);

/// clip(ccm * (wb .* (raw - black)), 0, 1)^(1/2.2).
ImageTensor render_isp_proxy(const ImageTensor& raw, const CameraModel& cam);

/// Closed-form noise-free mapping of camera `from` raws into camera `to`:
/// clip(g_to .* (R_to R_from^-1 ((x - k_from) / g_from)) + k_to, 0, 1).
ImageTensor analytic_translate(const ImageTensor& raw, const CameraModel& from, const CameraModel& to);

struct DatasetConfig {
  std::filesystem::path root;
  int n_train = 32;
  int n_test = 8;
  int image_size = 64;
  std::uint64_t seed = 0;
  bool noise = false;
  bool overwrite = false;
  CameraModel camera_a = default_camera_a();
  CameraModel camera_b = default_camera_b();
};

struct DatasetManifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  int image_size = 0;
  CameraModel camera_a, camera_b;
  /// Relative file paths per split: train_A, train_B, test_A, test_B.
  std::map<std::string, std::vector<std::string>> splits;
  /// Scene seed of every file, keyed by relative path.
  std::map<std::string, std::uint64_t> scene_seeds;

  std::vector<std::filesystem::path> files(const std::string& split) const;
};

inline const char* const kSplits[] = {"train_A", "train_B", "test_A", "test_B"};

/// Writes root/{train_A,train_B,test_A,test_B}/*.rawimg and root/manifest.txt.
/// Refuses (ConfigError) to touch a populated root unless `overwrite`.
DatasetManifest generate_dataset(const DatasetConfig& cfg);

DatasetManifest load_manifest(const std::filesystem::path& root);

}  // namespace rawformer
