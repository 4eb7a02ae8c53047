#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <set>

#include "rawformer/errors.hpp"
#include "rawformer/synthcam.hpp"
#include "scratch.hpp"

using namespace rawformer;

namespace {

CameraModel identity_camera() {
  CameraModel c;
  c.name = "I";
  return c;
}

// Response inverse applied pixelwise: scene = R^-1 ((raw - k) / g).
ImageTensor invert_camera(const ImageTensor& raw, const CameraModel& cam) {
  const Eigen::Matrix3d rinv = cam.response.inverse();
  ImageTensor out(raw.shape());
  const auto s = raw.shape();
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      Eigen::Vector3d p;
      for (int c = 0; c < 3; ++c) p(c) = (raw.at(0, c, y, x) - cam.black_level) / cam.gains(c);
      const Eigen::Vector3d q = rinv * p;
      for (int c = 0; c < 3; ++c) out.at(0, c, y, x) = static_cast<float>(q(c));
    }
  return out;
}

}  // namespace

TEST_SUITE("synthcam") {
  TEST_CASE("default cameras satisfy the camera invariants") {
    for (const CameraModel& c : {default_camera_a(), default_camera_b()}) {
      CHECK_NOTHROW(c.validate());
      Eigen::JacobiSVD<Eigen::Matrix3d> svd(c.response);
      CHECK(svd.singularValues()(0) / svd.singularValues()(2) < 100.0);
      CHECK((c.gains.array() > 0).all());
      CHECK(c.read_noise_std >= 0);
      CHECK(c.shot_noise_scale >= 0);
    }
  }

  TEST_CASE("invalid cameras are rejected") {
    CameraModel c = identity_camera();
    c.response(2, 2) = 1e-4;
    CHECK_THROWS_AS(c.validate(), ModelError);
    c = identity_camera();
    c.gains(1) = 0;
    CHECK_THROWS_AS(c.validate(), ModelError);
    c = identity_camera();
    c.read_noise_std = -1;
    CHECK_THROWS_AS(c.validate(), ModelError);
  }

  TEST_CASE("make_scene is deterministic") {
    const ImageTensor a = make_scene(7, 64), b = make_scene(7, 64);
    CHECK(a.storage() == b.storage());
    CHECK(a.shape() == nn::Shape{1, 3, 64, 64});
    CHECK(make_scene(8, 64).storage() != a.storage());
  }

  TEST_CASE("scenes stay inside [0,1] for 100 seeds") {
    for (std::uint64_t s = 0; s < 100; ++s) {
      const ImageTensor img = make_scene(s, 32);
      for (float v : img.values()) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
      }
    }
  }

  TEST_CASE("per-channel ensemble mean over 4096 seeds lies in [0.35, 0.65]") {
    double sum[3] = {0, 0, 0};
    const int seeds = 4096, size = 32;
    for (int s = 0; s < seeds; ++s) {
      const ImageTensor img = make_scene(static_cast<std::uint64_t>(s), size);
      for (int c = 0; c < 3; ++c) {
        const float* p = img.plane(0, c);
        for (int i = 0; i < size * size; ++i) sum[c] += p[i];
      }
    }
    for (double v : sum) {
      const double mean = v / (static_cast<double>(seeds) * size * size);
      CHECK(mean >= 0.35);
      CHECK(mean <= 0.65);
    }
  }

  TEST_CASE("identity camera captures the scene bit-exactly") {
    const ImageTensor scene = make_scene(3, 32);
    CHECK(capture_raw(scene, identity_camera(), 1).storage() == scene.storage());
  }

  TEST_CASE("gain overflow clips to full scale") {
    CameraModel c = identity_camera();
    c.gains << 2, 1, 1;
    ImageTensor scene = make_image(3, 2, 2, 0.3f);
    for (int i = 0; i < 4; ++i) scene.plane(0, 0)[i] = 0.6f;
    const ImageTensor raw = capture_raw(scene, c, 0);
    for (int i = 0; i < 4; ++i) {
      CHECK(raw.plane(0, 0)[i] == 1.0f);
      CHECK(raw.plane(0, 1)[i] == doctest::Approx(0.3f));
    }
  }

  TEST_CASE("noisy capture is deterministic per seed and differs across seeds") {
    CameraModel c = default_camera_b();
    c.read_noise_std = 0.01;
    c.shot_noise_scale = 1e-3;
    const ImageTensor scene = make_scene(4, 32);
    CHECK(capture_raw(scene, c, 9).storage() == capture_raw(scene, c, 9).storage());
    CHECK(capture_raw(scene, c, 9).storage() != capture_raw(scene, c, 10).storage());
  }

  TEST_CASE("isp proxy of the identity camera is the plain gamma curve") {
    const ImageTensor raw = make_image(3, 2, 2, 0.25f);
    const ImageTensor rgb = render_isp_proxy(raw, identity_camera());
    for (float v : rgb.values())
      CHECK(v == doctest::Approx(std::pow(0.25, 1.0 / 2.2)).epsilon(1e-6));
    CHECK(std::pow(0.25, 1.0 / 2.2) == doctest::Approx(0.5325).epsilon(1e-4));
  }

  TEST_CASE("raw at the black level renders to black") {
    const CameraModel c = default_camera_b();
    const ImageTensor raw = make_image(3, 4, 4, static_cast<float>(c.black_level));
    const ImageTensor rgb = render_isp_proxy(raw, c);
    for (float v : rgb.values()) CHECK(v == 0.0f);
  }

  TEST_CASE("native render inverts a noise-free capture") {
    for (const CameraModel& cam : {default_camera_a(), default_camera_b()}) {
      // ccm * diag(wb) * diag(gains) * response == I by construction
      const Eigen::Matrix3d prod = cam.ccm * cam.wb.asDiagonal() * cam.gains.asDiagonal() * cam.response;
      CHECK((prod - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
      // keep the scene dim enough that no capture clips
      ImageTensor scene = make_scene(12, 32);
      for (auto& v : scene.values()) v *= 0.5f;
      const ImageTensor out = render_isp_proxy(capture_raw(scene, cam, 0), cam);
      double worst = 0;
      for (std::size_t i = 0; i < scene.size(); ++i)
        worst = std::max(worst, std::abs(out[i] - std::pow(static_cast<double>(scene[i]), 1.0 / 2.2)));
      // float32 storage of the raw limits agreement to a few ulps through the gamma
      CHECK(worst < 1e-5);
    }
  }

  TEST_CASE("analytic translation maps camera A captures onto camera B captures") {
    ImageTensor scene = make_scene(21, 32);
    for (auto& v : scene.values()) v *= 0.5f;
    const CameraModel a = default_camera_a(), b = default_camera_b();
    const ImageTensor mapped = analytic_translate(capture_raw(scene, a, 0), a, b);
    const ImageTensor direct = capture_raw(scene, b, 0);
    for (std::size_t i = 0; i < mapped.size(); ++i) REQUIRE(mapped[i] == doctest::Approx(direct[i]).epsilon(1e-5));
  }

  TEST_CASE("dataset generation: counts, pairing, disjoint training scenes") {
    testing::ScratchDir dir("synth");
    DatasetConfig cfg;
    cfg.root = dir / "data";
    cfg.n_train = 32;
    cfg.n_test = 8;
    cfg.image_size = 64;
    cfg.seed = 5;
    const DatasetManifest m = generate_dataset(cfg);
    CHECK(m.splits.at("train_A").size() == 32);
    CHECK(m.splits.at("train_B").size() == 32);
    CHECK(m.splits.at("test_A").size() == 8);
    CHECK(m.splits.at("test_B").size() == 8);
    for (const char* split : kSplits) CHECK(list_rawimg(cfg.root / split).size() == m.splits.at(split).size());

    std::set<std::uint64_t> scenes_a, scenes_b;
    for (const auto& f : m.splits.at("train_A")) scenes_a.insert(m.scene_seeds.at(f));
    for (const auto& f : m.splits.at("train_B")) scenes_b.insert(m.scene_seeds.at(f));
    for (auto s : scenes_a) CHECK(scenes_b.count(s) == 0);
    for (std::size_t i = 0; i < 8; ++i)
      CHECK(m.scene_seeds.at(m.splits.at("test_A")[i]) == m.scene_seeds.at(m.splits.at("test_B")[i]));

    const DatasetManifest loaded = load_manifest(cfg.root);
    CHECK(loaded.splits == m.splits);
    CHECK(loaded.scene_seeds == m.scene_seeds);
    CHECK(loaded.camera_b.response.isApprox(m.camera_b.response, 1e-12));
  }

  TEST_CASE("paired test images invert to the same scene") {
    testing::ScratchDir dir("synth");
    DatasetConfig cfg;
    cfg.root = dir / "data";
    cfg.n_train = 1;
    cfg.n_test = 2;
    cfg.image_size = 32;
    cfg.noise = true;
    const DatasetManifest m = generate_dataset(cfg);
    const ImageTensor ra = read_rawimg(m.files("test_A")[0]), rb = read_rawimg(m.files("test_B")[0]);
    const ImageTensor sa = invert_camera(ra, m.camera_a), sb = invert_camera(rb, m.camera_b);
    // noise sigma is about 0.005 per raw channel; after the inverse response it
    // stays well under 0.05, and clipped pixels are excluded by the mean check
    double mean_abs = 0;
    for (std::size_t i = 0; i < sa.size(); ++i) mean_abs += std::abs(sa[i] - sb[i]);
    mean_abs /= static_cast<double>(sa.size());
    CHECK(mean_abs < 0.02);
    const ImageTensor scene = make_scene(m.scene_seeds.at(m.splits.at("test_A")[0]), 32);
    double err = 0;
    for (std::size_t i = 0; i < scene.size(); ++i) err += std::abs(sa[i] - scene[i]);
    CHECK(err / static_cast<double>(scene.size()) < 0.02);
  }

  TEST_CASE("same master seed gives bit-identical files; populated roots are refused") {
    testing::ScratchDir dir("synth");
    DatasetConfig cfg;
    cfg.n_train = 3;
    cfg.n_test = 2;
    cfg.image_size = 32;
    cfg.noise = true;
    cfg.seed = 77;
    cfg.root = dir / "one";
    const DatasetManifest m1 = generate_dataset(cfg);
    cfg.root = dir / "two";
    generate_dataset(cfg);
    for (const char* split : kSplits)
      for (const auto& rel : m1.splits.at(split))
        CHECK(testing::slurp(dir / ("one/" + rel)) == testing::slurp(dir / ("two/" + rel)));
    CHECK(testing::slurp(dir / "one/manifest.txt") == testing::slurp(dir / "two/manifest.txt"));

    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
    cfg.overwrite = true;
    CHECK_NOTHROW(generate_dataset(cfg));
  }
}
