#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "stereovit/checkpoint.hpp"  // crc32_ieee for file hashing
#include "stereovit/dataset.hpp"

using namespace stereovit;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

uint32_t file_crc(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::vector<uint8_t> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return crc32_ieee(b.data(), b.size());
}

int mask_pixels(const Image& m) {
  int n = 0;
  for (float v : m.px) n += v > 0.5f ? 1 : 0;
  return n;
}

// Tip location: foreground centroid of the topmost row containing any.
double tip_x(const Image& mask) {
  for (int y = 0; y < mask.height; ++y) {
    double sum = 0.0;
    int count = 0;
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(y, x) > 0.5f) {
        sum += x;
        ++count;
      }
    }
    if (count > 0) return sum / count;
  }
  return -1.0;
}

double row_centroid_x(const Image& mask, int y) {
  double sum = 0.0;
  int count = 0;
  for (int x = 0; x < mask.width; ++x) {
    if (mask.at(y, x) > 0.5f) {
      sum += x;
      ++count;
    }
  }
  return count > 0 ? sum / count : -1.0;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

}  // namespace

TEST_CASE("sample_force is deterministic and honors the range") {
  Rng a(5), b(5);
  ForceVector f1 = sample_force(a, 0.05);
  ForceVector f2 = sample_force(b, 0.05);
  CHECK(f1.x == f2.x);
  CHECK(f1.y == f2.y);
  CHECK(f1.z == f2.z);
  CHECK(std::fabs(f1.x) <= 0.05);

  Rng c(9);
  ForceVector zero = sample_force(c, 0.0);
  CHECK(zero.x == 0.0);
  CHECK(zero.y == 0.0);
  CHECK(zero.z == 0.0);
}

TEST_CASE("sample_force components are centered (Monte Carlo)") {
  Rng rng(123);
  double mx = 0, my = 0, mz = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    ForceVector f = sample_force(rng, 0.05);
    mx += f.x;
    my += f.y;
    mz += f.z;
  }
  CHECK(std::fabs(mx / n) < 0.01 * 0.05);
  CHECK(std::fabs(my / n) < 0.01 * 0.05);
  CHECK(std::fabs(mz / n) < 0.01 * 0.05);
}

TEST_CASE("deflect evaluates the bending profile exactly") {
  SceneConfig scene;
  CHECK(cantilever_phi(0.0) == 0.0);
  CHECK(cantilever_phi(1.0) == doctest::Approx(1.0));
  CHECK(cantilever_phi(0.5) == doctest::Approx(0.3125));

  ForceVector zero;
  auto straight = deflect(zero, scene, 16);
  for (const auto& p : straight) {
    CHECK(p[0] == 0.0);
    CHECK(p[2] == 0.0);
  }
  CHECK(straight.back()[1] == doctest::Approx(scene.catheter_length));

  // f = (0.02, 0, 0), compliance 200: tip offset exactly 4 px, mid-span
  // offset 4 * phi(0.5) = 1.25 px.
  ForceVector fx{0.02, 0.0, 0.0};
  auto bent = deflect(fx, scene, 65);
  CHECK(bent.back()[0] == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(bent[32][0] == doctest::Approx(1.25).epsilon(1e-12));
  CHECK(bent.back()[2] == doctest::Approx(0.0));
}

TEST_CASE("deflect needs at least two samples") {
  SceneConfig scene;
  CHECK_THROWS_AS(deflect(ForceVector{}, scene, 1), std::invalid_argument);
}

TEST_CASE("zero force renders identical masks in both views") {
  SceneConfig scene;
  Rng rng(1);
  auto curve = deflect(ForceVector{}, scene, 64);
  Image img_t, mask_t, img_s, mask_s;
  render_view(curve, View::top, scene, rng, &img_t, &mask_t);
  render_view(curve, View::side, scene, rng, &img_s, &mask_s);
  CHECK(mask_t.px == mask_s.px);
  CHECK(mask_pixels(mask_t) >= static_cast<int>(scene.catheter_length));
}

TEST_CASE("pure x-force shifts the top view and leaves the side view unchanged") {
  SceneConfig scene;
  Rng rng(2);
  auto zero_curve = deflect(ForceVector{}, scene, 64);
  auto bent_curve = deflect(ForceVector{0.02, 0.0, 0.0}, scene, 64);

  Image mask_zero_top, mask_zero_side, mask_bent_top, mask_bent_side;
  render_view(zero_curve, View::top, scene, rng, nullptr, &mask_zero_top);
  render_view(zero_curve, View::side, scene, rng, nullptr, &mask_zero_side);
  render_view(bent_curve, View::top, scene, rng, nullptr, &mask_bent_top);
  render_view(bent_curve, View::side, scene, rng, nullptr, &mask_bent_side);

  CHECK(mask_bent_side.px == mask_zero_side.px);
  const double shift = tip_x(mask_bent_top) - tip_x(mask_zero_top);
  CHECK(shift == doctest::Approx(std::lround(200 * 0.02)).epsilon(1e-12));
}

TEST_CASE("foreground fraction stays in the thin-structure regime") {
  SceneConfig scene;
  for (int i = 0; i < 20; ++i) {
    StereoSample s = make_sample(scene, i);
    for (const Image* m : {&s.mask_top, &s.mask_side}) {
      const double frac = static_cast<double>(mask_pixels(*m)) / static_cast<double>(m->size());
      CHECK(frac > 0.002);
      CHECK(frac < 0.10);
    }
  }
}

TEST_CASE("scene invariants are validated") {
  SceneConfig scene;
  scene.compliance = 1e5;  // would fling the catheter out of frame
  CHECK_THROWS_AS(scene.validate(), std::invalid_argument);
  scene = SceneConfig{};
  scene.catheter_radius = 0.5;
  CHECK_THROWS_AS(scene.validate(), std::invalid_argument);
  scene = SceneConfig{};
  scene.catheter_length = 80.0;
  CHECK_THROWS_AS(scene.validate(), std::invalid_argument);
}

TEST_CASE("out-of-frame curves raise a generation error") {
  SceneConfig scene;
  Rng rng(3);
  std::vector<std::array<double, 3>> escape = {{0.0, 0.0, 0.0}, {100.0, 40.0, 0.0}};
  Image img, mask;
  CHECK_THROWS_WITH_AS(render_view(escape, View::top, scene, rng, &img, &mask),
                       doctest::Contains("frame"), std::runtime_error);
}

TEST_CASE("generate_dataset writes an 80/10/10 split with a loadable manifest") {
  auto dir = temp_dir("svds_split");
  SceneConfig scene;
  scene.seed = 77;
  DatasetManifest manifest = generate_dataset(100, scene, dir.string());
  CHECK(manifest.split_indices("train").size() == 80);
  CHECK(manifest.split_indices("val").size() == 10);
  CHECK(manifest.split_indices("test").size() == 10);

  DatasetManifest loaded = DatasetManifest::load(manifest_path(dir.string()));
  CHECK(loaded.rows.size() == 100);
  CHECK(loaded.scene.seed == 77);
  CHECK(loaded.rows[0].split == "train");
  CHECK(loaded.rows[99].split == "test");

  LoadedDataset ds = LoadedDataset::load(manifest_path(dir.string()));
  CHECK(ds.samples.size() == 100);
  CHECK(ds.train.size() == 80);
  std::filesystem::remove_all(dir);
}

TEST_CASE("generation is byte-identical across runs with the same seed") {
  auto dir1 = temp_dir("svds_det1");
  auto dir2 = temp_dir("svds_det2");
  SceneConfig scene;
  scene.seed = 31;
  scene.background = "clutter";
  generate_dataset(12, scene, dir1.string());
  generate_dataset(12, scene, dir2.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir1)) {
    const std::string name = entry.path().filename().string();
    CHECK(file_crc(entry.path().string()) == file_crc((dir2 / name).string()));
  }
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("rejects too-small datasets") {
  SceneConfig scene;
  CHECK_THROWS_AS(generate_dataset(9, scene, "/tmp/should_not_exist_ds"), std::invalid_argument);
}

TEST_CASE("label consistency: re-rendering from the manifest reproduces the masks") {
  auto dir = temp_dir("svds_consistency");
  SceneConfig scene;
  scene.seed = 99;
  generate_dataset(10, scene, dir.string());
  LoadedDataset ds = LoadedDataset::load(manifest_path(dir.string()));
  for (int i = 0; i < 10; ++i) {
    const auto& row = ds.manifest.rows[static_cast<size_t>(i)];
    auto curve = deflect(row.force, scene, 64);
    Rng rng(0);  // plain background: the mask never consumes randomness
    Image mask_top, mask_side;
    render_view(curve, View::top, scene, rng, nullptr, &mask_top);
    render_view(curve, View::side, scene, rng, nullptr, &mask_side);
    CHECK(mask_top.px == ds.samples[static_cast<size_t>(i)].mask_top.px);
    CHECK(mask_side.px == ds.samples[static_cast<size_t>(i)].mask_side.px);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("clutter changes images but not geometry") {
  SceneConfig plain;
  plain.seed = 11;
  SceneConfig clutter = plain;
  clutter.background = "clutter";
  StereoSample a = make_sample(plain, 4);
  StereoSample b = make_sample(clutter, 4);
  CHECK(a.mask_top.px == b.mask_top.px);
  CHECK(a.mask_side.px == b.mask_side.px);
  CHECK(a.image_top.px != b.image_top.px);
  // Clutter stays at or below 0.5 before the stroke and blur.
  float bg_max = 0.0f;
  for (size_t i = 0; i < b.image_top.size(); ++i) {
    if (b.mask_top.px[i] < 0.5f) bg_max = std::max(bg_max, b.image_top.px[i]);
  }
  CHECK(bg_max <= 0.75f);  // blur can blend some stroke in near the curve
}

TEST_CASE("tip offsets and mid-bow are observable in the rendered masks") {
  SceneConfig scene;
  scene.seed = 2024;
  std::vector<double> fx, fy, fz, tip_top, tip_side, bow_top;
  const int mid_row = static_cast<int>(scene.by() - 0.5 * scene.catheter_length);
  for (int i = 0; i < 300; ++i) {
    StereoSample s = make_sample(scene, i);
    fx.push_back(s.force.x);
    fy.push_back(s.force.y);
    fz.push_back(s.force.z);
    tip_top.push_back(tip_x(s.mask_top) - scene.bx());
    tip_side.push_back(tip_x(s.mask_side) - scene.bx());
    const double mid = row_centroid_x(s.mask_top, mid_row) - scene.bx();
    // Remove the transverse contribution using the known profile; what is
    // left is the axial bow component.
    bow_top.push_back(mid - scene.compliance * s.force.x * cantilever_phi(0.5));
  }
  CHECK(pearson(tip_top, fx) > 0.99);
  CHECK(pearson(tip_side, fz) > 0.99);
  CHECK(pearson(bow_top, fy) > 0.9);
}
