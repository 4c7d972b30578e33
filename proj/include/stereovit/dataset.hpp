#pragma once

// Deterministic generator of stereo catheter-deflection samples. A cantilever
// bending profile maps a sampled 3D tip force to a space curve; the two
// orthogonal camera views rasterize it into images plus exact binary masks.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "stereovit/image.hpp"
#include "stereovit/rng.hpp"

namespace stereovit {

struct ForceVector {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct SceneConfig {
  int image_size = 64;
  // Catheter anchor in pixels; negative values derive bottom-center.
  double base_x = -1.0;
  double base_y = -1.0;
  double catheter_length = 48.0;  // px
  double catheter_radius = 1.5;   // px, stroke radius
  double compliance = 200.0;      // px per Newton, transverse deflection
  double axial_bow_gain = 160.0;  // px per Newton, mid-span bow from axial force
  std::string background = "plain";  // "plain" | "clutter"
  double force_range = 0.05;      // N; components drawn uniform in [-range, range]
  uint64_t seed = 1;

  double bx() const { return base_x >= 0.0 ? base_x : image_size / 2.0; }
  double by() const { return base_y >= 0.0 ? base_y : image_size - 2.0; }

  void validate() const;
  nlohmann::json to_json() const;
  static SceneConfig from_json(const nlohmann::json& j);
};

// Normalized end-load cantilever deflection profile, phi(0)=0, phi(1)=1.
inline double cantilever_phi(double s) { return (3.0 * s * s - s * s * s) / 2.0; }
// Mid-span bow profile for the axial component.
inline double bow_psi(double s) { return std::sin(M_PI * s); }

ForceVector sample_force(Rng& rng, double range);

// 3D polyline (x, y-up-from-base, z) with `samples` points, world units = px.
std::vector<std::array<double, 3>> deflect(const ForceVector& force, const SceneConfig& scene,
                                           int samples);

enum class View { top, side };

// Projects and rasterizes the curve. The top view sees (x, y); the side view
// sees (z, y). The mask is the exact pre-blur stroke; the image composites
// the stroke at 0.85 over the background and applies a 3x3 box blur.
void render_view(const std::vector<std::array<double, 3>>& curve, View view,
                 const SceneConfig& scene, Rng& rng, Image* image, Image* mask);

struct StereoSample {
  Image image_top, image_side;
  Image mask_top, mask_side;
  ForceVector force;
};

// Pure function of (scene.seed, index).
StereoSample make_sample(const SceneConfig& scene, int index);

struct ManifestRow {
  int index = 0;
  std::string split;
  std::string img_top, img_side, mask_top, mask_side;  // file names relative to root
  ForceVector force;
};

struct DatasetManifest {
  std::string root;
  std::vector<ManifestRow> rows;
  SceneConfig scene;

  std::vector<int> split_indices(const std::string& split) const;
  static DatasetManifest load(const std::string& manifest_path);
};

// Writes `count` samples with an 80/10/10 split; the manifest lands last so
// its presence marks a complete dataset. Returns the manifest path.
DatasetManifest generate_dataset(int count, const SceneConfig& scene, const std::string& out_dir);

inline std::string manifest_path(const std::string& out_dir) { return out_dir + "/manifest.csv"; }

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<StereoSample> samples;  // aligned with manifest.rows
  std::vector<int> train, val, test;

  const std::vector<int>& split(const std::string& name) const;
  static LoadedDataset load(const std::string& manifest_file);
};

}  // namespace stereovit
