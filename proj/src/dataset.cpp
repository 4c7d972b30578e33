#include "stereovit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stereovit {

void SceneConfig::validate() const {
  if (image_size < 16) throw std::invalid_argument("scene: image_size must be >= 16");
  if (catheter_radius < 1.0) throw std::invalid_argument("scene: catheter_radius must be >= 1");
  if (catheter_length <= 0.0) throw std::invalid_argument("scene: catheter_length must be > 0");
  if (force_range < 0.0) throw std::invalid_argument("scene: force_range must be >= 0");
  if (background != "plain" && background != "clutter") {
    throw std::invalid_argument("scene: background must be 'plain' or 'clutter'");
  }
  const double max_off = (compliance + axial_bow_gain) * force_range;
  if (max_off >= image_size / 3.0) {
    throw std::invalid_argument("scene: (compliance + axial_bow_gain) * force_range must stay "
                                "below image_size/3 so the catheter stays in frame");
  }
  if (by() - catheter_length < 1.0) {
    throw std::invalid_argument("scene: catheter_length exceeds the frame above the base");
  }
}

nlohmann::json SceneConfig::to_json() const {
  return nlohmann::json{{"image_size", image_size},
                        {"base_x", base_x},
                        {"base_y", base_y},
                        {"catheter_length", catheter_length},
                        {"catheter_radius", catheter_radius},
                        {"compliance", compliance},
                        {"axial_bow_gain", axial_bow_gain},
                        {"background", background},
                        {"force_range", force_range},
                        {"seed", seed}};
}

SceneConfig SceneConfig::from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.base_x = j.value("base_x", c.base_x);
  c.base_y = j.value("base_y", c.base_y);
  c.catheter_length = j.value("catheter_length", c.catheter_length);
  c.catheter_radius = j.value("catheter_radius", c.catheter_radius);
  c.compliance = j.value("compliance", c.compliance);
  c.axial_bow_gain = j.value("axial_bow_gain", c.axial_bow_gain);
  c.background = j.value("background", c.background);
  c.force_range = j.value("force_range", c.force_range);
  c.seed = j.value("seed", c.seed);
  return c;
}

ForceVector sample_force(Rng& rng, double range) {
  if (range < 0.0) throw std::invalid_argument("sample_force: range must be >= 0");
  ForceVector f;
  f.x = rng.uniform(-range, range);
  f.y = rng.uniform(-range, range);
  f.z = rng.uniform(-range, range);
  return f;
}

std::vector<std::array<double, 3>> deflect(const ForceVector& force, const SceneConfig& scene,
                                           int samples) {
  if (samples < 2) throw std::invalid_argument("deflect: need at least 2 samples");
  std::vector<std::array<double, 3>> curve(static_cast<size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    const double s = static_cast<double>(i) / static_cast<double>(samples - 1);
    const double bow = 0.5 * scene.axial_bow_gain * force.y * bow_psi(s);
    curve[static_cast<size_t>(i)] = {scene.compliance * force.x * cantilever_phi(s) + bow,
                                     s * scene.catheter_length,
                                     scene.compliance * force.z * cantilever_phi(s) + bow};
  }
  return curve;
}

namespace {

double point_segment_dist(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double wx = px - ax, wy = py - ay;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

Image clutter_background(int size, Rng& rng) {
  Image bg(size, size, 0.1f);
  const int blobs = rng.uniform_int(4, 9);
  for (int b = 0; b < blobs; ++b) {
    const double cx = rng.uniform(0.0, size);
    const double cy = rng.uniform(0.0, size);
    const double sigma = rng.uniform(4.0, 12.0);
    const double amp = rng.uniform(0.15, 0.4);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        bg.at(y, x) += static_cast<float>(amp * std::exp(-d2 * inv));
      }
    }
  }
  for (float& v : bg.px) v = std::clamp(v, 0.0f, 0.5f);
  return bg;
}

}  // namespace

void render_view(const std::vector<std::array<double, 3>>& curve, View view,
                 const SceneConfig& scene, Rng& rng, Image* image, Image* mask) {
  const int size = scene.image_size;
  const double r = scene.catheter_radius;
  const double bx = scene.bx(), by = scene.by();

  // Project: top sees (x, y), side sees (z, y); pixel y grows downward.
  std::vector<std::array<double, 2>> pts(curve.size());
  for (size_t i = 0; i < curve.size(); ++i) {
    const double t = view == View::top ? curve[i][0] : curve[i][2];
    pts[i] = {bx + t, by - curve[i][1]};
    // The transverse stroke extent carries the force signal and must fit;
    // vertically the stroke may clip at the frame bottom where the
    // catheter is anchored.
    if (pts[i][0] - r < 0.0 || pts[i][0] + r > size - 1.0 || pts[i][1] < 0.0 ||
        pts[i][1] > size - 1.0) {
      throw std::runtime_error("render_view: curve leaves the frame (scene invariant violated)");
    }
  }

  Image m(size, size, 0.0f);
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    const double ax = pts[i][0], ay = pts[i][1];
    const double cx = pts[i + 1][0], cy = pts[i + 1][1];
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, cx) - r - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(ax, cx) + r + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, cy) - r - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(ay, cy) + r + 1)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (m.at(y, x) > 0.0f) continue;
        if (point_segment_dist(x, y, ax, ay, cx, cy) <= r) m.at(y, x) = 1.0f;
      }
    }
  }

  Image img = scene.background == "clutter" ? clutter_background(size, rng)
                                            : Image(size, size, 0.1f);
  for (size_t i = 0; i < img.size(); ++i) {
    if (m.px[i] > 0.0f) img.px[i] = 0.85f;
  }
  img = box_blur3(img);

  if (image) *image = std::move(img);
  if (mask) *mask = std::move(m);
}

StereoSample make_sample(const SceneConfig& scene, int index) {
  scene.validate();
  Rng rng(Rng::mix(scene.seed, static_cast<uint64_t>(index)));
  StereoSample s;
  s.force = sample_force(rng, scene.force_range);
  const auto curve = deflect(s.force, scene, 64);
  render_view(curve, View::top, scene, rng, &s.image_top, &s.mask_top);
  render_view(curve, View::side, scene, rng, &s.image_side, &s.mask_side);
  return s;
}

std::vector<int> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<int> out;
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].split == split) out.push_back(static_cast<int>(i));
  }
  return out;
}

namespace {

std::string format_force(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string split_for(int index, int count) {
  const int n_train = static_cast<int>(std::floor(0.8 * count));
  const int n_val = static_cast<int>(std::floor(0.9 * count)) - n_train;
  if (index < n_train) return "train";
  if (index < n_train + n_val) return "val";
  return "test";
}

}  // namespace

DatasetManifest generate_dataset(int count, const SceneConfig& scene, const std::string& out_dir) {
  if (count < 10) throw std::invalid_argument("generate_dataset: count must be >= 10");
  scene.validate();
  std::filesystem::create_directories(out_dir);

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.scene = scene;

  for (int i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "s%05d", i);
    ManifestRow row;
    row.index = i;
    row.split = split_for(i, count);
    row.img_top = std::string(stem) + "_img_top.pgm";
    row.img_side = std::string(stem) + "_img_side.pgm";
    row.mask_top = std::string(stem) + "_mask_top.pgm";
    row.mask_side = std::string(stem) + "_mask_side.pgm";
    try {
      const StereoSample s = make_sample(scene, i);
      row.force = s.force;
      write_pgm(s.image_top, out_dir + "/" + row.img_top);
      write_pgm(s.image_side, out_dir + "/" + row.img_side);
      write_pgm(s.mask_top, out_dir + "/" + row.mask_top);
      write_pgm(s.mask_side, out_dir + "/" + row.mask_side);
    } catch (const std::exception& e) {
      throw std::runtime_error("generate_dataset: sample " + std::to_string(i) + ": " + e.what());
    }
    manifest.rows.push_back(std::move(row));
  }

  nlohmann::json sidecar;
  sidecar["count"] = count;
  sidecar["scene"] = scene.to_json();
  {
    std::ofstream f(out_dir + "/scene.json", std::ios::trunc);
    if (!f) throw std::runtime_error("generate_dataset: cannot write scene.json");
    f << sidecar.dump(2) << "\n";
  }

  // Manifest last: its presence marks a complete dataset.
  const std::string tmp = manifest_path(out_dir) + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("generate_dataset: cannot write manifest");
    f << "index,split,img_top,img_side,mask_top,mask_side,fx,fy,fz\n";
    for (const auto& row : manifest.rows) {
      f << row.index << "," << row.split << "," << row.img_top << "," << row.img_side << ","
        << row.mask_top << "," << row.mask_side << "," << format_force(row.force.x) << ","
        << format_force(row.force.y) << "," << format_force(row.force.z) << "\n";
    }
    if (!f) throw std::runtime_error("generate_dataset: manifest write failed");
  }
  if (std::rename(tmp.c_str(), manifest_path(out_dir).c_str()) != 0) {
    throw std::runtime_error("generate_dataset: manifest rename failed");
  }
  return manifest;
}

DatasetManifest load_manifest_impl(const std::string& manifest_file) {
  std::ifstream f(manifest_file);
  if (!f) throw std::runtime_error("manifest: cannot open " + manifest_file);
  DatasetManifest manifest;
  manifest.root = std::filesystem::path(manifest_file).parent_path().string();
  if (manifest.root.empty()) manifest.root = ".";

  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("manifest: empty file");
  const std::string expected = "index,split,img_top,img_side,mask_top,mask_side,fx,fy,fz";
  if (line != expected) throw std::runtime_error("manifest: unexpected header: " + line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 9) throw std::runtime_error("manifest: malformed row: " + line);
    ManifestRow row;
    row.index = std::stoi(fields[0]);
    row.split = fields[1];
    row.img_top = fields[2];
    row.img_side = fields[3];
    row.mask_top = fields[4];
    row.mask_side = fields[5];
    row.force.x = std::strtod(fields[6].c_str(), nullptr);
    row.force.y = std::strtod(fields[7].c_str(), nullptr);
    row.force.z = std::strtod(fields[8].c_str(), nullptr);
    manifest.rows.push_back(std::move(row));
  }

  std::ifstream sc(manifest.root + "/scene.json");
  if (!sc) throw std::runtime_error("manifest: missing scene.json next to " + manifest_file);
  nlohmann::json sidecar = nlohmann::json::parse(sc);
  manifest.scene = SceneConfig::from_json(sidecar.at("scene"));
  return manifest;
}

DatasetManifest DatasetManifest::load(const std::string& manifest_file) {
  return load_manifest_impl(manifest_file);
}

const std::vector<int>& LoadedDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split: " + name);
}

LoadedDataset LoadedDataset::load(const std::string& manifest_file) {
  LoadedDataset ds;
  ds.manifest = DatasetManifest::load(manifest_file);
  ds.samples.reserve(ds.manifest.rows.size());
  for (const auto& row : ds.manifest.rows) {
    StereoSample s;
    s.image_top = read_pgm(ds.manifest.root + "/" + row.img_top);
    s.image_side = read_pgm(ds.manifest.root + "/" + row.img_side);
    s.mask_top = read_pgm(ds.manifest.root + "/" + row.mask_top);
    s.mask_side = read_pgm(ds.manifest.root + "/" + row.mask_side);
    s.force = row.force;
    const int idx = static_cast<int>(ds.samples.size());
    if (row.split == "train") ds.train.push_back(idx);
    else if (row.split == "val") ds.val.push_back(idx);
    else if (row.split == "test") ds.test.push_back(idx);
    else throw std::runtime_error("manifest: unknown split tag " + row.split);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace stereovit
