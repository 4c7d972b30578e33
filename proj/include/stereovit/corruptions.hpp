#pragma once

// The six seeded input corruptions used by the robustness evaluation:
// impulse, gaussian, poisson, motion blur, defocus blur, stripe artifacts.
// Corruption applies to model inputs only; ground-truth masks are untouched.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "stereovit/image.hpp"

namespace stereovit {

struct NoiseSpec {
  enum class Kind { impulse, gaussian, poisson, motion, defocus, stripe };

  Kind kind = Kind::gaussian;
  double impulse_fraction = 0.20;
  double gauss_mu = 0.0;
  double gauss_sigma = 0.02;
  int motion_kernel = 6;
  double motion_angle_deg = 20.0;
  int defocus_kernel = 10;
  double defocus_sigma = 2.0;
  double stripe_alpha = 0.1;
  int stripe_count = 50;
  int stripe_max_width = 10;
  uint64_t seed = 0;

  void validate() const;
  std::string name() const;
  static NoiseSpec by_name(const std::string& name);
  nlohmann::json to_json() const;
  static NoiseSpec from_json(const nlohmann::json& j);
};

// The six specs at their table parameterizations.
std::vector<NoiseSpec> noise_suite(uint64_t seed);

// Normalized blur kernels (each sums to 1). Exposed for tests.
std::vector<double> motion_blur_kernel(int k, double angle_deg);
std::vector<double> defocus_blur_kernel(int k, double sigma);

// Applies the corruption; input values must lie in [0, 1].
Image corrupt(const Image& image, const NoiseSpec& spec);

// Same, with a per-item stream mixed into the seed (dataset evaluation).
Image corrupt_seeded(const Image& image, const NoiseSpec& spec, uint64_t stream);

}  // namespace stereovit
