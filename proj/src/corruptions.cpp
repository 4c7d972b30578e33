#include "stereovit/corruptions.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "stereovit/rng.hpp"

namespace stereovit {

void NoiseSpec::validate() const {
  if (impulse_fraction < 0.0 || impulse_fraction > 1.0) {
    throw std::invalid_argument("noise: impulse fraction must be in [0,1]");
  }
  if (gauss_sigma < 0.0) throw std::invalid_argument("noise: sigma must be >= 0");
  if (motion_kernel < 1 || defocus_kernel < 1) {
    throw std::invalid_argument("noise: kernel size must be >= 1");
  }
  if (stripe_count < 0 || stripe_max_width < 1) {
    throw std::invalid_argument("noise: stripe parameters out of range");
  }
}

std::string NoiseSpec::name() const {
  switch (kind) {
    case Kind::impulse: return "impulse";
    case Kind::gaussian: return "gaussian";
    case Kind::poisson: return "poisson";
    case Kind::motion: return "motion";
    case Kind::defocus: return "defocus";
    case Kind::stripe: return "stripe";
  }
  return "unknown";
}

NoiseSpec NoiseSpec::by_name(const std::string& name) {
  NoiseSpec s;
  if (name == "impulse") s.kind = Kind::impulse;
  else if (name == "gaussian") s.kind = Kind::gaussian;
  else if (name == "poisson") s.kind = Kind::poisson;
  else if (name == "motion") s.kind = Kind::motion;
  else if (name == "defocus") s.kind = Kind::defocus;
  else if (name == "stripe") s.kind = Kind::stripe;
  else throw std::invalid_argument("unknown noise kind: " + name);
  return s;
}

nlohmann::json NoiseSpec::to_json() const {
  return nlohmann::json{{"kind", name()},
                        {"impulse_fraction", impulse_fraction},
                        {"gauss_mu", gauss_mu},
                        {"gauss_sigma", gauss_sigma},
                        {"motion_kernel", motion_kernel},
                        {"motion_angle_deg", motion_angle_deg},
                        {"defocus_kernel", defocus_kernel},
                        {"defocus_sigma", defocus_sigma},
                        {"stripe_alpha", stripe_alpha},
                        {"stripe_count", stripe_count},
                        {"stripe_max_width", stripe_max_width},
                        {"seed", seed}};
}

NoiseSpec NoiseSpec::from_json(const nlohmann::json& j) {
  NoiseSpec s = by_name(j.at("kind").get<std::string>());
  s.impulse_fraction = j.value("impulse_fraction", s.impulse_fraction);
  s.gauss_mu = j.value("gauss_mu", s.gauss_mu);
  s.gauss_sigma = j.value("gauss_sigma", s.gauss_sigma);
  s.motion_kernel = j.value("motion_kernel", s.motion_kernel);
  s.motion_angle_deg = j.value("motion_angle_deg", s.motion_angle_deg);
  s.defocus_kernel = j.value("defocus_kernel", s.defocus_kernel);
  s.defocus_sigma = j.value("defocus_sigma", s.defocus_sigma);
  s.stripe_alpha = j.value("stripe_alpha", s.stripe_alpha);
  s.stripe_count = j.value("stripe_count", s.stripe_count);
  s.stripe_max_width = j.value("stripe_max_width", s.stripe_max_width);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::vector<NoiseSpec> noise_suite(uint64_t seed) {
  std::vector<NoiseSpec> out;
  for (const char* n : {"impulse", "gaussian", "poisson", "motion", "defocus", "stripe"}) {
    NoiseSpec s = NoiseSpec::by_name(n);
    s.seed = seed;
    out.push_back(s);
  }
  return out;
}

std::vector<double> motion_blur_kernel(int k, double angle_deg) {
  if (k < 1) throw std::invalid_argument("motion kernel size must be >= 1");
  std::vector<double> kernel(static_cast<size_t>(k) * k, 0.0);
  if (k == 1) {
    kernel[0] = 1.0;
    return kernel;
  }
  const double a = angle_deg * M_PI / 180.0;
  const double dx = std::cos(a), dy = std::sin(a);
  const double c = (k - 1) / 2.0;
  const double half = c / std::max(std::fabs(dx), std::fabs(dy));
  // Anti-aliased unit-mass line: dense sampling with bilinear splatting.
  const int steps = 4001;
  for (int i = 0; i < steps; ++i) {
    const double t = -half + 2.0 * half * i / (steps - 1);
    const double x = c + t * dx;
    const double y = c + t * dy;
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    for (int oy = 0; oy <= 1; ++oy) {
      for (int ox = 0; ox <= 1; ++ox) {
        const int xi = x0 + ox, yi = y0 + oy;
        if (xi < 0 || xi >= k || yi < 0 || yi >= k) continue;
        const double w = (ox ? fx : 1.0 - fx) * (oy ? fy : 1.0 - fy);
        kernel[static_cast<size_t>(yi) * k + xi] += w;
      }
    }
  }
  double total = 0.0;
  for (double v : kernel) total += v;
  for (double& v : kernel) v /= total;
  return kernel;
}

std::vector<double> defocus_blur_kernel(int k, double sigma) {
  if (k < 1) throw std::invalid_argument("defocus kernel size must be >= 1");
  if (sigma <= 0.0) throw std::invalid_argument("defocus sigma must be > 0");
  std::vector<double> kernel(static_cast<size_t>(k) * k);
  const double c = (k - 1) / 2.0;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  double total = 0.0;
  for (int y = 0; y < k; ++y) {
    for (int x = 0; x < k; ++x) {
      const double d2 = (x - c) * (x - c) + (y - c) * (y - c);
      const double v = std::exp(-d2 * inv);
      kernel[static_cast<size_t>(y) * k + x] = v;
      total += v;
    }
  }
  for (double& v : kernel) v /= total;
  return kernel;
}

namespace {

// Correlation with edge replication; anchor at floor((k-1)/2).
Image convolve_replicate(const Image& img, const std::vector<double>& kernel, int k) {
  Image out(img.height, img.width);
  const int anchor = (k - 1) / 2;
  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int ky = 0; ky < k; ++ky) {
        const int sy = clampi(y + ky - anchor, 0, img.height - 1);
        for (int kx = 0; kx < k; ++kx) {
          const int sx = clampi(x + kx - anchor, 0, img.width - 1);
          acc += kernel[static_cast<size_t>(ky) * k + kx] * img.at(sy, sx);
        }
      }
      out.at(y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
    }
  }
  return out;
}

}  // namespace

Image corrupt(const Image& image, const NoiseSpec& spec) {
  spec.validate();
  for (float v : image.px) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw std::invalid_argument("corrupt: input values must lie in [0, 1]");
    }
  }
  Rng rng(Rng::mix(spec.seed, 0xc0ffeeULL));
  Image out = image;

  switch (spec.kind) {
    case NoiseSpec::Kind::impulse: {
      for (float& v : out.px) {
        if (rng.uniform() < spec.impulse_fraction) {
          v = rng.uniform() < 0.5 ? 0.0f : 1.0f;
        }
      }
      break;
    }
    case NoiseSpec::Kind::gaussian: {
      if (spec.gauss_sigma == 0.0 && spec.gauss_mu == 0.0) break;  // exact identity
      for (float& v : out.px) {
        const double n = spec.gauss_mu + spec.gauss_sigma * rng.normal();
        v = static_cast<float>(std::clamp(static_cast<double>(v) + n, 0.0, 1.0));
      }
      break;
    }
    case NoiseSpec::Kind::poisson: {
      const double q = 255.0;  // 8-bit photon-count surrogate
      for (float& v : out.px) {
        const double lam = static_cast<double>(v) * q;
        const double drawn = static_cast<double>(rng.poisson(lam)) / q;
        v = static_cast<float>(std::clamp(drawn, 0.0, 1.0));
      }
      break;
    }
    case NoiseSpec::Kind::motion: {
      const auto kernel = motion_blur_kernel(spec.motion_kernel, spec.motion_angle_deg);
      out = convolve_replicate(out, kernel, spec.motion_kernel);
      break;
    }
    case NoiseSpec::Kind::defocus: {
      const auto kernel = defocus_blur_kernel(spec.defocus_kernel, spec.defocus_sigma);
      out = convolve_replicate(out, kernel, spec.defocus_kernel);
      break;
    }
    case NoiseSpec::Kind::stripe: {
      if (spec.stripe_alpha == 0.0) break;  // exact identity
      for (int s = 0; s < spec.stripe_count; ++s) {
        const int x0 = rng.uniform_int(0, out.width - 1);
        const int w = rng.uniform_int(1, spec.stripe_max_width);
        const double polarity = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double delta = spec.stripe_alpha * polarity;
        for (int x = x0; x < std::min(x0 + w, out.width); ++x) {
          for (int y = 0; y < out.height; ++y) {
            out.at(y, x) =
                static_cast<float>(std::clamp(static_cast<double>(out.at(y, x)) + delta, 0.0, 1.0));
          }
        }
      }
      break;
    }
  }
  return out;
}

Image corrupt_seeded(const Image& image, const NoiseSpec& spec, uint64_t stream) {
  NoiseSpec s = spec;
  s.seed = Rng::mix(spec.seed, stream);
  return corrupt(image, s);
}

}  // namespace stereovit
