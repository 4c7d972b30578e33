#include "stereovit/selfcheck.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>

#include "stereovit/checkpoint.hpp"
#include "stereovit/corruptions.hpp"
#include "stereovit/metrics.hpp"
#include "stereovit/model.hpp"
#include "stereovit/nn.hpp"
#include "stereovit/rng.hpp"
#include "stereovit/tensor.hpp"

namespace stereovit {

namespace {

using T = Tensor<double>;

T randn(std::vector<int64_t> shape, Rng& rng, double std_dev = 1.0, bool grad = true) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (double& v : data) v = rng.normal() * std_dev;
  return T::from_data(std::move(shape), std::move(data), grad);
}

CheckResult grad_case(const std::string& name, const std::function<T()>& fn,
                      std::vector<T> wrt, double tol = 1e-6) {
  GradCheckOptions<double> opt;
  const double err = grad_check<double>(fn, std::move(wrt), opt);
  char detail[96];
  std::snprintf(detail, sizeof(detail), "max rel err %.3g (tol %.1g)", err, tol);
  return {name, err < tol, detail};
}

CheckResult approx(const std::string& name, double value, double want, double tol) {
  char detail[128];
  std::snprintf(detail, sizeof(detail), "value %.6g, want %.6g +/- %.2g", value, want, tol);
  return {name, std::fabs(value - want) <= tol, detail};
}

}  // namespace

std::vector<CheckResult> run_self_checks() {
  std::vector<CheckResult> out;
  Rng rng(20240511);

  {
    T a = randn({3, 4}, rng);
    T b = randn({4, 2}, rng);
    out.push_back(grad_case("matmul gradient", [&] { return sum(matmul(a, b)); }, {a, b}));
  }
  {
    T x = randn({2, 5, 5}, rng);
    T k = randn({3, 2, 3, 3}, rng, 0.5);
    T bias = randn({3}, rng, 0.5);
    out.push_back(grad_case("conv2d gradient",
                            [&] { return sum(conv2d(x, k, bias, 1, 1)); }, {x, k, bias}));
  }
  {
    T x = randn({2, 4, 4}, rng);
    T k = randn({2, 3, 4, 4}, rng, 0.5);
    out.push_back(grad_case("transposed_conv2d gradient",
                            [&] { return sum(transposed_conv2d(x, k, 2, 1)); }, {x, k}));
  }
  {
    T x = randn({3, 6}, rng);
    T gamma = randn({6}, rng, 0.5);
    T beta = randn({6}, rng, 0.5);
    out.push_back(grad_case("layer_norm gradient",
                            [&] { return sum(layer_norm(x, gamma, beta, 1e-6)); },
                            {x, gamma, beta}));
  }
  {
    AttentionParams<double> p;
    p.heads = 2;
    p.wq = randn({4, 4}, rng, 0.5);
    p.bq = randn({4}, rng, 0.2);
    p.wk = randn({4, 4}, rng, 0.5);
    p.bk = randn({4}, rng, 0.2);
    p.wv = randn({4, 4}, rng, 0.5);
    p.bv = randn({4}, rng, 0.2);
    p.wo = randn({4, 4}, rng, 0.5);
    p.bo = randn({4}, rng, 0.2);
    T x = randn({3, 4}, rng);
    out.push_back(grad_case(
        "attention gradient",
        [&] { return sum(multi_head_attention(x, x, p).tokens); },
        {x, p.wq, p.wk, p.wv, p.wo}));
    Tensor<double> maps = multi_head_attention(x, x, p, true).maps;
    bool rows_ok = true;
    for (int64_t h = 0; h < 2 && rows_ok; ++h) {
      for (int64_t r = 0; r < 3 && rows_ok; ++r) {
        double s = 0.0;
        for (int64_t c = 0; c < 3; ++c) s += maps.data()[(h * 3 + r) * 3 + c];
        rows_ok = std::fabs(s - 1.0) < 1e-6;
      }
    }
    out.push_back({"attention map normalization", rows_ok, "rows sum to 1 +/- 1e-6"});
  }
  {
    T x = randn({4, 7}, rng);
    Tensor<double> sm = softmax(x, 1);
    bool ok = true;
    for (int64_t r = 0; r < 4 && ok; ++r) {
      double s = 0.0;
      for (int64_t c = 0; c < 7; ++c) {
        const double v = sm.data()[r * 7 + c];
        ok = ok && v > 0.0 && v < 1.0;
        s += v;
      }
      ok = ok && std::fabs(s - 1.0) < 1e-6;
    }
    out.push_back({"softmax normalization", ok, "slices sum to 1, entries in (0,1)"});
  }
  {
    const int64_t tiny = param_count(ModelConfig::tiny());
    const int64_t small = param_count(ModelConfig::small());
    out.push_back(approx("tiny parameter count", static_cast<double>(tiny), 6.9e6, 0.05 * 6.9e6));
    out.push_back(
        approx("small parameter count", static_cast<double>(small), 25.1e6, 0.05 * 25.1e6));
  }
  {
    const bool ok =
        ModelConfig::tiny().token_count() == 197 && ModelConfig::desk().token_count() == 65;
    out.push_back({"token arithmetic", ok, "224/16 -> 197 tokens, 64/8 -> 65 tokens"});
  }

  // Corruption statistics on a mid-gray test card.
  Image card(256, 256, 0.5f);
  {
    NoiseSpec spec = NoiseSpec::by_name("impulse");
    spec.seed = 7;
    Image noisy = corrupt(card, spec);
    int64_t corrupted = 0;
    bool extreme = true;
    for (size_t i = 0; i < noisy.size(); ++i) {
      if (noisy.px[i] != card.px[i]) {
        ++corrupted;
        extreme = extreme && (noisy.px[i] == 0.0f || noisy.px[i] == 1.0f);
      }
    }
    const double frac = static_cast<double>(corrupted) / static_cast<double>(noisy.size());
    out.push_back(approx("impulse corrupted fraction", frac, 0.20, 0.01));
    out.push_back({"impulse values extreme", extreme, "corrupted pixels in {0, 1}"});
  }
  {
    NoiseSpec spec = NoiseSpec::by_name("gaussian");
    spec.seed = 7;
    Image noisy = corrupt(card, spec);
    double mu = 0.0;
    for (size_t i = 0; i < noisy.size(); ++i) mu += noisy.px[i] - card.px[i];
    mu /= static_cast<double>(noisy.size());
    double var = 0.0;
    for (size_t i = 0; i < noisy.size(); ++i) {
      const double d = (noisy.px[i] - card.px[i]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(noisy.size());
    out.push_back(approx("gaussian residual std", std::sqrt(var), 0.02, 0.002));
  }
  {
    double motion_sum = 0.0, defocus_sum = 0.0;
    for (double v : motion_blur_kernel(6, 20.0)) motion_sum += v;
    for (double v : defocus_blur_kernel(10, 2.0)) defocus_sum += v;
    const bool ok = std::fabs(motion_sum - 1.0) < 1e-6 && std::fabs(defocus_sum - 1.0) < 1e-6;
    out.push_back({"blur kernels normalized", ok, "kernel mass sums to 1 +/- 1e-6"});
  }
  {
    NoiseSpec g0 = NoiseSpec::by_name("gaussian");
    g0.gauss_sigma = 0.0;
    NoiseSpec s0 = NoiseSpec::by_name("stripe");
    s0.stripe_alpha = 0.0;
    const bool ok = corrupt(card, g0).px == card.px && corrupt(card, s0).px == card.px;
    out.push_back({"degenerate corruption identities", ok, "sigma=0 and alpha=0 are bit-exact"});
  }
  {
    NoiseSpec spec = NoiseSpec::by_name("poisson");
    spec.seed = 11;
    Image noisy = corrupt(card, spec);
    double mu = 0.0;
    for (float v : noisy.px) mu += v;
    mu /= static_cast<double>(noisy.size());
    out.push_back(approx("poisson constant-image mean", mu, 0.5, 0.01));
  }

  // Metric spot checks against a hand-built confusion matrix.
  {
    Image pred(2, 2, 0.0f), target(2, 2, 0.0f);
    pred.at(0, 0) = 1.0f;
    target.at(0, 0) = 1.0f;
    target.at(0, 1) = 1.0f;
    SegmentationMetrics m = segmentation_metrics(pred, target);
    const bool ok = std::fabs(m.miou - 7.0 / 12.0) < 1e-12 &&
                    std::fabs(m.mdice - 11.0 / 15.0) < 1e-12 && std::fabs(m.acc - 0.75) < 1e-12;
    out.push_back({"segmentation metric oracle", ok, "2x2 worked example"});
  }
  {
    std::vector<std::array<double, 3>> preds = {{0.1, 0.2, 0.3}, {0.0, -0.1, 0.2}},
                                       targets = {{0.1, 0.2, 0.3}, {0.0, -0.1, 0.2}};
    RegressionMetrics m = regression_metrics(preds, targets);
    const bool ok = m.mse == 0.0 && m.mae == 0.0 && std::fabs(m.r2 - 1.0) < 1e-12;
    out.push_back({"regression metric oracle", ok, "perfect prediction"});
  }

  // Checkpoint round trip and tamper detection.
  {
    ModelConfig cfg = ModelConfig::desk();
    cfg.depth = 1;  // keep the self-check fast
    Model<float> model = Model<float>::init(cfg, 99);
    TrainMeta meta;
    meta.epoch = 3;
    meta.val_mse = 1.5e-4;
    meta.seed = 99;
    std::vector<uint8_t> bytes = checkpoint_bytes(model, meta);
    bool roundtrip = false;
    try {
      LoadedCheckpoint loaded = load_checkpoint_bytes(bytes);
      roundtrip = checkpoint_bytes(loaded.model, loaded.meta) == bytes;
    } catch (const std::exception&) {
      roundtrip = false;
    }
    out.push_back({"checkpoint round trip", roundtrip, "save-load-save is byte identical"});
    bytes[bytes.size() / 2] ^= 0x5a;
    bool rejected = false;
    try {
      load_checkpoint_bytes(bytes);
    } catch (const std::exception&) {
      rejected = true;
    }
    out.push_back({"checkpoint tamper detection", rejected, "CRC mismatch rejected"});
  }

  return out;
}

}  // namespace stereovit
