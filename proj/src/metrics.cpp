#include "stereovit/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace stereovit {

RegressionMetrics regression_metrics(const std::vector<std::array<double, 3>>& preds,
                                     const std::vector<std::array<double, 3>>& targets) {
  if (preds.size() != targets.size()) {
    throw std::invalid_argument("regression_metrics: size mismatch");
  }
  const size_t n = preds.size();
  if (n < 2) throw std::invalid_argument("regression_metrics: need at least 2 samples");

  double se = 0.0, ae = 0.0;
  for (size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double e = preds[i][c] - targets[i][c];
      se += e * e;
      ae += std::fabs(e);
    }
  }
  RegressionMetrics m;
  m.mse = se / static_cast<double>(3 * n);
  m.mae = ae / static_cast<double>(3 * n);
  m.rmse = std::sqrt(m.mse);

  double r2_sum = 0.0;
  for (int c = 0; c < 3; ++c) {
    double mu = 0.0;
    for (size_t i = 0; i < n; ++i) mu += targets[i][c];
    mu /= static_cast<double>(n);
    double ss_res = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double e = preds[i][c] - targets[i][c];
      const double d = targets[i][c] - mu;
      ss_res += e * e;
      ss_tot += d * d;
    }
    if (ss_tot == 0.0) {
      throw std::invalid_argument("regression_metrics: r2 undefined, zero target variance");
    }
    r2_sum += 1.0 - ss_res / ss_tot;
  }
  m.r2 = r2_sum / 3.0;
  return m;
}

SegmentationMetrics segmentation_metrics(const Image& pred, const Image& target,
                                         double threshold) {
  if (!pred.same_shape(target)) {
    throw std::invalid_argument("segmentation_metrics: shape mismatch");
  }
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = static_cast<double>(pred.px[i]) >= threshold;
    const bool t = static_cast<double>(target.px[i]) >= 0.5;
    if (p && t) ++tp;
    else if (!p && !t) ++tn;
    else if (p && !t) ++fp;
    else ++fn;
  }
  const double total = static_cast<double>(tp + tn + fp + fn);

  auto iou = [](int64_t inter, int64_t denom) {
    return denom == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(denom);
  };
  const double iou_fg = iou(tp, tp + fp + fn);
  const double iou_bg = iou(tn, tn + fp + fn);
  const double dice_fg = iou(2 * tp, 2 * tp + fp + fn);
  const double dice_bg = iou(2 * tn, 2 * tn + fp + fn);

  SegmentationMetrics m;
  m.acc = static_cast<double>(tp + tn) / total;
  m.miou = 0.5 * (iou_fg + iou_bg);
  m.mdice = 0.5 * (dice_fg + dice_bg);
  return m;
}

Histogram build_histogram(const std::vector<double>& errors, int bins) {
  if (bins <= 0) throw std::invalid_argument("build_histogram: bins must be positive");
  double r = 1e-12;
  for (double e : errors) r = std::max(r, std::fabs(e));
  Histogram h;
  h.lo = -r;
  h.hi = r;
  h.counts.assign(static_cast<size_t>(bins), 0);
  for (double e : errors) {
    int idx = static_cast<int>(std::floor((e - h.lo) / (h.hi - h.lo) * bins));
    idx = std::clamp(idx, 0, bins - 1);
    ++h.counts[static_cast<size_t>(idx)];
  }
  h.total = static_cast<int64_t>(errors.size());
  return h;
}

}  // namespace stereovit
