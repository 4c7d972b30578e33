#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "stereovit/image.hpp"
#include "stereovit/tensor.hpp"

namespace stereovit {

struct RegressionMetrics {
  double mse = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  double r2 = 0.0;
};

// mse/mae/rmse are computed jointly over all three force components; r2 is
// computed per component and averaged. Requires at least two samples.
RegressionMetrics regression_metrics(const std::vector<std::array<double, 3>>& preds,
                                     const std::vector<std::array<double, 3>>& targets);

struct SegmentationMetrics {
  double acc = 0.0;
  double miou = 0.0;
  double mdice = 0.0;
};

// Binarizes the prediction at `threshold` and averages IoU/Dice over the two
// classes (background, foreground). A class absent from both masks scores 1.
SegmentationMetrics segmentation_metrics(const Image& pred, const Image& target,
                                         double threshold = 0.5);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<int64_t> counts;
  int64_t total = 0;
};

// Fixed-bin histogram over a symmetric range sized by the largest |error|.
Histogram build_histogram(const std::vector<double>& errors, int bins = 41);

// ---------------------------------------------------------------------------
// Differentiable losses.

// Mean over the batch of (1/3) * ||pred - target||^2; accepts [3] or [B x 3].
template <class S>
Tensor<S> force_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("force_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  }
  if (pred.dim(pred.rank() - 1) != 3) {
    throw std::invalid_argument("force_loss: last dimension must be 3, got " +
                                shape_str(pred.shape()));
  }
  Tensor<S> d = sub(pred, target);
  return mean(mul(d, d));
}

// Pixel-mean binary cross entropy on probability maps.
template <class S>
Tensor<S> seg_loss(const Tensor<S>& pred_map, const Tensor<S>& target_mask) {
  return bce_loss(pred_map, target_mask);
}

template <class S>
Tensor<S> total_loss(const Tensor<S>& l_force, const Tensor<S>& l_seg_enc,
                     const Tensor<S>& l_seg_dec, double lambda1, double lambda2, double lambda3) {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) {
    throw std::invalid_argument("total_loss: lambda weights must be non-negative");
  }
  Tensor<S> out = scale(l_force, static_cast<S>(lambda1));
  if (l_seg_enc.defined() && lambda2 != 0.0) {
    out = add(out, scale(l_seg_enc, static_cast<S>(lambda2)));
  }
  if (l_seg_dec.defined() && lambda3 != 0.0) {
    out = add(out, scale(l_seg_dec, static_cast<S>(lambda3)));
  }
  return out;
}

}  // namespace stereovit
