#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>

#include "stereovit/metrics.hpp"
#include "stereovit/rng.hpp"

using namespace stereovit;

namespace {

// Brute-force confusion-matrix oracle, written as an explicit per-class
// count so it shares no code with the implementation.
struct OracleSeg {
  double acc, miou, mdice;
};

OracleSeg oracle_segmentation(const Image& pred, const Image& target, double thr) {
  double acc_hits = 0.0;
  double iou_sum = 0.0, dice_sum = 0.0;
  for (int cls = 0; cls <= 1; ++cls) {
    double inter = 0.0, pred_count = 0.0, target_count = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
      const int p = pred.px[i] >= thr ? 1 : 0;
      const int t = target.px[i] >= 0.5 ? 1 : 0;
      if (cls == 0 && p == t) acc_hits += 1.0;
      if (p == cls) pred_count += 1.0;
      if (t == cls) target_count += 1.0;
      if (p == cls && t == cls) inter += 1.0;
    }
    const double uni = pred_count + target_count - inter;
    iou_sum += uni == 0.0 ? 1.0 : inter / uni;
    const double denom = pred_count + target_count;
    dice_sum += denom == 0.0 ? 1.0 : 2.0 * inter / denom;
  }
  return {acc_hits / static_cast<double>(pred.size()), iou_sum / 2.0, dice_sum / 2.0};
}

Image random_mask(int h, int w, Rng& rng, double fg_prob) {
  Image m(h, w);
  for (float& v : m.px) v = rng.uniform() < fg_prob ? 1.0f : 0.0f;
  return m;
}

Image random_probs(int h, int w, Rng& rng) {
  Image m(h, w);
  for (float& v : m.px) v = static_cast<float>(rng.uniform());
  return m;
}

}  // namespace

TEST_CASE("force_loss hand cases") {
  auto zero = Tensor<double>::zeros({3});
  auto pred = Tensor<double>::from_data({3}, {0.1, 0.2, 0.3});
  CHECK(force_loss(pred, pred).item() == 0.0);
  CHECK(force_loss(pred, zero).item() ==
        doctest::Approx((0.01 + 0.04 + 0.09) / 3.0).epsilon(1e-12));

  // Batch form: mean over the batch of the per-sample value.
  auto batch_pred = Tensor<double>::from_data({2, 3}, {0.1, 0.2, 0.3, 0.0, 0.0, 0.0});
  auto batch_target = Tensor<double>::zeros({2, 3});
  CHECK(force_loss(batch_pred, batch_target).item() ==
        doctest::Approx((0.01 + 0.04 + 0.09) / 6.0).epsilon(1e-12));
}

TEST_CASE("force_loss is symmetric and rejects mismatched shapes") {
  Rng rng(3);
  std::vector<double> a(3), b(3);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  auto ta = Tensor<double>::from_data({3}, a);
  auto tb = Tensor<double>::from_data({3}, b);
  CHECK(force_loss(ta, tb).item() == force_loss(tb, ta).item());
  CHECK_THROWS_AS(force_loss(ta, Tensor<double>::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("force_loss gradient vs finite differences at float64") {
  Rng rng(5);
  std::vector<double> p(6), t(6);
  for (auto& v : p) v = rng.normal() * 0.05;
  for (auto& v : t) v = rng.normal() * 0.05;
  auto pred = Tensor<double>::from_data({2, 3}, p, true);
  auto target = Tensor<double>::from_data({2, 3}, t);
  CHECK(grad_check<double>([&] { return force_loss(pred, target); }, {pred}) < 1e-6);
}

TEST_CASE("seg_loss hand values") {
  auto half = Tensor<double>::filled({2, 2}, 0.5);
  auto target = Tensor<double>::from_data({2, 2}, {1, 0, 1, 0});
  CHECK(seg_loss(half, target).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Confident and correct: the clamp keeps the loss near 1e-7.
  auto confident = Tensor<double>::from_data({1, 2}, {1.0 - 1e-9, 1e-9});
  auto tgt = Tensor<double>::from_data({1, 2}, {1.0, 0.0});
  CHECK(seg_loss(confident, tgt).item() < 1e-6);
  CHECK(seg_loss(confident, tgt).item() > 0.0);
}

TEST_CASE("seg_loss matches a direct per-pixel oracle") {
  Rng rng(7);
  Image probs = random_probs(9, 7, rng);
  Image mask = random_mask(9, 7, rng, 0.3);
  auto pred = Tensor<double>::from_data({9, 7}, std::vector<double>(probs.px.begin(), probs.px.end()));
  auto target = Tensor<double>::from_data({9, 7}, std::vector<double>(mask.px.begin(), mask.px.end()));

  double want = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    const double p = std::min(std::max(static_cast<double>(probs.px[i]), 1e-7), 1.0 - 1e-7);
    const double t = mask.px[i];
    want -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  want /= static_cast<double>(probs.size());
  CHECK(std::fabs(seg_loss(pred, target).item() - want) < 1e-9);
}

TEST_CASE("seg_loss over constant predictions is minimized at the mask mean") {
  Rng rng(11);
  Image mask = random_mask(6, 6, rng, 0.4);
  double mean_t = 0.0;
  for (float v : mask.px) mean_t += v;
  mean_t /= static_cast<double>(mask.size());
  auto target = Tensor<double>::from_data({6, 6},
                                          std::vector<double>(mask.px.begin(), mask.px.end()));
  double best_p = -1.0, best_loss = 1e30;
  for (int i = 1; i < 100; ++i) {
    const double p = i / 100.0;
    const double loss = seg_loss(Tensor<double>::filled({6, 6}, p), target).item();
    if (loss < best_loss) {
      best_loss = loss;
      best_p = p;
    }
  }
  CHECK(std::fabs(best_p - mean_t) <= 0.01 + 1e-12);
}

TEST_CASE("total_loss combines weighted terms") {
  auto one = Tensor<double>::scalar(1.0);
  auto two = Tensor<double>::scalar(2.0);
  auto three = Tensor<double>::scalar(3.0);
  CHECK(total_loss(one, two, three, 1, 1, 1).item() == doctest::Approx(6.0));
  CHECK(total_loss(one, two, three, 1, 0, 0).item() == doctest::Approx(1.0));
  // The force-only variant omits the segmentation terms entirely.
  CHECK(total_loss(one, Tensor<double>(), Tensor<double>(), 1, 0, 0).item() ==
        doctest::Approx(1.0));
  CHECK_THROWS_AS(total_loss(one, two, three, -1, 1, 1), std::invalid_argument);
}

TEST_CASE("total_loss gradient distributes linearly over the terms") {
  Rng rng(13);
  std::vector<double> v(6);
  for (auto& x : v) x = rng.normal();
  auto a = Tensor<double>::from_data({2, 3}, v, true);
  auto target = Tensor<double>::zeros({2, 3});
  auto probs = Tensor<double>::filled({2, 2}, 0.4, true);
  auto mask = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  const double err = grad_check<double>(
      [&] {
        return total_loss(force_loss(a, target), seg_loss(probs, mask), seg_loss(probs, mask),
                          0.7, 1.3, 2.1);
      },
      {a, probs});
  CHECK(err < 1e-6);
}

TEST_CASE("regression metrics on exact and constant predictors") {
  std::vector<std::array<double, 3>> targets = {
      {0.1, -0.2, 0.3}, {0.0, 0.1, -0.1}, {0.2, 0.0, 0.05}, {-0.15, 0.05, 0.0}};
  RegressionMetrics perfect = regression_metrics(targets, targets);
  CHECK(perfect.mse == 0.0);
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.rmse == 0.0);
  CHECK(perfect.r2 == doctest::Approx(1.0));

  std::array<double, 3> mean{};
  for (const auto& t : targets) {
    for (int c = 0; c < 3; ++c) mean[c] += t[c] / static_cast<double>(targets.size());
  }
  std::vector<std::array<double, 3>> constant(targets.size(), mean);
  RegressionMetrics chance = regression_metrics(constant, targets);
  CHECK(chance.r2 == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("regression metrics match a direct-summation oracle") {
  Rng rng(17);
  const int n = 5;
  std::vector<std::array<double, 3>> preds(n), targets(n);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      preds[i][c] = rng.normal();
      targets[i][c] = rng.normal();
    }
  }
  RegressionMetrics m = regression_metrics(preds, targets);

  double se = 0.0, ae = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      se += (preds[i][c] - targets[i][c]) * (preds[i][c] - targets[i][c]);
      ae += std::fabs(preds[i][c] - targets[i][c]);
    }
  }
  CHECK(std::fabs(m.mse - se / (3 * n)) < 1e-9);
  CHECK(std::fabs(m.mae - ae / (3 * n)) < 1e-9);
  CHECK(std::fabs(m.rmse * m.rmse - m.mse) < 1e-9);

  double r2 = 0.0;
  for (int c = 0; c < 3; ++c) {
    double mu = 0.0;
    for (int i = 0; i < n; ++i) mu += targets[i][c] / n;
    double res = 0.0, tot = 0.0;
    for (int i = 0; i < n; ++i) {
      res += (preds[i][c] - targets[i][c]) * (preds[i][c] - targets[i][c]);
      tot += (targets[i][c] - mu) * (targets[i][c] - mu);
    }
    r2 += (1.0 - res / tot) / 3.0;
  }
  CHECK(std::fabs(m.r2 - r2) < 1e-9);
}

TEST_CASE("regression metrics reject degenerate inputs") {
  std::vector<std::array<double, 3>> one = {{0, 0, 0}};
  CHECK_THROWS_AS(regression_metrics(one, one), std::invalid_argument);
  std::vector<std::array<double, 3>> flat = {{1, 1, 1}, {1, 1, 1}};
  CHECK_THROWS_AS(regression_metrics(flat, flat), std::invalid_argument);
}

TEST_CASE("segmentation metrics on identical masks") {
  Rng rng(19);
  Image m = random_mask(8, 8, rng, 0.3);
  SegmentationMetrics s = segmentation_metrics(m, m);
  CHECK(s.acc == doctest::Approx(1.0));
  CHECK(s.miou == doctest::Approx(1.0));
  CHECK(s.mdice == doctest::Approx(1.0));
}

TEST_CASE("segmentation metrics reproduce the 2x2 worked example") {
  Image pred(2, 2, 0.0f), target(2, 2, 0.0f);
  pred.at(0, 0) = 1.0f;
  target.at(0, 0) = 1.0f;
  target.at(0, 1) = 1.0f;
  SegmentationMetrics m = segmentation_metrics(pred, target);
  CHECK(m.miou == doctest::Approx(7.0 / 12.0).epsilon(1e-12));
  CHECK(m.mdice == doctest::Approx((2.0 / 3.0 + 4.0 / 5.0) / 2.0).epsilon(1e-12));
  CHECK(m.acc == doctest::Approx(0.75));
}

TEST_CASE("disjoint single-pixel foregrounds in 100x100") {
  Image pred(100, 100, 0.0f), target(100, 100, 0.0f);
  pred.at(10, 10) = 1.0f;
  target.at(50, 50) = 1.0f;
  SegmentationMetrics m = segmentation_metrics(pred, target);
  OracleSeg o = oracle_segmentation(pred, target, 0.5);
  CHECK(m.miou == doctest::Approx(o.miou).epsilon(1e-12));
  CHECK(m.mdice == doctest::Approx(o.mdice).epsilon(1e-12));
  CHECK(m.acc == doctest::Approx(o.acc).epsilon(1e-12));
  // fg IoU is 0; bg IoU is 9998/10000.
  CHECK(m.miou == doctest::Approx(0.5 * 9998.0 / 10000.0).epsilon(1e-12));
}

TEST_CASE("segmentation metrics match the brute-force oracle on random cases") {
  Rng rng(23);
  for (int kase = 0; kase < 40; ++kase) {
    Image pred = random_probs(7, 9, rng);
    Image target = random_mask(7, 9, rng, rng.uniform(0.0, 1.0));
    SegmentationMetrics m = segmentation_metrics(pred, target);
    OracleSeg o = oracle_segmentation(pred, target, 0.5);
    CHECK(std::fabs(m.acc - o.acc) < 1e-9);
    CHECK(std::fabs(m.miou - o.miou) < 1e-9);
    CHECK(std::fabs(m.mdice - o.mdice) < 1e-9);
    CHECK(m.mdice >= m.miou - 1e-12);
    CHECK(m.miou >= 0.0);
    CHECK(m.mdice <= 1.0);
  }
}

TEST_CASE("class absent from both masks scores one") {
  Image empty(4, 4, 0.0f);
  SegmentationMetrics m = segmentation_metrics(empty, empty);
  CHECK(m.miou == doctest::Approx(1.0));
  CHECK(m.mdice == doctest::Approx(1.0));
}

TEST_CASE("histogram bins cover a symmetric range and count everything") {
  std::vector<double> errors = {-0.3, -0.1, 0.0, 0.05, 0.1, 0.29, 0.3};
  Histogram h = build_histogram(errors, 41);
  CHECK(h.counts.size() == 41);
  CHECK(h.lo == doctest::Approx(-0.3));
  CHECK(h.hi == doctest::Approx(0.3));
  int64_t total = 0;
  for (int64_t c : h.counts) total += c;
  CHECK(total == static_cast<int64_t>(errors.size()));
  CHECK(h.total == total);
}
