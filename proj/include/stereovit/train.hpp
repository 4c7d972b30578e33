#pragma once

// Adam optimization of the multitask objective, best-checkpoint selection on
// validation force MSE, and corruption-aware evaluation.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stereovit/checkpoint.hpp"
#include "stereovit/corruptions.hpp"
#include "stereovit/dataset.hpp"
#include "stereovit/metrics.hpp"
#include "stereovit/model.hpp"

namespace stereovit {

// Raised when a non-finite loss aborts a run; carries epoch/batch context.
class TrainAbortError : public std::runtime_error {
 public:
  explicit TrainAbortError(const std::string& what) : std::runtime_error(what) {}
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction over a fixed list of parameters.
class Adam {
 public:
  Adam(std::vector<Tensor<float>> params, AdamConfig cfg);
  Adam(Model<float>& model, AdamConfig cfg);

  // One update from flat per-parameter gradient buffers aligned with the
  // parameter list. Deterministic.
  void step(const std::vector<std::vector<float>>& grads);

  int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor<float>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

struct TrainConfig {
  ModelConfig model;
  std::string dataset_manifest;
  std::string out_dir = "runs";
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-4;  // fixed, no schedule
  uint64_t seed = 1;
  double lambda_force = 1.0;
  double lambda_seg_enc = 1.0;
  double lambda_seg_dec = 1.0;
  int threads = 0;  // 0: TFSG_THREADS / hardware

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochStats {
  int epoch = 0;
  double train_total = 0.0;
  double val_total = 0.0;
  double train_force = 0.0;
  double val_force = 0.0;
  double val_miou_top = 0.0;   // NaN for the force-only variant
  double val_miou_side = 0.0;  // NaN for the force-only variant
};

struct TrainResult {
  std::string checkpoint_path;
  std::string curves_csv_path;
  std::string report_json_path;
  std::vector<EpochStats> curves;
  int best_epoch = 0;
  double best_val_mse = 0.0;
};

// Loss curves CSV: epoch,train_total,val_total,train_force,val_force,
// val_miou_top,val_miou_side
void write_curves_csv(const std::vector<EpochStats>& curves, const std::string& path);

TrainResult train(const TrainConfig& cfg, const LoadedDataset& ds);
TrainResult train(const TrainConfig& cfg);

struct EvalReport {
  std::string dataset_id;
  std::string corruption = "clean";
  std::optional<NoiseSpec> corruption_spec;
  RegressionMetrics regression;
  bool has_segmentation = false;
  SegmentationMetrics seg_top;
  SegmentationMetrics seg_side;
  Histogram force_error_hist;  // pooled per-component signed errors, 41 bins
  int sample_count = 0;
  double runtime_seconds = 0.0;

  nlohmann::json to_json() const;
};

EvalReport evaluate(const Model<float>& model, const LoadedDataset& ds, const std::string& split,
                    const NoiseSpec* corruption = nullptr, int threads = 0);

// Atomic write (temp file + rename).
void write_report_json(const nlohmann::json& j, const std::string& path);

}  // namespace stereovit
