#include "stereovit/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "stereovit/parallel.hpp"

namespace stereovit {

Adam::Adam(std::vector<Tensor<float>> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& t : params_) {
    m_.emplace_back(static_cast<size_t>(t.size()), 0.0f);
    v_.emplace_back(static_cast<size_t>(t.size()), 0.0f);
  }
}

Adam::Adam(Model<float>& model, AdamConfig cfg)
    : Adam(
          [&model] {
            std::vector<Tensor<float>> out;
            for (const auto& [name, t] : model.parameters()) out.push_back(t);
            return out;
          }(),
          cfg) {}

void Adam::step(const std::vector<std::vector<float>>& grads) {
  if (grads.size() != params_.size()) {
    throw std::invalid_argument("adam: gradient buffer count mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t p = 0; p < params_.size(); ++p) {
    Tensor<float> tensor = params_[p];
    if (static_cast<int64_t>(grads[p].size()) != tensor.size()) {
      throw std::invalid_argument("adam: gradient shape mismatch at index " + std::to_string(p));
    }
    std::vector<float>& w = tensor.mutable_data();
    std::vector<float>& m = m_[p];
    std::vector<float>& v = v_[p];
    for (size_t i = 0; i < w.size(); ++i) {
      const double g = static_cast<double>(grads[p][i]);
      const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      w[i] = static_cast<float>(w[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (learning_rate < 0.0) throw std::invalid_argument("train: learning_rate must be >= 0");
  if (lambda_force < 0.0 || lambda_seg_enc < 0.0 || lambda_seg_dec < 0.0) {
    throw std::invalid_argument("train: lambda weights must be >= 0");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"model", model.to_json()},
                        {"dataset_manifest", dataset_manifest},
                        {"out_dir", out_dir},
                        {"epochs", epochs},
                        {"batch_size", batch_size},
                        {"learning_rate", learning_rate},
                        {"seed", seed},
                        {"lambda_force", lambda_force},
                        {"lambda_seg_enc", lambda_seg_enc},
                        {"lambda_seg_dec", lambda_seg_dec},
                        {"threads", threads}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  c.dataset_manifest = j.value("dataset_manifest", c.dataset_manifest);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.lambda_force = j.value("lambda_force", c.lambda_force);
  c.lambda_seg_enc = j.value("lambda_seg_enc", c.lambda_seg_enc);
  c.lambda_seg_dec = j.value("lambda_seg_dec", c.lambda_seg_dec);
  c.threads = j.value("threads", c.threads);
  return c;
}

namespace {

Tensor<float> image_tensor(const Image& img, int channels) {
  std::vector<float> data;
  data.reserve(static_cast<size_t>(channels) * img.size());
  for (int c = 0; c < channels; ++c) data.insert(data.end(), img.px.begin(), img.px.end());
  return Tensor<float>::from_data({channels, img.height, img.width}, std::move(data));
}

Tensor<float> mask_tensor(const Image& mask) {
  std::vector<float> data(mask.px.begin(), mask.px.end());
  return Tensor<float>::from_data({mask.height, mask.width}, std::move(data));
}

Tensor<float> force_tensor(const ForceVector& f) {
  return Tensor<float>::from_data(
      {3}, {static_cast<float>(f.x), static_cast<float>(f.y), static_cast<float>(f.z)});
}

Image map_to_image(const Tensor<float>& map) {
  Image img(static_cast<int>(map.dim(0)), static_cast<int>(map.dim(1)));
  img.px = map.data();
  return img;
}

struct SampleLosses {
  double total = 0.0;
  double force = 0.0;
};

struct SamplePass {
  SampleLosses losses;
  std::array<double, 3> pred_force{};
  bool has_seg = false;
  SegmentationMetrics seg_top, seg_side;
  std::vector<std::vector<float>> grads;  // empty in eval mode
};

// Forward (and optionally backward) for one sample. Thread-safe: parameters
// are only read; every gradient lives in the pass-local map.
SamplePass run_sample(const Model<float>& model, const StereoSample& sample,
                      const TrainConfig& cfg, bool with_grads,
                      const Image* top_override = nullptr, const Image* side_override = nullptr) {
  const ModelConfig& mc = model.config();
  Tensor<float> top = image_tensor(top_override ? *top_override : sample.image_top, mc.channels);
  Tensor<float> side =
      image_tensor(side_override ? *side_override : sample.image_side, mc.channels);

  ForwardResult<float> fwd = model.forward(top, side);
  Tensor<float> l_force = force_loss(fwd.force, force_tensor(sample.force));
  Tensor<float> l_seg_enc, l_seg_dec;
  if (mc.with_segmentation_heads) {
    l_seg_enc = seg_loss(fwd.seg_top, mask_tensor(sample.mask_top));
    l_seg_dec = seg_loss(fwd.seg_side, mask_tensor(sample.mask_side));
  }
  Tensor<float> total = total_loss(l_force, l_seg_enc, l_seg_dec, cfg.lambda_force,
                                   cfg.lambda_seg_enc, cfg.lambda_seg_dec);

  SamplePass out;
  out.losses.total = static_cast<double>(total.item());
  out.losses.force = static_cast<double>(l_force.item());
  for (int c = 0; c < 3; ++c) out.pred_force[static_cast<size_t>(c)] = fwd.force.data()[c];
  out.has_seg = mc.with_segmentation_heads;
  if (out.has_seg) {
    out.seg_top = segmentation_metrics(map_to_image(fwd.seg_top), sample.mask_top);
    out.seg_side = segmentation_metrics(map_to_image(fwd.seg_side), sample.mask_side);
  }

  if (with_grads) {
    GradientMap<float> gm = backward(total);
    out.grads.reserve(model.parameters().size());
    for (const auto& [name, t] : model.parameters()) {
      const std::vector<float>* g = gm.find(t.node());
      if (g) {
        out.grads.push_back(*g);
      } else {
        out.grads.emplace_back(static_cast<size_t>(t.size()), 0.0f);
      }
    }
  }
  return out;
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.next_u64() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

std::string format_cell(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void write_curves_csv(const std::vector<EpochStats>& curves, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("curves: cannot open " + tmp);
    f << "epoch,train_total,val_total,train_force,val_force,val_miou_top,val_miou_side\n";
    for (const auto& e : curves) {
      f << e.epoch << "," << format_cell(e.train_total) << "," << format_cell(e.val_total) << ","
        << format_cell(e.train_force) << "," << format_cell(e.val_force) << ","
        << format_cell(e.val_miou_top) << "," << format_cell(e.val_miou_side) << "\n";
    }
    if (!f) throw std::runtime_error("curves: write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("curves: rename failed for " + path);
  }
}

TrainResult train(const TrainConfig& cfg, const LoadedDataset& ds) {
  cfg.validate();
  if (ds.train.empty() || ds.val.empty()) {
    throw std::invalid_argument("train: dataset must have non-empty train and val splits");
  }
  std::filesystem::create_directories(cfg.out_dir);

  Model<float> model = Model<float>::init(cfg.model, cfg.seed);
  AdamConfig acfg;
  acfg.lr = cfg.learning_rate;
  Adam adam(model, acfg);
  Rng shuffle_rng(Rng::mix(cfg.seed, 0x73687566ULL));

  const size_t n_params = model.parameters().size();
  std::vector<std::vector<float>> batch_grads(n_params);
  for (size_t p = 0; p < n_params; ++p) {
    batch_grads[p].assign(static_cast<size_t>(model.parameters()[p].second.size()), 0.0f);
  }

  TrainResult result;
  result.best_val_mse = std::numeric_limits<double>::infinity();
  result.checkpoint_path = cfg.out_dir + "/best.ckpt";
  result.curves_csv_path = cfg.out_dir + "/curves.csv";

  std::vector<int> order = ds.train;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_indices(order, shuffle_rng);

    double train_total = 0.0, train_force = 0.0;
    int64_t train_seen = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      const int64_t bsize = static_cast<int64_t>(end - start);
      std::vector<SamplePass> passes(static_cast<size_t>(bsize));
      try {
        parallel_for(bsize, cfg.threads, [&](int64_t i) {
          const StereoSample& s = ds.samples[static_cast<size_t>(order[start + i])];
          passes[static_cast<size_t>(i)] = run_sample(model, s, cfg, /*with_grads=*/true);
        });
      } catch (const NonFiniteError& e) {
        throw TrainAbortError("train: aborted at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(start / cfg.batch_size) + ": " + e.what());
      }
      for (auto& g : batch_grads) std::fill(g.begin(), g.end(), 0.0f);
      // Fixed sample order keeps the accumulated gradient independent of the
      // worker count.
      const float inv_b = 1.0f / static_cast<float>(bsize);
      for (const SamplePass& pass : passes) {
        for (size_t p = 0; p < n_params; ++p) {
          const std::vector<float>& g = pass.grads[p];
          std::vector<float>& acc = batch_grads[p];
          for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
        train_total += pass.losses.total;
        train_force += pass.losses.force;
        ++train_seen;
      }
      for (auto& g : batch_grads) {
        for (float& v : g) v *= inv_b;
      }
      adam.step(batch_grads);
    }

    // Validation pass, unshuffled.
    std::vector<SamplePass> val_passes(ds.val.size());
    try {
      parallel_for(static_cast<int64_t>(ds.val.size()), cfg.threads, [&](int64_t i) {
        const StereoSample& s = ds.samples[static_cast<size_t>(ds.val[static_cast<size_t>(i)])];
        val_passes[static_cast<size_t>(i)] = run_sample(model, s, cfg, /*with_grads=*/false);
      });
    } catch (const NonFiniteError& e) {
      throw TrainAbortError("train: aborted during validation after epoch " +
                            std::to_string(epoch) + ": " + e.what());
    }
    double val_total = 0.0, miou_top = 0.0, miou_side = 0.0, val_se = 0.0;
    for (size_t i = 0; i < val_passes.size(); ++i) {
      const auto& pass = val_passes[i];
      val_total += pass.losses.total;
      miou_top += pass.seg_top.miou;
      miou_side += pass.seg_side.miou;
      const ForceVector& f = ds.samples[static_cast<size_t>(ds.val[i])].force;
      const std::array<double, 3> target = {f.x, f.y, f.z};
      for (int c = 0; c < 3; ++c) {
        const double e = pass.pred_force[static_cast<size_t>(c)] - target[static_cast<size_t>(c)];
        val_se += e * e;
      }
    }
    const double n_val = static_cast<double>(val_passes.size());
    const double val_mse = val_se / (3.0 * n_val);
    const bool has_seg = cfg.model.with_segmentation_heads;

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_total = train_seen ? train_total / static_cast<double>(train_seen) : 0.0;
    stats.train_force = train_seen ? train_force / static_cast<double>(train_seen) : 0.0;
    stats.val_total = val_total / n_val;
    stats.val_force = val_mse;
    stats.val_miou_top = has_seg ? miou_top / n_val : std::numeric_limits<double>::quiet_NaN();
    stats.val_miou_side = has_seg ? miou_side / n_val : std::numeric_limits<double>::quiet_NaN();
    result.curves.push_back(stats);

    if (val_mse < result.best_val_mse) {
      result.best_val_mse = val_mse;
      result.best_epoch = epoch;
      TrainMeta meta;
      meta.epoch = epoch;
      meta.val_mse = val_mse;
      meta.seed = cfg.seed;
      save_checkpoint(model, meta, result.checkpoint_path);
    }
  }

  if (cfg.epochs == 0) {
    // Nothing trained; still persist the initial model for inspection.
    TrainMeta meta;
    meta.seed = cfg.seed;
    save_checkpoint(model, meta, result.checkpoint_path);
  }
  write_curves_csv(result.curves, result.curves_csv_path);

  result.report_json_path = cfg.out_dir + "/train.report.json";
  nlohmann::json report;
  report["config"] = cfg.to_json();
  report["checkpoint"] = result.checkpoint_path;
  report["best_epoch"] = result.best_epoch;
  report["best_val_mse"] = result.best_val_mse;
  report["curves"] = nlohmann::json::array();
  for (const auto& e : result.curves) {
    report["curves"].push_back({{"epoch", e.epoch},
                                {"train_total", e.train_total},
                                {"val_total", e.val_total},
                                {"train_force", e.train_force},
                                {"val_force", e.val_force},
                                {"val_miou_top", e.val_miou_top},
                                {"val_miou_side", e.val_miou_side}});
  }
  write_report_json(report, result.report_json_path);
  return result;
}

TrainResult train(const TrainConfig& cfg) {
  if (cfg.dataset_manifest.empty()) {
    throw std::invalid_argument("train: dataset_manifest is required");
  }
  LoadedDataset ds = LoadedDataset::load(cfg.dataset_manifest);
  return train(cfg, ds);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["dataset_id"] = dataset_id;
  j["corruption"] = corruption;
  j["corruption_spec"] = corruption_spec ? corruption_spec->to_json() : nlohmann::json();
  j["regression"] = {{"mse", regression.mse},
                     {"mae", regression.mae},
                     {"rmse", regression.rmse},
                     {"r2", regression.r2}};
  if (has_segmentation) {
    j["seg_top"] = {{"acc", seg_top.acc}, {"miou", seg_top.miou}, {"mdice", seg_top.mdice}};
    j["seg_side"] = {{"acc", seg_side.acc}, {"miou", seg_side.miou}, {"mdice", seg_side.mdice}};
  }
  j["force_error_hist"] = {{"lo", force_error_hist.lo},
                           {"hi", force_error_hist.hi},
                           {"counts", force_error_hist.counts},
                           {"total", force_error_hist.total}};
  j["sample_count"] = sample_count;
  j["runtime_seconds"] = runtime_seconds;
  return j;
}

EvalReport evaluate(const Model<float>& model, const LoadedDataset& ds, const std::string& split,
                    const NoiseSpec* corruption, int threads) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<int>& indices = ds.split(split);
  if (indices.empty()) throw std::invalid_argument("evaluate: split '" + split + "' is empty");

  TrainConfig loss_cfg;  // lambda defaults; only used for per-sample losses
  loss_cfg.model = model.config();

  std::vector<SamplePass> slots(indices.size());
  parallel_for(static_cast<int64_t>(indices.size()), threads, [&](int64_t i) {
    const int row = indices[static_cast<size_t>(i)];
    const StereoSample& s = ds.samples[static_cast<size_t>(row)];
    Image top = s.image_top, side = s.image_side;
    if (corruption) {
      // Inputs only; labels and masks stay clean.
      top = corrupt_seeded(top, *corruption, static_cast<uint64_t>(row) * 2);
      side = corrupt_seeded(side, *corruption, static_cast<uint64_t>(row) * 2 + 1);
    }
    slots[static_cast<size_t>(i)] =
        run_sample(model, s, loss_cfg, /*with_grads=*/false, &top, &side);
  });

  EvalReport report;
  report.dataset_id = ds.manifest.root + ":" + split;
  report.has_segmentation = model.config().with_segmentation_heads;
  if (corruption) {
    report.corruption = corruption->name();
    report.corruption_spec = *corruption;
  }
  std::vector<std::array<double, 3>> preds, targets;
  std::vector<double> errors;
  preds.reserve(slots.size());
  targets.reserve(slots.size());
  errors.reserve(slots.size() * 3);
  double acc_top = 0, miou_top = 0, mdice_top = 0, acc_side = 0, miou_side = 0, mdice_side = 0;
  for (size_t i = 0; i < slots.size(); ++i) {
    const ForceVector& f = ds.samples[static_cast<size_t>(indices[i])].force;
    preds.push_back(slots[i].pred_force);
    targets.push_back({f.x, f.y, f.z});
    for (int c = 0; c < 3; ++c) {
      errors.push_back(slots[i].pred_force[static_cast<size_t>(c)] - targets.back()[c]);
    }
    acc_top += slots[i].seg_top.acc;
    miou_top += slots[i].seg_top.miou;
    mdice_top += slots[i].seg_top.mdice;
    acc_side += slots[i].seg_side.acc;
    miou_side += slots[i].seg_side.miou;
    mdice_side += slots[i].seg_side.mdice;
  }
  report.regression = regression_metrics(preds, targets);
  const double n = static_cast<double>(slots.size());
  if (report.has_segmentation) {
    report.seg_top = {acc_top / n, miou_top / n, mdice_top / n};
    report.seg_side = {acc_side / n, miou_side / n, mdice_side / n};
  }
  report.force_error_hist = build_histogram(errors, 41);
  report.sample_count = static_cast<int>(slots.size());
  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void write_report_json(const nlohmann::json& j, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("report: cannot open " + tmp);
    f << j.dump(2) << "\n";
    if (!f) throw std::runtime_error("report: write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("report: rename failed for " + path);
  }
}

}  // namespace stereovit
