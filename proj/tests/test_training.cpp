#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "stereovit/train.hpp"

using namespace stereovit;

namespace {

std::string temp_dataset(int count, uint64_t seed, const std::string& tag,
                         const std::string& background = "plain") {
  const auto dir = std::filesystem::temp_directory_path() / ("svtrain_" + tag);
  std::filesystem::remove_all(dir);
  SceneConfig scene;
  scene.seed = seed;
  scene.background = background;
  generate_dataset(count, scene, dir.string());
  return manifest_path(dir.string());
}

TrainConfig mini_config(const std::string& manifest, const std::string& tag) {
  TrainConfig cfg;
  cfg.model = ModelConfig::desk();
  cfg.model.depth = 2;
  cfg.dataset_manifest = manifest;
  cfg.out_dir = (std::filesystem::temp_directory_path() / ("svrun_" + tag)).string();
  std::filesystem::remove_all(cfg.out_dir);
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-4;
  cfg.seed = 7;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("adam leaves parameters untouched on zero gradients") {
  auto w = Tensor<float>::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam adam({w}, cfg);
  adam.step({{0.0f, 0.0f, 0.0f}});
  CHECK(adam.steps() == 1);
  CHECK(w.data() == std::vector<float>{1.0f, -2.0f, 0.5f});
}

TEST_CASE("adam first step matches the hand-evaluated recurrences") {
  // w=1, g=1, lr=0.1: bias-corrected m^=v^=1, so w -> 1 - 0.1/(1+eps).
  auto w = Tensor<float>::from_data({1}, {1.0f}, true);
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam adam({w}, cfg);
  adam.step({{1.0f}});
  CHECK(w.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adam drives a quadratic to its minimum") {
  auto w = Tensor<float>::from_data({1}, {1.0f}, true);
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam adam({w}, cfg);
  for (int i = 0; i < 100; ++i) {
    adam.step({{2.0f * w.data()[0]}});  // d/dw of w^2
  }
  CHECK(std::fabs(w.data()[0]) < 0.05);
}

TEST_CASE("zero learning rate trains to bit-identical parameters") {
  const std::string manifest = temp_dataset(20, 3, "lr0");
  TrainConfig cfg = mini_config(manifest, "lr0");
  cfg.learning_rate = 0.0;
  Model<float> reference = Model<float>::init(cfg.model, cfg.seed);
  TrainResult result = train(cfg);
  LoadedCheckpoint loaded = load_checkpoint(result.checkpoint_path);
  for (const auto& [name, t] : loaded.model.parameters()) {
    CHECK(reference.param(name).data() == t.data());
  }
}

TEST_CASE("training is deterministic: identical curves and checkpoint bytes") {
  const std::string manifest = temp_dataset(20, 4, "det");
  TrainConfig cfg = mini_config(manifest, "det1");
  TrainResult a = train(cfg);
  TrainConfig cfg2 = mini_config(manifest, "det2");
  TrainResult b = train(cfg2);
  CHECK(slurp(a.curves_csv_path) == slurp(b.curves_csv_path));
  CHECK(slurp(a.checkpoint_path) == slurp(b.checkpoint_path));
}

TEST_CASE("thread count does not change the training trajectory") {
  const std::string manifest = temp_dataset(20, 5, "threads");
  TrainConfig cfg1 = mini_config(manifest, "thr1");
  cfg1.threads = 1;
  TrainConfig cfg2 = mini_config(manifest, "thr2");
  cfg2.threads = 2;
  TrainResult a = train(cfg1);
  TrainResult b = train(cfg2);
  CHECK(slurp(a.curves_csv_path) == slurp(b.curves_csv_path));
  CHECK(slurp(a.checkpoint_path) == slurp(b.checkpoint_path));
}

TEST_CASE("one multitask step moves every component; force-only leaves seg heads") {
  const std::string manifest = temp_dataset(20, 6, "flow");
  LoadedDataset ds = LoadedDataset::load(manifest);

  TrainConfig cfg = mini_config(manifest, "flow");
  cfg.epochs = 1;
  cfg.batch_size = 8;

  SUBCASE("all lambdas on: every parameter tensor changes") {
    Model<float> before = Model<float>::init(cfg.model, cfg.seed);
    TrainResult result = train(cfg, ds);
    LoadedCheckpoint after = load_checkpoint(result.checkpoint_path);
    for (const auto& [name, t] : after.model.parameters()) {
      INFO(name);
      CHECK(before.param(name).data() != t.data());
    }
  }
  SUBCASE("seg lambdas zero: segmentation head is bit-unchanged") {
    cfg.lambda_seg_enc = 0.0;
    cfg.lambda_seg_dec = 0.0;
    Model<float> before = Model<float>::init(cfg.model, cfg.seed);
    TrainResult result = train(cfg, ds);
    LoadedCheckpoint after = load_checkpoint(result.checkpoint_path);
    for (const auto& [name, t] : after.model.parameters()) {
      INFO(name);
      if (name.rfind("seg.", 0) == 0) {
        CHECK(before.param(name).data() == t.data());
      }
    }
    CHECK(before.param("force.w1").data() != after.model.param("force.w1").data());
  }
}

TEST_CASE("exploding losses abort with epoch and batch context") {
  const std::string manifest = temp_dataset(20, 8, "nan");
  TrainConfig cfg = mini_config(manifest, "nan");
  cfg.learning_rate = 1e18;  // guaranteed overflow within a couple of steps
  cfg.epochs = 3;
  CHECK_THROWS_WITH_AS(train(cfg), doctest::Contains("epoch"), TrainAbortError);
}

TEST_CASE("best checkpoint tracks the minimum validation force MSE") {
  const std::string manifest = temp_dataset(20, 9, "best");
  TrainConfig cfg = mini_config(manifest, "best");
  cfg.epochs = 4;
  TrainResult result = train(cfg);
  REQUIRE(result.curves.size() == 4);
  double best = 1e300;
  int best_epoch = 0;
  for (const auto& e : result.curves) {
    if (e.val_force < best) {
      best = e.val_force;
      best_epoch = e.epoch;
    }
  }
  CHECK(result.best_epoch == best_epoch);
  CHECK(result.best_val_mse == doctest::Approx(best));
  LoadedCheckpoint loaded = load_checkpoint(result.checkpoint_path);
  CHECK(loaded.meta.epoch == best_epoch);
  CHECK(loaded.meta.val_mse == doctest::Approx(best));
}

TEST_CASE("curves CSV carries the documented columns") {
  const std::string manifest = temp_dataset(20, 10, "csv");
  TrainConfig cfg = mini_config(manifest, "csv");
  cfg.epochs = 1;
  TrainResult result = train(cfg);
  std::ifstream f(result.curves_csv_path);
  std::string header;
  std::getline(f, header);
  CHECK(header == "epoch,train_total,val_total,train_force,val_force,val_miou_top,val_miou_side");
  std::string row;
  std::getline(f, row);
  CHECK(row.substr(0, 2) == "1,");
}

TEST_CASE("evaluation with sigma-zero gaussian equals the clean report") {
  const std::string manifest = temp_dataset(20, 11, "eval0");
  LoadedDataset ds = LoadedDataset::load(manifest);
  Model<float> model = Model<float>::init(ModelConfig::desk(), 3);

  EvalReport clean = evaluate(model, ds, "val");
  NoiseSpec g0 = NoiseSpec::by_name("gaussian");
  g0.gauss_sigma = 0.0;
  g0.gauss_mu = 0.0;
  EvalReport same = evaluate(model, ds, "val", &g0);
  CHECK(clean.regression.mse == same.regression.mse);
  CHECK(clean.regression.r2 == same.regression.r2);
  CHECK(clean.seg_top.miou == same.seg_top.miou);
  CHECK(clean.seg_side.mdice == same.seg_side.mdice);
  CHECK(clean.force_error_hist.counts == same.force_error_hist.counts);
}

TEST_CASE("an untrained model evaluates at chance level") {
  const std::string manifest = temp_dataset(30, 12, "chance");
  LoadedDataset ds = LoadedDataset::load(manifest);
  Model<float> model = Model<float>::init(ModelConfig::desk(), 4);
  EvalReport report = evaluate(model, ds, "test");
  CHECK(report.regression.r2 < 0.05);
  // Not meaningfully better than predicting all-background everywhere.
  CHECK(report.seg_top.miou < 0.75);
  CHECK(report.has_segmentation);
  int64_t total = 0;
  for (int64_t c : report.force_error_hist.counts) total += c;
  CHECK(total == report.force_error_hist.total);
  CHECK(total == 3 * report.sample_count);
}

TEST_CASE("evaluation histogram and report serialize cleanly") {
  const std::string manifest = temp_dataset(20, 13, "json");
  LoadedDataset ds = LoadedDataset::load(manifest);
  Model<float> model = Model<float>::init(ModelConfig::desk(), 5);
  NoiseSpec spec = NoiseSpec::by_name("impulse");
  spec.seed = 55;
  EvalReport report = evaluate(model, ds, "val", &spec);
  nlohmann::json j = report.to_json();
  CHECK(j.at("corruption") == "impulse");
  CHECK(j.at("corruption_spec").at("kind") == "impulse");
  CHECK(j.at("regression").contains("rmse"));
  CHECK(j.at("force_error_hist").at("counts").size() == 41);
  CHECK(j.at("seg_top").contains("miou"));
}
