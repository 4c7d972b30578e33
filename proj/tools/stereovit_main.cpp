// Command-line surface: dataset generation, training, evaluation with the
// corruption suite, a single-image corruption utility, the fast invariant
// suite, and the parameter ledger.
//
// Exit codes: 0 ok, 1 verify failure, 2 configuration error, 3 I/O error,
// 4 non-finite training abort, 5 checkpoint/dataset mismatch.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "stereovit/checkpoint.hpp"
#include "stereovit/corruptions.hpp"
#include "stereovit/dataset.hpp"
#include "stereovit/selfcheck.hpp"
#include "stereovit/train.hpp"

using namespace stereovit;

namespace {

constexpr int kExitVerifyFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNanAbort = 4;
constexpr int kExitMismatch = 5;

class MismatchError : public std::runtime_error {
 public:
  explicit MismatchError(const std::string& what) : std::runtime_error(what) {}
};

nlohmann::json load_config_file(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config file " + path + ": " + e.what());
  }
}

int run_guarded(const std::function<void()>& fn) {
  try {
    fn();
    return 0;
  } catch (const TrainAbortError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNanAbort;
  } catch (const MismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMismatch;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

struct SeedSummary {
  double mean = 0.0;
  double stddev = 0.0;
};

SeedSummary summarize(const std::vector<double>& values) {
  SeedSummary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.stddev += (v - s.mean) * (v - s.mean);
  s.stddev = values.size() > 1 ? std::sqrt(s.stddev / static_cast<double>(values.size() - 1)) : 0.0;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stereo vision transformer: catheter segmentation + 3D tip-force regression"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (flags override its values)");

  // ---- generate ----------------------------------------------------------
  auto* cmd_generate = app.add_subcommand("generate", "write a synthetic stereo dataset");
  std::string gen_out = "dataset";
  int gen_count = 2000;
  uint64_t gen_seed = 0;
  std::string gen_background;
  double gen_force_range = -1.0;
  int gen_image_size = 0;
  cmd_generate->add_option("--out", gen_out, "output directory");
  cmd_generate->add_option("--count", gen_count, "number of samples");
  auto* gen_seed_opt = cmd_generate->add_option("--seed", gen_seed, "generator seed");
  cmd_generate->add_option("--background", gen_background, "plain | clutter");
  cmd_generate->add_option("--force-range", gen_force_range, "force range in Newtons");
  cmd_generate->add_option("--image-size", gen_image_size, "square image size in px");

  // ---- train -------------------------------------------------------------
  auto* cmd_train = app.add_subcommand("train", "train a model on a generated dataset");
  std::string train_data, train_out = "runs", train_variant;
  int train_epochs = -1, train_batch = -1, train_seeds = 1, train_threads = 0;
  double train_lr = -1.0;
  uint64_t train_seed = 0;
  bool no_seg_heads = false;
  cmd_train->add_option("--data", train_data, "dataset manifest.csv");
  cmd_train->add_option("--out", train_out, "run output directory");
  cmd_train->add_option("--variant", train_variant, "model preset: tiny | small | desk");
  cmd_train->add_flag("--no-seg-heads", no_seg_heads, "force-only ablation variant");
  cmd_train->add_option("--epochs", train_epochs, "training epochs");
  cmd_train->add_option("--batch", train_batch, "batch size");
  cmd_train->add_option("--lr", train_lr, "fixed learning rate");
  auto* train_seed_opt = cmd_train->add_option("--seed", train_seed, "base training seed");
  cmd_train->add_option("--seeds", train_seeds, "number of seeded runs (mean +/- std protocol)");
  cmd_train->add_option("--threads", train_threads, "worker cap (0: TFSG_THREADS/hardware)");

  // ---- eval --------------------------------------------------------------
  auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint, optionally under noise");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_corrupt, eval_out;
  uint64_t eval_noise_seed = 1;
  int eval_threads = 0;
  cmd_eval->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  cmd_eval->add_option("--data", eval_data, "dataset manifest.csv")->required();
  cmd_eval->add_option("--split", eval_split, "train | val | test");
  cmd_eval->add_option("--corrupt", eval_corrupt,
                       "noise kind (impulse|gaussian|poisson|motion|defocus|stripe) or 'all'");
  cmd_eval->add_option("--noise-seed", eval_noise_seed, "corruption seed");
  cmd_eval->add_option("--out", eval_out, "report path stem (default: next to the checkpoint)");
  cmd_eval->add_option("--threads", eval_threads, "worker cap");

  // ---- corrupt -----------------------------------------------------------
  auto* cmd_corrupt = app.add_subcommand("corrupt", "apply one noise kind to a PGM image");
  std::string cor_in, cor_out, cor_kind = "gaussian";
  uint64_t cor_seed = 1;
  cmd_corrupt->add_option("--in", cor_in, "input PGM")->required();
  cmd_corrupt->add_option("--out", cor_out, "output PGM")->required();
  cmd_corrupt->add_option("--kind", cor_kind, "noise kind");
  cmd_corrupt->add_option("--noise-seed", cor_seed, "corruption seed");

  // ---- verify ------------------------------------------------------------
  auto* cmd_verify = app.add_subcommand("verify", "run the fast invariant suite");

  // ---- params ------------------------------------------------------------
  auto* cmd_params = app.add_subcommand("params", "print the parameter ledger");
  std::string params_variant = "desk";
  bool params_no_seg = false;
  cmd_params->add_option("--variant", params_variant, "model preset");
  cmd_params->add_flag("--no-seg-heads", params_no_seg, "force-only ablation variant");

  CLI11_PARSE(app, argc, argv);

  if (*cmd_generate) {
    return run_guarded([&] {
      nlohmann::json file = load_config_file(config_path);
      SceneConfig scene = file.contains("scene") ? SceneConfig::from_json(file.at("scene"))
                                                 : SceneConfig{};
      if (gen_seed_opt->count()) scene.seed = gen_seed;
      if (!gen_background.empty()) scene.background = gen_background;
      if (gen_force_range >= 0.0) scene.force_range = gen_force_range;
      if (gen_image_size > 0) scene.image_size = gen_image_size;
      scene.validate();
      DatasetManifest manifest = generate_dataset(gen_count, scene, gen_out);
      std::cerr << "split sizes: train=" << manifest.split_indices("train").size()
                << " val=" << manifest.split_indices("val").size()
                << " test=" << manifest.split_indices("test").size() << "\n";
      std::cout << manifest_path(gen_out) << "\n";
    });
  }

  if (*cmd_train) {
    return run_guarded([&] {
      nlohmann::json file = load_config_file(config_path);
      TrainConfig cfg = file.contains("train") ? TrainConfig::from_json(file.at("train"))
                                               : TrainConfig{};
      if (file.contains("model")) cfg.model = ModelConfig::from_json(file.at("model"));
      if (!train_variant.empty()) cfg.model = ModelConfig::preset(train_variant);
      if (no_seg_heads) cfg.model.with_segmentation_heads = false;
      if (!train_data.empty()) cfg.dataset_manifest = train_data;
      if (train_epochs >= 0) cfg.epochs = train_epochs;
      if (train_batch >= 1) cfg.batch_size = train_batch;
      if (train_lr >= 0.0) cfg.learning_rate = train_lr;
      if (train_seed_opt->count()) cfg.seed = train_seed;
      if (train_threads > 0) cfg.threads = train_threads;
      cfg.validate();
      if (cfg.dataset_manifest.empty()) {
        throw std::invalid_argument("train: --data (or train.dataset_manifest) is required");
      }
      if (train_seeds < 1) throw std::invalid_argument("train: --seeds must be >= 1");

      LoadedDataset ds = LoadedDataset::load(cfg.dataset_manifest);
      if (train_seeds == 1) {
        cfg.out_dir = train_out;
        TrainResult result = train(cfg, ds);
        std::cerr << "best epoch " << result.best_epoch << ", val force MSE "
                  << result.best_val_mse << "\n";
        std::cout << result.checkpoint_path << "\n";
        return;
      }

      // Repeated-seed protocol: run N seeds, report mean +/- std of the
      // held-out metrics of each best checkpoint.
      std::vector<double> mses, r2s, mious;
      nlohmann::json summary;
      summary["runs"] = nlohmann::json::array();
      for (int s = 0; s < train_seeds; ++s) {
        TrainConfig run_cfg = cfg;
        run_cfg.seed = cfg.seed + static_cast<uint64_t>(s);
        run_cfg.out_dir = train_out + "/seed" + std::to_string(run_cfg.seed);
        TrainResult result = train(run_cfg, ds);
        LoadedCheckpoint best = load_checkpoint(result.checkpoint_path);
        EvalReport report = evaluate(best.model, ds, "test", nullptr, cfg.threads);
        nlohmann::json run;
        run["seed"] = run_cfg.seed;
        run["checkpoint"] = result.checkpoint_path;
        run["test"] = report.to_json();
        summary["runs"].push_back(run);
        mses.push_back(report.regression.mse);
        r2s.push_back(report.regression.r2);
        if (report.has_segmentation) {
          mious.push_back(0.5 * (report.seg_top.miou + report.seg_side.miou));
        }
      }
      SeedSummary mse = summarize(mses), r2 = summarize(r2s);
      summary["test_mse"] = {{"mean", mse.mean}, {"std", mse.stddev}};
      summary["test_r2"] = {{"mean", r2.mean}, {"std", r2.stddev}};
      std::fprintf(stderr, "%-12s %12s %12s\n", "metric", "mean", "std");
      std::fprintf(stderr, "%-12s %12.4e %12.4e\n", "test_mse", mse.mean, mse.stddev);
      std::fprintf(stderr, "%-12s %12.4f %12.4f\n", "test_r2", r2.mean, r2.stddev);
      if (!mious.empty()) {
        SeedSummary miou = summarize(mious);
        summary["test_miou"] = {{"mean", miou.mean}, {"std", miou.stddev}};
        std::fprintf(stderr, "%-12s %12.4f %12.4f\n", "test_miou", miou.mean, miou.stddev);
      }
      const std::string summary_path = train_out + "/summary.json";
      std::filesystem::create_directories(train_out);
      write_report_json(summary, summary_path);
      std::cout << summary_path << "\n";
    });
  }

  if (*cmd_eval) {
    return run_guarded([&] {
      LoadedCheckpoint ckpt = load_checkpoint(eval_ckpt);
      LoadedDataset ds = LoadedDataset::load(eval_data);
      const std::string base =
          eval_out.empty() ? eval_ckpt.substr(0, eval_ckpt.find_last_of('.')) : eval_out;

      auto run_eval = [&](const NoiseSpec* spec) {
        try {
          return evaluate(ckpt.model, ds, eval_split, spec, eval_threads);
        } catch (const std::invalid_argument& e) {
          // Shape conflicts between the checkpoint's config and the dataset.
          throw MismatchError(std::string("eval: ") + e.what());
        }
      };

      if (eval_corrupt.empty()) {
        EvalReport report = run_eval(nullptr);
        const std::string path = base + ".report.json";
        write_report_json(report.to_json(), path);
        std::cout << path << "\n";
        return;
      }

      if (eval_corrupt != "all") {
        NoiseSpec spec = NoiseSpec::by_name(eval_corrupt);
        spec.seed = eval_noise_seed;
        EvalReport report = run_eval(&spec);
        const std::string path = base + "." + spec.name() + ".report.json";
        write_report_json(report.to_json(), path);
        std::cout << path << "\n";
        return;
      }

      // The full table: clean plus the six noise kinds, with clean-relative
      // MSE multipliers and mIoU point drops.
      EvalReport clean = run_eval(nullptr);
      nlohmann::json combined;
      combined["clean"] = clean.to_json();
      combined["corruptions"] = nlohmann::json::array();
      std::fprintf(stderr, "%-10s %12s %9s %11s %11s\n", "noise", "mse", "ratio", "miou_top",
                   "miou_side");
      std::fprintf(stderr, "%-10s %12.4e %9s %11.4f %11.4f\n", "clean", clean.regression.mse, "-",
                   clean.seg_top.miou, clean.seg_side.miou);
      for (NoiseSpec spec : noise_suite(eval_noise_seed)) {
        EvalReport report = run_eval(&spec);
        nlohmann::json j = report.to_json();
        j["mse_ratio"] = report.regression.mse / clean.regression.mse;
        if (report.has_segmentation) {
          j["miou_drop_top"] = (clean.seg_top.miou - report.seg_top.miou) * 100.0;
          j["miou_drop_side"] = (clean.seg_side.miou - report.seg_side.miou) * 100.0;
        }
        combined["corruptions"].push_back(j);
        std::fprintf(stderr, "%-10s %12.4e %8.2fx %11.4f %11.4f\n", report.corruption.c_str(),
                     report.regression.mse, report.regression.mse / clean.regression.mse,
                     report.seg_top.miou, report.seg_side.miou);
      }
      const std::string path = base + ".noise.report.json";
      write_report_json(combined, path);
      std::cout << path << "\n";
    });
  }

  if (*cmd_corrupt) {
    return run_guarded([&] {
      NoiseSpec spec = NoiseSpec::by_name(cor_kind);
      spec.seed = cor_seed;
      Image img = read_pgm(cor_in);
      write_pgm(corrupt(img, spec), cor_out);
      std::cout << cor_out << "\n";
    });
  }

  if (*cmd_verify) {
    std::vector<CheckResult> results;
    const int rc = run_guarded([&] { results = run_self_checks(); });
    if (rc != 0) return rc;
    bool all_ok = true;
    for (const CheckResult& r : results) {
      std::cout << (r.pass ? "ok   " : "FAIL ") << r.name << " (" << r.detail << ")\n";
      all_ok = all_ok && r.pass;
    }
    std::cout << (all_ok ? "verify: all checks passed" : "verify: FAILURES present") << "\n";
    return all_ok ? 0 : kExitVerifyFailed;
  }

  if (*cmd_params) {
    return run_guarded([&] {
      nlohmann::json file = load_config_file(config_path);
      ModelConfig cfg = file.contains("model") ? ModelConfig::from_json(file.at("model"))
                                               : ModelConfig::preset(params_variant);
      if (params_no_seg) cfg.with_segmentation_heads = false;
      int64_t total = 0;
      for (const ParamSpec& spec : parameter_ledger(cfg)) {
        std::printf("%-24s %-16s %10lld\n", spec.name.c_str(), shape_str(spec.shape).c_str(),
                    static_cast<long long>(spec.count()));
        total += spec.count();
      }
      std::printf("%-24s %-16s %10lld\n", "total", "", static_cast<long long>(total));
    });
  }

  return 0;
}
