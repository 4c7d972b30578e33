#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "stereovit/checkpoint.hpp"
#include "stereovit/rng.hpp"

using namespace stereovit;

namespace {

Model<float> small_model(uint64_t seed) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.depth = 1;
  return Model<float>::init(cfg, seed);
}

Tensor<float> random_image(const ModelConfig& cfg, Rng& rng) {
  std::vector<float> data(static_cast<size_t>(cfg.channels) * cfg.image_size * cfg.image_size);
  for (float& v : data) v = static_cast<float>(rng.uniform());
  return Tensor<float>::from_data({cfg.channels, cfg.image_size, cfg.image_size},
                                  std::move(data));
}

}  // namespace

TEST_CASE("save-load-save produces byte-identical checkpoints") {
  Model<float> model = small_model(101);
  TrainMeta meta;
  meta.epoch = 17;
  meta.val_mse = 3.25e-4;
  meta.seed = 101;
  const std::vector<uint8_t> first = checkpoint_bytes(model, meta);
  LoadedCheckpoint loaded = load_checkpoint_bytes(first);
  CHECK(loaded.meta.epoch == 17);
  CHECK(loaded.meta.val_mse == doctest::Approx(3.25e-4));
  CHECK(loaded.meta.seed == 101);
  const std::vector<uint8_t> second = checkpoint_bytes(loaded.model, loaded.meta);
  CHECK(first == second);
}

TEST_CASE("loading restores forward outputs exactly") {
  Model<float> model = small_model(102);
  Rng rng(102);
  auto top = random_image(model.config(), rng);
  auto side = random_image(model.config(), rng);
  auto before = model.forward(top, side);

  TrainMeta meta;
  meta.seed = 102;
  LoadedCheckpoint loaded = load_checkpoint_bytes(checkpoint_bytes(model, meta));
  auto after = loaded.model.forward(top, side);
  CHECK(after.force.data() == before.force.data());
  CHECK(after.seg_top.data() == before.seg_top.data());
  CHECK(after.seg_side.data() == before.seg_side.data());
}

TEST_CASE("file round trip through disk") {
  const std::string path = std::filesystem::temp_directory_path() / "ckpt_roundtrip.ckpt";
  Model<float> model = small_model(103);
  TrainMeta meta;
  meta.epoch = 2;
  meta.seed = 103;
  save_checkpoint(model, meta, path);
  LoadedCheckpoint loaded = load_checkpoint(path);
  CHECK(checkpoint_bytes(loaded.model, loaded.meta) == checkpoint_bytes(model, meta));
  std::remove(path.c_str());
}

TEST_CASE("corrupted magic bytes are rejected before any state is built") {
  Model<float> model = small_model(104);
  std::vector<uint8_t> bytes = checkpoint_bytes(model, TrainMeta{});
  bytes[1] = 'X';
  CHECK_THROWS_WITH_AS(load_checkpoint_bytes(bytes), doctest::Contains("magic"),
                       std::runtime_error);
}

TEST_CASE("CRC detects payload tampering") {
  Model<float> model = small_model(105);
  std::vector<uint8_t> bytes = checkpoint_bytes(model, TrainMeta{});
  bytes[bytes.size() / 3] ^= 0x01;
  CHECK_THROWS_WITH_AS(load_checkpoint_bytes(bytes), doctest::Contains("CRC"),
                       std::runtime_error);
}

TEST_CASE("truncated files are a distinct error") {
  Model<float> model = small_model(106);
  std::vector<uint8_t> bytes = checkpoint_bytes(model, TrainMeta{});
  bytes.resize(bytes.size() / 2);
  // With the tail gone the CRC cannot match either; accept both failure
  // modes but require failure.
  CHECK_THROWS_AS(load_checkpoint_bytes(bytes), std::runtime_error);

  std::vector<uint8_t> tiny = {'T', 'F', 'S', 'G'};
  CHECK_THROWS_WITH_AS(load_checkpoint_bytes(tiny), doctest::Contains("truncated"),
                       std::runtime_error);
}

TEST_CASE("unsupported version is rejected") {
  Model<float> model = small_model(107);
  std::vector<uint8_t> bytes = checkpoint_bytes(model, TrainMeta{});
  bytes[4] = 99;  // version field, little-endian
  // Re-seal the CRC so only the version differs.
  const uint32_t crc = crc32_ieee(bytes.data(), bytes.size() - 4);
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = static_cast<uint8_t>(crc >> (8 * i));
  CHECK_THROWS_WITH_AS(load_checkpoint_bytes(bytes), doctest::Contains("version"),
                       std::runtime_error);
}

TEST_CASE("checkpoint magic spells TFSG") {
  Model<float> model = small_model(108);
  std::vector<uint8_t> bytes = checkpoint_bytes(model, TrainMeta{});
  CHECK(bytes[0] == 'T');
  CHECK(bytes[1] == 'F');
  CHECK(bytes[2] == 'S');
  CHECK(bytes[3] == 'G');
}
