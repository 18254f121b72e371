#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "slotid/model.hpp"
#include "slotid/synthgen.hpp"
#include "slotid/tensor_io.hpp"
#include "test_util.hpp"

// Regression snapshots of deterministic pipelines. Set SLOTID_UPDATE_GOLDEN=1 to rewrite them.

using namespace slotid;
namespace fs = std::filesystem;

namespace {

void check_golden(const std::string& name, const Tensor<double>& got, double tol) {
  const fs::path path = fs::path(SLOTID_TEST_DATA_DIR) / "golden" / (name + ".slid");
  if (std::getenv("SLOTID_UPDATE_GOLDEN")) {
    fs::create_directories(path.parent_path());
    io::save(path, got);
    GTEST_SKIP() << "rewrote " << path;
  }
  ASSERT_TRUE(fs::exists(path)) << "missing snapshot " << path << "; run with SLOTID_UPDATE_GOLDEN=1";
  const auto want = io::load<double>(path);
  ASSERT_EQ(want.shape(), got.shape());
  EXPECT_LE(max_abs_diff(want, got), tol);
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.width = 12;
  mc.stsa_layers = 1;
  mc.stsa_heads = 2;
  mc.slots = 3;
  mc.iterations = 2;
  mc.backbone.width = 12;
  mc.backbone.blocks = 2;
  mc.backbone.heads = 2;
  mc.backbone.lora_rank = 2;
  mc.backbone.out_init_std = 0.3;
  return mc;
}

}  // namespace

TEST(Golden, CodecLatents) {
  const auto clip = synth::render_clip(synth::gen_identity(5), synth::gen_motion(6, 4, 2), 4, 32, 32);
  check_golden("codec_latents", synth::ToyCodec(0x5EEDC0DECULL).encode(clip.frames), 1e-12);
}

TEST(Golden, SlotReaderIdentity) {
  SlotIdModel<double> model(small_model(), 8);
  const auto z = testutil::randn({2, 4, 4, 4, 4}, 9);
  check_golden("reader_identity", model.encode_identity(z, 3).c_id.value(), 1e-10);
}

TEST(Golden, BackboneVelocity) {
  SlotIdModel<double> model(small_model(), 10);
  Rng rng(11);
  for (auto& p : model.params().all())
    if (p.trainable) p.var.mutable_value() = rng.normal_tensor<double>(p.var.shape(), 0.1);
  ConditionInputs<double> in{testutil::randn({1, 4, 4, 4, 4}, 12), testutil::randn({1, 4, 1, 4, 4}, 13), {{8, 5}}};
  const auto out = model.predict(testutil::randn({1, 4, 4, 4, 4}, 14), {0.35}, in, 7, nullptr);
  check_golden("backbone_velocity", out.velocity.value(), 1e-10);
}
