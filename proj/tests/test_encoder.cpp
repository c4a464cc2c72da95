#include <gtest/gtest.h>

#include <set>

#include <torch/torch.h>

#include "model_support.hpp"
#include "rarecell/encoder.hpp"
#include "rarecell/errors.hpp"
#include "rarecell/tensor.hpp"

using namespace rarecell;

namespace {

constexpr int kTiny = 16;

std::vector<Image> tiny_batch(int n, std::uint64_t seed) {
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) out.push_back(support::noise_image(kTiny, seed + i));
  return out;
}

}  // namespace

TEST(Backbone, SpecsAndUnknownTag) {
  const auto full = backbone_spec("resnet18");
  EXPECT_EQ(full.widths, (std::vector<int>{64, 128, 256, 512}));
  EXPECT_EQ(full.blocks, (std::vector<int>{2, 2, 2, 2}));
  EXPECT_THROW(backbone_spec("vgg"), ArgumentError);
}

TEST(Encoder, OutputShapes) {
  seed_torch(1);
  ResidualEncoder latent(support::mini_encoder(24, false, kTiny));
  ResidualEncoder pooled(support::mini_encoder(0, false, kTiny));
  const auto x = to_batch(tiny_batch(3, 0), kTiny);
  EXPECT_EQ(latent->forward(x).sizes(), (std::vector<int64_t>{3, 24}));
  EXPECT_EQ(pooled->forward(x).sizes(), (std::vector<int64_t>{3, pooled->feature_width()}));
  EXPECT_EQ(pooled->output_dim(), 128);
  EXPECT_THROW(latent->forward(torch::zeros({2, 3, 8, 8})), FormatError);
  EXPECT_THROW(latent->forward(torch::zeros({2, 1, kTiny, kTiny})), FormatError);
}

TEST(Encoder, FullResnet18At224) {
  seed_torch(1);
  ResidualEncoder enc(EncoderConfig{"resnet18", 32, 224, true});
  EXPECT_EQ(enc->downsample(), 32);
  torch::NoGradGuard g;
  enc->eval();
  EXPECT_EQ(enc->forward(torch::zeros({1, 3, 224, 224})).sizes(), (std::vector<int64_t>{1, 32}));
}

TEST(Encoder, BiasFreeHasNoShiftParameters) {
  ResidualEncoder enc(support::mini_encoder(8, true, kTiny));
  for (const auto& p : enc->named_parameters()) {
    EXPECT_EQ(p.key().find("bias"), std::string::npos) << p.key();
  }
  ResidualEncoder with_bias(support::mini_encoder(8, false, kTiny));
  bool any_bias = false;
  for (const auto& p : with_bias->named_parameters()) any_bias |= p.key().find("bias") != std::string::npos;
  EXPECT_TRUE(any_bias);
}

TEST(Encoder, SeededInitIsReproducible) {
  seed_torch(5);
  ResidualEncoder a(support::mini_encoder(8, false, kTiny));
  seed_torch(5);
  ResidualEncoder b(support::mini_encoder(8, false, kTiny));
  const auto pa = a->parameters(), pb = b->parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::equal(pa[i], pb[i]));
}

TEST(Encoder, ChunkedEncodingMatchesSingleBatch) {
  seed_torch(2);
  ResidualEncoder enc(support::mini_encoder(8, false, kTiny));
  const auto imgs = tiny_batch(7, 3);
  const auto whole = encode(enc, imgs, 256);
  const auto chunked = encode(enc, imgs, 3);
  EXPECT_TRUE(torch::allclose(whole, chunked, 1e-5, 1e-6));
  EXPECT_TRUE(enc->is_training());
}

TEST(Autoencoder, ReconstructsInputShape) {
  seed_torch(3);
  Autoencoder ae(support::mini_encoder(16, true, kTiny));
  const auto x = to_batch(tiny_batch(2, 9), kTiny);
  EXPECT_EQ(ae->forward(x).sizes(), x.sizes());
  EXPECT_THROW(Autoencoder(support::mini_encoder(16, true, 20)), ArgumentError);
}

TEST(Autoencoder, ZeroEpochsLogsOnlyInitialHoldout) {
  seed_torch(4);
  Autoencoder ae(support::mini_encoder(8, true, kTiny));
  Augmenter aug(support::small_policy(kTiny));
  const auto data = support::cells("n", 40, false, 1, kTiny);
  OptimOptions o;
  o.epochs = 0;
  const auto before = ae->encoder->parameters()[0].clone();
  const auto log = train_autoencoder(ae, data, aug, o);
  ASSERT_EQ(log.epochs.size(), 1u);
  EXPECT_EQ(log.epochs[0].epoch, 0);
  EXPECT_TRUE(log.epochs[0].values.count("holdout"));
  EXPECT_TRUE(torch::equal(before, ae->encoder->parameters()[0]));
}

TEST(Autoencoder, LossFallsOnConstantData) {
  seed_torch(6);
  Autoencoder ae(support::mini_encoder(8, true, kTiny));
  auto policy = support::small_policy(kTiny);
  policy.weak.rgb_shift = 0.0;
  Augmenter aug(policy);
  InMemoryImages data;
  for (int i = 0; i < 32; ++i) data.push_back("c" + std::to_string(i), Image::filled(kTiny, 0.7f, 0.3f, 0.5f));
  OptimOptions o;
  o.epochs = 15;
  o.lr = 1e-2;
  o.batch = 16;
  const auto log = train_autoencoder(ae, data, aug, o);
  ASSERT_EQ(log.epochs.size(), 16u);
  EXPECT_LT(log.epochs.back().values.at("train"), 0.5 * log.epochs[1].values.at("train"));
}

TEST(Autoencoder, TransferCopiesEncoderExactly) {
  seed_torch(7);
  Autoencoder ae(support::mini_encoder(8, true, kTiny));
  seed_torch(8);
  ResidualEncoder target(support::mini_encoder(8, true, kTiny));
  copy_state(*ae->encoder, *target);
  const auto imgs = tiny_batch(4, 1);
  EXPECT_TRUE(torch::equal(encode(ae->encoder, imgs), encode(target, imgs)));
}

TEST(Checkpoint, RoundTripAndVersionCheck) {
  support::TempDir tmp("ckpt");
  seed_torch(9);
  ResidualEncoder a(support::mini_encoder(8, false, kTiny));
  save_checkpoint(tmp.path() / "enc.pt", *a, {{"note", "x"}});
  seed_torch(10);
  ResidualEncoder b(support::mini_encoder(8, false, kTiny));
  const auto meta = load_checkpoint(tmp.path() / "enc.pt", *b);
  EXPECT_EQ(meta.at("note"), "x");
  const auto imgs = tiny_batch(3, 4);
  EXPECT_TRUE(torch::equal(encode(a, imgs), encode(b, imgs)));

  auto sidecar = read_checkpoint_meta(tmp.path() / "enc.pt");
  EXPECT_EQ(sidecar.at("format_version"), kCheckpointFormat);
  EXPECT_THROW(load_checkpoint(tmp.path() / "missing.pt", *b), FormatError);
}

TEST(Batches, CoverEveryIndexOnceWithoutSingletons) {
  for (std::size_t n : {1u, 2u, 63u, 64u, 65u, 129u, 200u}) {
    const auto batches = epoch_batches(n, 64, 3);
    std::multiset<std::size_t> seen;
    for (const auto& b : batches) {
      if (n > 1) EXPECT_GE(b.size(), 2u);
      seen.insert(b.begin(), b.end());
    }
    EXPECT_EQ(seen.size(), n);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), n);
    EXPECT_EQ(epoch_batches(n, 64, 3), batches);
  }
}

TEST(Tensor, HelpersAndErrors) {
  EXPECT_THROW(to_batch({support::noise_image(8, 1), support::noise_image(9, 1)}, 8), FormatError);
  EXPECT_THROW(check_finite(std::nan(""), "x", 3), DivergenceError);
  try {
    check_finite(INFINITY, "stage", 4);
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 4);
  }
  const auto v = normalize_rows(torch::tensor({{3.0f, 4.0f, 0.0f}}));
  EXPECT_NEAR(v[0][0].item<float>(), 0.6f, 1e-6f);
  EXPECT_NEAR(v[0][1].item<float>(), 0.8f, 1e-6f);
}
