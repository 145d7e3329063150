#include <gtest/gtest.h>

#include <filesystem>

#include "dladiff/face.hpp"
#include "dladiff/identity.hpp"

using namespace dladiff;

TEST(Dataset, DeterministicUnderSeed) {
    const FaceDataset a = generate_identity_set(3, 2, 11, 40);
    const FaceDataset b = generate_identity_set(3, 2, 11, 40);
    const FaceDataset c = generate_identity_set(3, 2, 12, 40);
    ASSERT_EQ(a.samples.size(), 6u);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        EXPECT_EQ(a.samples[i].image32, b.samples[i].image32);
        EXPECT_EQ(a.samples[i].image112, b.samples[i].image112);
    }
    EXPECT_NE(a.samples[0].image32, c.samples[0].image32);
    EXPECT_EQ(a.identities.front().id, 40);
    EXPECT_EQ(a.of_identity(41).size(), 2u);
}

TEST(Dataset, LandmarksScaleBetweenRenditions) {
    const FaceDataset d = generate_identity_set(2, 2, 3);
    for (const FaceSample& s : d.samples)
        for (std::size_t i = 0; i < s.landmarks32.size(); ++i) {
            EXPECT_NEAR(s.landmarks112[i].x * 32.0 / 112.0, s.landmarks32[i].x, 1e-9);
            EXPECT_NEAR(s.landmarks112[i].y * 32.0 / 112.0, s.landmarks32[i].y, 1e-9);
        }
}

TEST(Dataset, SaveLoadRoundTrip) {
    const FaceDataset d = generate_identity_set(2, 2, 5);
    const auto dir = std::filesystem::temp_directory_path() / "dladiff_dataset_test";
    std::filesystem::remove_all(dir);
    save_dataset(d, dir);
    const FaceDataset r = load_dataset(dir);
    ASSERT_EQ(r.samples.size(), d.samples.size());
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        EXPECT_EQ(r.samples[i].image32, d.samples[i].image32.quantized());
        EXPECT_NEAR(r.samples[i].landmarks32[2].x, d.samples[i].landmarks32[2].x, 1e-9);
    }
    std::filesystem::remove_all(dir);
}

TEST(Encoder, CheckpointRoundTripPreservesEmbedding) {
    const EncoderWeights e = EncoderWeights::init(default_encoder_specs()[1], 9);
    const EncoderWeights r = EncoderWeights::from_checkpoint(e.to_checkpoint());
    const ImageTensor x(kCropSize, kCropSize, 3, 0.4);
    EXPECT_EQ(encode(e, x).vector(), encode(r, x).vector());
    EXPECT_EQ(r.spec.id, e.spec.id);
}

TEST(Encoder, EmbeddingIsUnitNorm) {
    for (const EncoderSpec& s : default_encoder_specs()) {
        const EncoderWeights e = EncoderWeights::init(s, 3);
        const IdentityEmbedding v = encode(e, ImageTensor(kCropSize, kCropSize, 3, 0.6));
        EXPECT_NEAR(sum_sq(v.vector()), 1.0, 1e-12);
        EXPECT_EQ(v.dim(), s.dim);
    }
}

TEST(Encoder, TrainingSeparatesIdentities) {
    const FaceDataset train = generate_identity_set(16, 4, 21);
    EncoderTrainConfig cfg;
    cfg.steps = 200;
    const EncoderWeights e = train_encoder(default_encoder_specs()[0], train, cfg);
    // Unseen poses of the training identities.
    const FaceDataset probe = generate_identity_set(16, 7, 21);
    std::vector<ImageTensor> crops;
    std::vector<int> labels;
    for (const FaceSample& s : probe.samples)
        if (s.pose_index >= 4 && s.identity < 8) {
            crops.push_back(aligned_crops(s)[0]);
            labels.push_back(s.identity);
        }
    const double auc = verification_auc(e, crops, labels);
    EXPECT_GT(auc, 0.85);
    const EncoderWeights untrained = EncoderWeights::init(default_encoder_specs()[0], 1);
    EXPECT_GT(auc, verification_auc(untrained, crops, labels));
}

TEST(Encoder, TrainingNeedsTwoIdentities) {
    FaceDataset one = generate_identity_set(2, 3, 1);
    std::erase_if(one.samples, [](const FaceSample& s) { return s.identity != 0; });
    one.identities.resize(1);
    EXPECT_THROW(train_encoder(default_encoder_specs()[0], one, EncoderTrainConfig{}), TrainingError);
}
