#include <gtest/gtest.h>

#include <cmath>

#include "dladiff/finetune.hpp"
#include "dladiff/rng.hpp"

using namespace dladiff;

TEST(Schedule, AlphaBarIsProductOfAlphas) {
    for (int T : {10, 50, 1000}) {
        const NoiseSchedule s = make_short_schedule(T);
        double log_sum = 0;
        for (int t = 1; t <= T; ++t) {
            log_sum += std::log(1.0 - s.beta(t));
            EXPECT_NEAR(s.alpha(t), 1.0 - s.beta(t), 1e-15);
            EXPECT_NEAR(s.alpha_bar(t), std::exp(log_sum), 1e-12 * std::exp(log_sum) + 1e-300);
        }
    }
}

TEST(Schedule, ShortScheduleEndsNearPureNoise) {
    const NoiseSchedule s = make_short_schedule(50);
    EXPECT_LT(s.alpha_bar(50), 1e-3);
    EXPECT_NEAR(s.beta(1), 1e-4 * 1000.0 / 50.0, 1e-15);
}

TEST(Schedule, RejectsOutOfRangeTimestep) {
    const NoiseSchedule s = make_short_schedule(10);
    EXPECT_THROW(s.alpha_bar(0), ParameterError);
    EXPECT_THROW(s.alpha_bar(11), ParameterError);
}

TEST(Schedule, ClosedFormMatchesIterativeChain) {
    const NoiseSchedule s = make_short_schedule(50);
    std::mt19937_64 rng(3);
    const LatentTensor z0(Tensor::randn({2, 2, 4}, rng));
    // Chain: z_t = sqrt(alpha_t) z_{t-1} + sqrt(beta_t) e_t. Track the signal
    // coefficient and the accumulated noise directly.
    Tensor noise = Tensor::zeros({2, 2, 4});
    double coef = 1.0, var = 0.0;
    for (int t = 1; t <= 10; ++t) {
        const Tensor e = Tensor::randn({2, 2, 4}, rng);
        noise = noise * std::sqrt(s.alpha(t)) + e * std::sqrt(s.beta(t));
        coef *= std::sqrt(s.alpha(t));
        var = s.alpha(t) * var + s.beta(t);
        EXPECT_NEAR(coef, std::sqrt(s.alpha_bar(t)), 1e-12);
        EXPECT_NEAR(var, 1.0 - s.alpha_bar(t), 1e-12);
        const Tensor chain = z0.tensor() * coef + noise;
        const LatentTensor eps(noise * (1.0 / std::sqrt(var)));
        const LatentTensor closed = forward_noise(z0, t, eps, s);
        EXPECT_LT(max_abs(closed.tensor() - chain), 1e-6);
    }
}

TEST(Schedule, ForwardNoiseGraphMatchesValue) {
    const NoiseSchedule s = make_short_schedule(50);
    std::mt19937_64 rng(4);
    const LatentTensor z0(Tensor::randn({2, 2, 3}, rng)), eps(Tensor::randn({2, 2, 3}, rng));
    const ag::Var v = forward_noise(ag::constant(z0.tensor()), 17, ag::constant(eps.tensor()), s);
    EXPECT_LT(max_abs(v.value() - forward_noise(z0, 17, eps, s).tensor()), 1e-15);
}

class CodecTest : public ::testing::TestWithParam<CodecBasis> {};

TEST_P(CodecTest, AdjointIdentity) {
    const LatentCodec codec(4, 3, 2.0, GetParam());
    std::mt19937_64 rng(5);
    const ImageTensor x(Tensor::uniform({8, 12, 3}, rng, 0.0, 1.0));
    const LatentTensor z(Tensor::randn(codec.latent_shape(8, 12), rng));
    EXPECT_NEAR(dot(codec.encode(x).tensor(), z.tensor()), dot(x.tensor(), codec.encode_adjoint(z)), 1e-10);
}

TEST_P(CodecTest, RoundTripIsExact) {
    const LatentCodec codec(4, 3, 2.0, GetParam());
    std::mt19937_64 rng(6);
    const ImageTensor x(Tensor::uniform({8, 8, 3}, rng, 0.0, 1.0));
    const LatentTensor z = codec.encode(x);
    EXPECT_EQ(z.shape(), (Shape{2, 2, 48}));
    EXPECT_LT(max_abs(codec.decode_raw(z) - x.tensor()), 1e-12);
    EXPECT_LT(max_abs(codec.decode(z).tensor() - x.tensor()), 1e-12);
    const ag::Var zg = codec.encode(ag::constant(x.tensor()));
    EXPECT_LT(max_abs(zg.value() - z.tensor()), 1e-12);
}

TEST_P(CodecTest, GainScalesNorm) {
    const LatentCodec codec(4, 3, 2.0, GetParam());
    std::mt19937_64 rng(7);
    const ImageTensor x(Tensor::uniform({8, 8, 3}, rng, 0.0, 1.0));
    EXPECT_NEAR(sum_sq(codec.encode(x).tensor()), 4.0 * sum_sq(x.tensor()), 1e-9);
}

INSTANTIATE_TEST_SUITE_P(Bases, CodecTest, ::testing::Values(CodecBasis::dct, CodecBasis::random));

TEST(Codec, RejectsIndivisibleImage) {
    const LatentCodec codec;
    EXPECT_ANY_THROW(codec.encode(ImageTensor(6, 8, 3)));
}

TEST(Sampler, MatchesGaussianOracle) {
    // For data concentrated at a single latent point m, the exact eps
    // predictor is (z_t - sqrt(ab) m) / sqrt(1 - ab); ancestral sampling must
    // land on m.
    const NoiseSchedule s = make_short_schedule(50);
    const LatentCodec codec;
    std::mt19937_64 rng(8);
    const ImageTensor target(Tensor::uniform({8, 8, 3}, rng, 0.2, 0.8));
    const Tensor m = codec.encode(target).tensor();
    const NoisePredictor oracle = [&](const Tensor& z, int t, const TextCondition&) {
        const double ab = s.alpha_bar(t);
        return (z - m * std::sqrt(ab)) * (1.0 / std::sqrt(1.0 - ab));
    };
    const Tokenizer tok;
    const ImageTensor out = sample(oracle, s, codec, tok.encode(kPriorPrompt), 50, 1, 8);
    EXPECT_LT(max_abs(out.tensor() - target.tensor()), 1e-9);
}

TEST(Sampler, DeterministicUnderSeed) {
    const DiffusionStack stack;
    const UNetWeights w = UNetWeights::init(UNetConfig{}, 1);
    const TextCondition c = stack.tokenizer.encode(kTriggerPrompt);
    const ImageTensor a = sample(w, stack.schedule, stack.codec, c, nullptr, 5, 9, 8);
    const ImageTensor b = sample(w, stack.schedule, stack.codec, c, nullptr, 5, 9, 8);
    EXPECT_EQ(a, b);
}

TEST(Tokenizer, TriggerTokenIsMarked) {
    const Tokenizer tok;
    const TextCondition c = tok.encode(kTriggerPrompt);
    ASSERT_TRUE(c.trigger_index.has_value());
    EXPECT_EQ(c.tokens.at(*c.trigger_index), Tokenizer::kTrigger);
    EXPECT_FALSE(tok.encode(kPriorPrompt).trigger_index.has_value());
}

TEST(UNet, AttentionRowsSumToOneAndCaptureIsObservationOnly) {
    const DiffusionStack stack;
    const UNetWeights w = UNetWeights::init(UNetConfig{}, 2);
    std::mt19937_64 rng(10);
    const LatentTensor z(Tensor::randn(stack.codec.latent_shape(16, 16), rng));
    const TextCondition c = stack.tokenizer.encode(kTriggerPrompt);
    const UNetOutput plain = unet_predict(w, z, 20, c, nullptr, false);
    const UNetOutput cap = unet_predict(w, z, 20, c, nullptr, true);
    EXPECT_EQ(plain.eps_hat, cap.eps_hat);
    ASSERT_TRUE(cap.maps.has_value());
    for (const Tensor* m : {&cap.maps->cross_map, &cap.maps->self_map}) {
        for (int i = 0; i < m->dim(0); ++i) {
            double row = 0;
            for (int j = 0; j < m->dim(1); ++j) row += (*m)[static_cast<std::size_t>(i) * m->dim(1) + j];
            EXPECT_NEAR(row, 1.0, 1e-12);
        }
    }
}

TEST(UNet, CheckpointRoundTrip) {
    UNetConfig cfg;
    cfg.adapter = true;
    const UNetWeights w = UNetWeights::init(cfg, 3).with_lora(2, 4);
    const UNetWeights r = UNetWeights::from_checkpoint(w.to_checkpoint());
    EXPECT_EQ(r.config, w.config);
    EXPECT_EQ(r.params.size(), w.params.size());
    for (const auto& [k, v] : w.params) EXPECT_EQ(max_abs(r.params.at(k) - v), 0.0) << k;
    EXPECT_EQ(r.lora_rank(), 2);
}

TEST(UNet, LoraWithZeroUpFactorLeavesOutputUnchanged) {
    const DiffusionStack stack;
    const UNetWeights w = UNetWeights::init(UNetConfig{}, 5);
    std::mt19937_64 rng(11);
    const LatentTensor z(Tensor::randn(stack.codec.latent_shape(8, 8), rng));
    const TextCondition c = stack.tokenizer.encode(kTriggerPrompt);
    EXPECT_EQ(unet_predict(w, z, 7, c).eps_hat, unet_predict(w.with_lora(4, 6), z, 7, c).eps_hat);
}
