#include <gtest/gtest.h>

#include "dladiff/anti_finetune.hpp"

using namespace dladiff;

namespace {

struct Small {
    DiffusionStack stack;
    UNetWeights theta_pre = UNetWeights::init(UNetConfig{}, 7);
    std::vector<ImageTensor> images;
    TextCondition trigger;

    Small() {
        stack.image_size = 8;
        std::mt19937_64 rng(1);
        for (int i = 0; i < 2; ++i) images.emplace_back(Tensor::uniform({8, 8, 3}, rng, 0.1, 0.9));
        trigger = stack.tokenizer.encode(kTriggerPrompt);
    }

    std::vector<PriorPair> prior() const { return make_prior_pairs(stack, theta_pre, kPriorPrompt, 2, 2, 3); }
};

ADFTConfig tiny_adft() {
    ADFTConfig a;
    a.iter_opt = 2;
    a.iter_1 = 1;
    a.iter_2 = 1;
    a.iter_3 = 1;
    a.static_iterations = 2;
    a.prior_pairs = 2;
    a.prior_sample_steps = 2;
    a.attention.timesteps = 1;
    a.sigma_ft = 0.02;
    a.mode = GradientMode::sign;
    return a;
}

FinetuneConfig tiny_ft() {
    FinetuneConfig f;
    f.iterations = 3;
    f.batch_size = 2;
    f.learning_rate = 1e-3;
    return f;
}

}  // namespace

TEST(Attacker, ZeroIterationsReturnsPretrainedWeights) {
    const Small s;
    FinetuneConfig f = tiny_ft();
    f.iterations = 0;
    const UNetWeights w = attacker_finetune(s.stack, s.theta_pre, s.images, s.trigger, s.prior(), f);
    for (const auto& [k, v] : s.theta_pre.params) EXPECT_EQ(w.params.at(k), v) << k;
    EXPECT_EQ(w.role, WeightRole::attacker);
}

TEST(Attacker, FullFinetuneMovesWeightsAndInputIsUntouched) {
    const Small s;
    const UNetWeights before = s.theta_pre;
    const UNetWeights w = attacker_finetune(s.stack, s.theta_pre, s.images, s.trigger, s.prior(), tiny_ft());
    EXPECT_GT(max_abs(w.params.at("mid.cross.q.w") - before.params.at("mid.cross.q.w")), 0.0);
    EXPECT_EQ(w.params.at("precond.std"), before.params.at("precond.std"));
    for (const auto& [k, v] : before.params) EXPECT_EQ(s.theta_pre.params.at(k), v);
}

TEST(Attacker, LoraTrainsOnlyLowRankFactors) {
    const Small s;
    FinetuneConfig f = tiny_ft();
    f.mode = FinetuneMode::lora;
    f.lora_rank = 2;
    const UNetWeights w = attacker_finetune(s.stack, s.theta_pre, s.images, s.trigger, s.prior(), f);
    EXPECT_EQ(w.lora_rank(), 2);
    bool moved = false;
    for (const auto& [k, v] : w.params) {
        if (k.find(".lora_") != std::string::npos) {
            if (k.ends_with("lora_b")) moved |= max_abs(v) > 0;
            continue;
        }
        EXPECT_EQ(v, s.theta_pre.params.at(k)) << k;
    }
    EXPECT_TRUE(moved);
}

TEST(Attacker, DeterministicUnderSeed) {
    const Small s;
    const auto p = s.prior();
    const UNetWeights a = attacker_finetune(s.stack, s.theta_pre, s.images, s.trigger, p, tiny_ft());
    const UNetWeights b = attacker_finetune(s.stack, s.theta_pre, s.images, s.trigger, p, tiny_ft());
    for (const auto& [k, v] : a.params) EXPECT_EQ(b.params.at(k), v) << k;
}

TEST(FinetuneConfig, Validation) {
    FinetuneConfig f;
    EXPECT_NO_THROW(f.validate());
    f.learning_rate = 0;
    EXPECT_ANY_THROW(f.validate());
    f = FinetuneConfig{};
    f.mode = FinetuneMode::lora;
    f.lora_rank = 0;
    EXPECT_ANY_THROW(f.validate());
    EXPECT_EQ(finetune_mode_from_string(to_string(FinetuneMode::lora)), FinetuneMode::lora);
    EXPECT_ANY_THROW(finetune_mode_from_string("dora"));
}

TEST(Layer1, PerturbationsStayInBudgetAndAreDeterministic) {
    const Small s;
    const ADFTConfig a = tiny_adft();
    const Layer1Result r = optimize_layer1(s.stack, s.images, s.images, s.theta_pre, a, tiny_ft());
    ASSERT_EQ(r.deltas.size(), s.images.size());
    double moved = 0;
    for (const auto& d : r.deltas) {
        EXPECT_LE(d.linf(), 7.0 / 255.0);
        moved = std::max(moved, d.linf());
    }
    EXPECT_GT(moved, 0.0);
    EXPECT_EQ(static_cast<int>(r.history.size()), a.iter_opt);
    const Layer1Result again = optimize_layer1(s.stack, s.images, s.images, s.theta_pre, a, tiny_ft());
    for (std::size_t i = 0; i < r.deltas.size(); ++i) EXPECT_EQ(r.deltas[i].delta(), again.deltas[i].delta());
}

TEST(Layer1, ZeroEpochsLeaveImagesUntouched) {
    const Small s;
    ADFTConfig a = tiny_adft();
    a.iter_opt = 0;
    const Layer1Result r = optimize_layer1(s.stack, s.images, s.images, s.theta_pre, a, tiny_ft());
    for (const auto& d : r.deltas) EXPECT_EQ(d.linf(), 0.0);
}

TEST(Layer1, AblationsToggleOneMechanism) {
    const Small s;
    ADFTConfig a = tiny_adft();
    a.dsur = false;
    const Layer1Result no_dsur = optimize_layer1(s.stack, s.images, s.images, s.theta_pre, a, tiny_ft());
    for (const auto& [k, v] : s.theta_pre.params) EXPECT_EQ(no_dsur.theta_s.params.at(k), v) << k;
    a = tiny_adft();
    a.adft = false;
    const Layer1Result no_adft = optimize_layer1(s.stack, s.images, s.images, s.theta_pre, a, tiny_ft());
    EXPECT_EQ(no_adft.theta_d.steps, 0);
    for (const auto& [k, v] : s.theta_pre.params) EXPECT_EQ(no_adft.theta_d.weights.params.at(k), v) << k;
}

TEST(Layer1, ConfigValidation) {
    ADFTConfig a;
    EXPECT_NO_THROW(a.validate());
    a.eta_ft = 0;
    EXPECT_ANY_THROW(a.validate());
    a = ADFTConfig{};
    a.attention.self_map = a.attention.cross_map = false;
    EXPECT_THROW(a.validate(), ConfigError);
}
