#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dladiff/finetune.hpp"
#include "dladiff/perturbation.hpp"

namespace dladiff {

/// Which bottleneck maps enter the attention loss.
struct AttentionSelection {
    bool self_map = true;
    bool cross_map = true;
    /// Cross term on the trigger-token column only; all columns otherwise.
    bool trigger_column_only = true;
    /// Random timesteps averaged per gradient evaluation.
    int timesteps = 4;
};

struct ADFTConfig {
    double eta_ft = 7.0 / 255.0;
    double sigma_ft = 5e-3;
    int iter_opt = 10;
    int iter_1 = 3;
    int iter_2 = 3;
    int iter_3 = 10;
    GradientMode mode = GradientMode::raw;
    AttentionSelection attention;
    /// Step-0 budget for the static surrogate.
    int static_iterations = 400;
    /// Cached prior-preservation samples for the dynamic surrogate.
    int prior_pairs = 8;
    int prior_sample_steps = 50;
    /// Ablation switches. Without DSUR, Step-0 and the attention stage are
    /// skipped; without ADFT, the denoising-loss stage and the surrogate
    /// updates are skipped, so theta_d stays at theta_pre.
    bool dsur = true;
    bool adft = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct LossGrad {
    double value = 0.0;
    Tensor grad;  // d value / d delta, image shaped
};

/// ||Mc_s(x) - Mc_d(x+delta)||^2 + ||Ms_s(x) - Ms_d(x+delta)||^2 at the
/// bottleneck, both passes sharing (t, eps, cond).
double attention_loss(const DiffusionStack& stack, const UNetWeights& theta_s, const UNetWeights& theta_d,
                      const ImageTensor& x, const Perturbation& delta, int t, const LatentTensor& eps,
                      const TextCondition& cond, const AttentionSelection& sel = {});
LossGrad attention_loss_grad(const DiffusionStack& stack, const UNetWeights& theta_s, const UNetWeights& theta_d,
                             const ImageTensor& x, const Perturbation& delta, int t, const LatentTensor& eps,
                             const TextCondition& cond, const AttentionSelection& sel = {});

/// loss_cond of theta on clamp(x + delta) and its gradient in delta.
LossGrad cond_loss_grad(const DiffusionStack& stack, const UNetWeights& theta, const ImageTensor& x,
                        const Perturbation& delta, int t, const LatentTensor& eps, const TextCondition& cond);

struct Layer1Record {
    int epoch = 0;
    double attention_loss = 0.0;  // mean over images, last attention step
    double cond_loss = 0.0;       // mean over images, last denoising step
    int rejected_steps = 0;
};

struct Layer1Result {
    std::vector<Perturbation> deltas;
    UNetWeights theta_s;
    SurrogateState theta_d;
    std::vector<Layer1Record> history;
    int rejected_steps = 0;
};

/// Alternating optimisation of one delta per image in protect_set against a
/// frozen static surrogate and a dynamic surrogate that is fine-tuned on the
/// perturbed set between perturbation updates.
Layer1Result optimize_layer1(const DiffusionStack& stack, std::span<const ImageTensor> protect_set,
                             std::span<const ImageTensor> clean_set, const UNetWeights& theta_pre,
                             const ADFTConfig& cfg, const FinetuneConfig& ft_cfg);

}  // namespace dladiff
