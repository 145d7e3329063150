#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dladiff/diffusion.hpp"
#include "dladiff/identity.hpp"
#include "dladiff/optim.hpp"

namespace dladiff {

/// Schedule, codec and tokenizer shared by every diffusion-side stage.
struct DiffusionStack {
    NoiseSchedule schedule = make_short_schedule(50);
    LatentCodec codec;
    Tokenizer tokenizer;
    int image_size = 32;

    Shape latent_shape() const { return codec.latent_shape(image_size, image_size); }
    LatentTensor encode(const ImageTensor& x) const { return codec.encode(x); }
};

enum class FinetuneMode { full_unet, lora };
std::string to_string(FinetuneMode m);
FinetuneMode finetune_mode_from_string(const std::string& s);

struct FinetuneConfig {
    int iterations = 400;
    int batch_size = 4;
    double learning_rate = 5e-6;
    double lambda = 1.0;
    FinetuneMode mode = FinetuneMode::full_unet;
    int lora_rank = 4;
    std::uint64_t seed = 0;

    /// Zero iterations are accepted (no-op runs); everything else must be
    /// positive and finite.
    void validate() const;
};

/// Weights plus optimizer moments; `steps` counts applied updates.
struct SurrogateState {
    UNetWeights weights;
    Adam optimizer;
    long long steps = 0;
};

/// One descent step of the instance (plus optional prior) loss, averaged over
/// the batch. Each example draws its own (t, eps) from `rng`. Returns the
/// pre-update loss. Throws TrainingError on a non-finite loss. A positive
/// `weight_cap` weights each example by min(cap, 1 / mean c_out^2), c_out
/// being the preconditioner's output scale at its timestep; otherwise the
/// plain eps loss is used.
struct TrainExample {
    LatentTensor z0;
    const TextCondition* cond = nullptr;
    const Tensor* id_embed = nullptr;
    double weight = 1.0;
};
double descend(UNetWeights& w, Adam& opt, UNetParams::Train train, const NoiseSchedule& sched,
               std::span<const TrainExample> batch, std::mt19937_64& rng, double weight_cap = 0.0);

/// Step-0: fine-tunes a copy of theta_pre on clean images with the trigger
/// prompt and no prior term. Zero iterations return theta_pre unchanged.
SurrogateState pretrain_static_surrogate(const DiffusionStack& stack, const UNetWeights& theta_pre,
                                         std::span<const ImageTensor> clean_set, const TextCondition& cond_trigger,
                                         const FinetuneConfig& cfg);

/// `steps` DreamBooth-loss descent steps on x + delta batches; returns a new
/// state and leaves the input untouched.
SurrogateState step_dynamic_surrogate(const DiffusionStack& stack, const SurrogateState& state,
                                      std::span<const ImageTensor> perturbed_batch, const TextCondition& cond_trigger,
                                      std::span<const PriorPair> prior_pairs, const FinetuneConfig& cfg, int steps,
                                      std::uint64_t seed);

/// Attacker fine-tuning of a fresh copy of theta_pre. In lora mode only the
/// low-rank factors train; the returned weights keep them attached.
UNetWeights attacker_finetune(const DiffusionStack& stack, const UNetWeights& theta_pre,
                              std::span<const ImageTensor> protected_set, const TextCondition& cond_trigger,
                              std::span<const PriorPair> prior_pairs, const FinetuneConfig& cfg);

/// Prior-preservation set: n samples from `weights` under `prompt`.
std::vector<PriorPair> make_prior_pairs(const DiffusionStack& stack, const UNetWeights& weights,
                                        const std::string& prompt, int n, int sample_steps, std::uint64_t seed);

/// Median over n replayed (t, eps) draws of loss_cond for every image.
double median_replay_loss(const DiffusionStack& stack, const UNetWeights& w, std::span<const ImageTensor> images,
                          const TextCondition& cond, int n_draws, std::uint64_t seed);

struct BaseTrainConfig {
    int iterations = 4000;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double id_dropout = 0.5;
    /// See descend(); 0 trains on the plain eps loss.
    double timestep_weight_cap = 100.0;
    std::uint64_t seed = 0;
};

/// Trains theta_pre from scratch on a multi-identity face set with generic
/// prompts (never the trigger word). When `id_encoder` is given the adapter
/// block is trained too, conditioned on that encoder's embedding of the
/// aligned face and dropped with probability id_dropout.
UNetWeights pretrain_base_model(const DiffusionStack& stack, const FaceDataset& ds, const EncoderWeights* id_encoder,
                                const UNetConfig& ucfg, const BaseTrainConfig& cfg,
                                std::vector<double>* loss_curve = nullptr);

}  // namespace dladiff
