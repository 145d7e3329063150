#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dladiff/autograd.hpp"
#include "dladiff/image.hpp"
#include "dladiff/io.hpp"
#include "dladiff/tensor.hpp"

namespace dladiff {

// ---------------------------------------------------------------------------
// Noise schedule

/// beta/alpha/alpha-bar tables. Timesteps are 1-based: t in [1, T].
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    double beta(int t) const { return betas.at(check(t)); }
    double alpha(int t) const { return alphas.at(check(t)); }
    double alpha_bar(int t) const { return alpha_bars.at(check(t)); }

    /// Builds the tables from explicit betas, each in (0,1).
    static NoiseSchedule from_betas(std::vector<double> betas);

private:
    std::size_t check(int t) const;
};

/// Linear schedule from beta_start to beta_end over T steps.
NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);
/// Linear schedule over T steps with the 1e-4..0.02 range of a 1000-step
/// schedule rescaled by 1000/T, so short schedules still end near pure noise.
NoiseSchedule make_short_schedule(int T);

// ---------------------------------------------------------------------------
// Latents

/// h x w x d latent produced by LatentCodec.
class LatentTensor {
public:
    LatentTensor() = default;
    explicit LatentTensor(Tensor hwd);

    const Tensor& tensor() const { return data_; }
    const Shape& shape() const { return data_.shape(); }
    friend bool operator==(const LatentTensor&, const LatentTensor&) = default;

private:
    Tensor data_;
};

/// sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.
LatentTensor forward_noise(const LatentTensor& z0, int t, const LatentTensor& eps, const NoiseSchedule& sched);
ag::Var forward_noise(const ag::Var& z0, int t, const ag::Var& eps, const NoiseSchedule& sched);

enum class CodecBasis { dct, random };

/// Fixed invertible linear patch map: each p x p x C patch is flattened and
/// multiplied by gain * Q, so decode = encode^T / gain^2 and round trips are
/// exact. Q is either a separable 2-D DCT times an orthonormal opponent
/// colour transform (3 channels) or a seeded random orthogonal matrix.
class LatentCodec {
public:
    explicit LatentCodec(int patch = 4, int channels = 3, double gain = 2.0, CodecBasis basis = CodecBasis::dct,
                         std::uint64_t seed = 0x5eed);

    int patch() const { return patch_; }
    int image_channels() const { return channels_; }
    int latent_channels() const { return patch_ * patch_ * channels_; }
    Shape latent_shape(int image_h, int image_w) const;

    LatentTensor encode(const ImageTensor& x) const;
    /// Inverse map, clamped to [0,1].
    ImageTensor decode(const LatentTensor& z) const;
    /// Inverse map without clamping.
    Tensor decode_raw(const LatentTensor& z) const;
    /// Adjoint of encode: <encode(x), z> == <x, encode_adjoint(z)>.
    Tensor encode_adjoint(const LatentTensor& z) const;
    /// Differentiable encode of an [H,W,C] image node.
    ag::Var encode(const ag::Var& x) const;

private:
    int patch_;
    int channels_;
    double gain_;
    Tensor basis_;  // [p*p*C, p*p*C], gain * orthogonal
    Tensor inverse_;
};

// ---------------------------------------------------------------------------
// Text conditioning

struct TextCondition {
    std::vector<int> tokens;
    Tensor embeddings;  // [L, text_dim]
    std::optional<int> trigger_index;
};

/// Fixed word-to-id map with seeded embeddings. "sks" has its own row and is
/// the trigger token.
class Tokenizer {
public:
    static constexpr int kUnknown = 0;
    static constexpr int kTrigger = 7;

    explicit Tokenizer(int dim = 32, std::uint64_t seed = 0x7e47);

    int dim() const { return dim_; }
    int token_id(const std::string& word) const;
    TextCondition encode(const std::string& prompt) const;

private:
    int dim_;
    std::map<std::string, int> vocab_;
    Tensor table_;      // [vocab, dim]
    Tensor positions_;  // [max_len, dim]
};

inline constexpr const char* kTriggerPrompt = "a photo of sks person";
inline constexpr const char* kPriorPrompt = "a photo of person";
inline constexpr const char* kPortraitTriggerPrompt = "a dslr portrait of sks person";
inline constexpr const char* kPortraitPriorPrompt = "a dslr portrait of person";

// ---------------------------------------------------------------------------
// Tiny conditional UNet

struct UNetConfig {
    int latent_channels = 48;
    int base_channels = 32;
    int mid_channels = 64;
    int text_dim = 32;
    int time_freqs = 16;
    int time_hidden = 64;
    int id_dim = 32;
    int id_tokens = 4;
    bool adapter = false;
    /// Length of the make_short_schedule the network is preconditioned for.
    int schedule_steps = 50;

    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

enum class WeightRole { pretrained, static_surrogate, dynamic_surrogate, attacker };
std::string to_string(WeightRole r);
WeightRole role_from_string(const std::string& s);

/// Attention projections that may carry low-rank adapters.
const std::vector<std::string>& lora_target_projections();

/// Named parameters of the UNet. Schema (C1 = base, C2 = mid channels):
///   time.l1.{w,b} time.l2.{w,b}           timestep MLP
///   in.{w,b}                              latent -> C1 (per position)
///   res1.{conv1,conv2,temb}.{w,b}         residual block at full latent res
///   down.{w,b}                            2x2 space-to-depth + projection to C2
///   mid.res.{conv1,conv2,temb}.{w,b}      bottleneck residual block
///   mid.self.{norm.g,norm.b,q.w,k.w,v.w,o.w,o.b}    self-attention
///   mid.cross.{norm.g,norm.b,q.w,k.w,v.w,o.w,o.b}   text cross-attention
///   mid.adapter.{proj.w,proj.b,norm.g,norm.b,q.w,k.w,v.w,o.w,o.b}
///                                         identity cross-attention (adapter only)
///   up.{w,b}                              C2 -> 4*C1 + depth-to-space
///   res2.{conv1,conv2,temb}.{w,b} res2.skip.w       decoder residual block
///   out.norm.{g,b} out.{w,b}              C1 -> latent
///   precond.{mean,std}                    per-channel latent statistics (not trained)
/// The network sees (z - sqrt(ab) mean) / sqrt(ab std^2 + 1 - ab) and its
/// output is added, scaled, to the Gaussian posterior mean of eps.
/// Optional LoRA factors "<proj>.lora_a" [in, r] and "<proj>.lora_b" [r, out]
/// attach to any name in lora_target_projections().
struct UNetWeights {
    UNetConfig config;
    WeightRole role = WeightRole::pretrained;
    std::map<std::string, Tensor> params;

    static UNetWeights init(const UNetConfig& cfg, std::uint64_t seed);
    /// Throws ShapeError when a required parameter is missing or misshaped.
    void validate() const;
    bool has_lora() const;
    int lora_rank() const;
    std::size_t parameter_count() const;
    /// Sets precond.{mean,std} to the per-channel moments of `latents`.
    void fit_preconditioner(std::span<const LatentTensor> latents);

    /// Copy with the adapter block removed.
    UNetWeights without_adapter() const;
    /// Copy with fresh rank-r factors on every target projection (B = 0).
    UNetWeights with_lora(int rank, std::uint64_t seed) const;

    Checkpoint to_checkpoint() const;
    static UNetWeights from_checkpoint(const Checkpoint& ck);
};

/// Per-pass attention probabilities at the bottleneck.
struct AttentionCapture {
    std::string layer;
    int t = 0;
    Tensor cross_map;  // [n_query, n_tokens]
    Tensor self_map;   // [n_query, n_query]
};

struct UNetOutput {
    LatentTensor eps_hat;
    std::optional<AttentionCapture> maps;
};

/// Unit-norm identity vector.
class IdentityEmbedding {
public:
    IdentityEmbedding() = default;
    /// Normalises `v` to unit length; throws on a zero vector.
    explicit IdentityEmbedding(Tensor v);
    const Tensor& vector() const { return v_; }
    int dim() const { return static_cast<int>(v_.size()); }

private:
    Tensor v_;
};

double cosine_similarity(const IdentityEmbedding& a, const IdentityEmbedding& b);

UNetOutput unet_predict(const UNetWeights& w, const LatentTensor& z_t, int t, const TextCondition& cond,
                        const IdentityEmbedding* id_embed = nullptr, bool capture = false);

/// Parameters lifted into graph nodes. Names listed in `trainable` become
/// grad-requiring leaves.
class UNetParams {
public:
    enum class Train { none, all, lora_only };
    UNetParams(const UNetWeights& w, Train train);

    const ag::Var& operator[](const std::string& name) const;
    bool has(const std::string& name) const { return vars_.count(name) > 0; }
    const UNetConfig& config() const { return config_; }
    double alpha_bar(int t) const { return schedule_.alpha_bar(t); }
    const std::map<std::string, ag::Var>& vars() const { return vars_; }
    /// Gradients of trainable leaves after backward().
    std::map<std::string, Tensor> grads() const;

private:
    UNetConfig config_;
    NoiseSchedule schedule_;
    std::map<std::string, ag::Var> vars_;
    std::vector<std::string> trainable_;
};

struct UNetGraph {
    ag::Var eps_hat;
    ag::Var cross_attn;  // [n, L]
    ag::Var self_attn;   // [n, n]
};

/// Per-channel factor applied to the network output inside eps_hat at step t.
Tensor precond_output_scale(const UNetParams& p, int t);

/// Differentiable forward pass. `id_embed` may be undefined.
UNetGraph unet_forward(const UNetParams& p, const ag::Var& z_t, int t, const TextCondition& cond,
                       const ag::Var& id_embed);

// ---------------------------------------------------------------------------
// Losses

/// eps_hat = predictor(z_t, t, cond).
using NoisePredictor = std::function<Tensor(const Tensor& z_t, int t, const TextCondition& cond)>;
NoisePredictor unet_predictor(const UNetWeights& w);

/// ||eps - predictor(forward_noise(z0, t, eps), t, cond)||^2.
double loss_cond(const NoisePredictor& predictor, const NoiseSchedule& sched, const LatentTensor& z0, int t,
                 const LatentTensor& eps, const TextCondition& cond);
double loss_cond(const UNetWeights& w, const NoiseSchedule& sched, const LatentTensor& z0, int t,
                 const LatentTensor& eps, const TextCondition& cond);
ag::Var loss_cond(const UNetParams& p, const NoiseSchedule& sched, const ag::Var& z0, int t, const ag::Var& eps,
                  const TextCondition& cond);

struct NoiseDraw {
    int t = 1;
    LatentTensor eps;
};

/// Cached prior-preservation example (z'_0, c').
struct PriorPair {
    LatentTensor z0;
    TextCondition cond;
};

/// Raised for invalid combinations of otherwise valid settings.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Instance loss plus lambda times the prior loss. `prior` may be null only
/// when lambda == 0.
double loss_db(const NoisePredictor& predictor, const NoiseSchedule& sched, const LatentTensor& z0,
               const TextCondition& cond_trigger, const NoiseDraw& draw, const PriorPair* prior,
               const NoiseDraw* prior_draw, double lambda);
double loss_db(const UNetWeights& w, const NoiseSchedule& sched, const LatentTensor& z0,
               const TextCondition& cond_trigger, const NoiseDraw& draw, const PriorPair* prior,
               const NoiseDraw* prior_draw, double lambda);

NoiseDraw draw_noise(const NoiseSchedule& sched, const Shape& latent_shape, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Sampling

/// Ancestral DDPM sampling over `steps` evenly spaced timesteps (respaced
/// schedule) with x0 clipping through the codec. steps == 0 decodes the
/// initial noise.
ImageTensor sample(const UNetWeights& w, const NoiseSchedule& sched, const LatentCodec& codec,
                   const TextCondition& cond, const IdentityEmbedding* id_embed, int steps, std::uint64_t seed,
                   int image_size = 32);
ImageTensor sample(const NoisePredictor& predictor, const NoiseSchedule& sched, const LatentCodec& codec,
                   const TextCondition& cond, int steps, std::uint64_t seed, int image_size = 32);

}  // namespace dladiff
