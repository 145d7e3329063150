#include "dladiff/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dladiff/face.hpp"
#include "dladiff/rng.hpp"

namespace dladiff {

std::string to_string(FinetuneMode m) { return m == FinetuneMode::full_unet ? "full_unet" : "lora"; }

FinetuneMode finetune_mode_from_string(const std::string& s) {
    if (s == "full_unet" || s == "full") return FinetuneMode::full_unet;
    if (s == "lora") return FinetuneMode::lora;
    throw ParameterError("unknown fine-tuning mode: " + s);
}

void FinetuneConfig::validate() const {
    if (iterations < 0) throw ParameterError("iterations must be >= 0");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ParameterError("learning_rate must be > 0");
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw ParameterError("lambda must be >= 0");
    if (mode == FinetuneMode::lora && lora_rank < 1) throw ParameterError("lora rank must be >= 1");
}

double descend(UNetWeights& w, Adam& opt, UNetParams::Train train, const NoiseSchedule& sched,
               std::span<const TrainExample> batch, std::mt19937_64& rng, double weight_cap) {
    if (batch.empty()) throw ParameterError("descend: empty batch");
    UNetParams p(w, train);
    ag::Var total;
    double norm = 0;
    for (const TrainExample& ex : batch) {
        const NoiseDraw d = draw_noise(sched, ex.z0.shape(), rng);
        ag::Var eps = ag::constant(d.eps.tensor());
        ag::Var zt = forward_noise(ag::constant(ex.z0.tensor()), d.t, eps, sched);
        ag::Var id = ex.id_embed ? ag::constant(*ex.id_embed) : ag::Var();
        ag::Var r = ag::sub(eps, unet_forward(p, zt, d.t, *ex.cond, id).eps_hat);
        if (weight_cap > 0) {
            const Tensor c = precond_output_scale(p, d.t);
            r = ag::scale(r, std::sqrt(std::min(weight_cap, static_cast<double>(c.size()) / sum_sq(c))));
        }
        ag::Var l = ag::sum_sq(r);
        l = ag::scale(l, ex.weight);
        total = total.defined() ? ag::add(total, l) : l;
        if (ex.weight > 0) norm += 1.0;
    }
    total = ag::scale(total, 1.0 / std::max(1.0, norm));
    const double value = total.item();
    if (!std::isfinite(value)) throw TrainingError("fine-tuning loss is not finite");
    ag::backward(total);
    opt.update(w.params, p.grads());
    return value;
}

namespace {

std::vector<LatentTensor> encode_all(const DiffusionStack& stack, std::span<const ImageTensor> images) {
    std::vector<LatentTensor> z;
    z.reserve(images.size());
    for (const auto& x : images) {
        if (x.height() != stack.image_size || x.width() != stack.image_size || x.channels() != 3)
            throw ShapeError("fine-tuning image must be " + std::to_string(stack.image_size) + "x" +
                             std::to_string(stack.image_size) + "x3");
        z.push_back(stack.encode(x));
    }
    return z;
}

// DreamBooth batches: batch_size instance images (cycled through a shuffled
// order) each paired with a random prior pair when lambda > 0.
class BatchPlan {
public:
    BatchPlan(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) {
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        std::shuffle(order_.begin(), order_.end(), rng_);
    }
    std::size_t next() {
        if (pos_ == order_.size()) {
            std::shuffle(order_.begin(), order_.end(), rng_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

private:
    std::vector<std::size_t> order_;
    std::mt19937_64& rng_;
    std::size_t pos_ = 0;
};

void run_db_steps(const DiffusionStack& stack, UNetWeights& w, Adam& opt, UNetParams::Train train,
                  const std::vector<LatentTensor>& z, const TextCondition& cond, std::span<const PriorPair> prior,
                  const FinetuneConfig& cfg, int steps, std::mt19937_64& rng) {
    if (cfg.lambda > 0 && prior.empty()) throw ConfigError("prior-preservation needs a non-empty prior set");
    BatchPlan plan(z.size(), rng);
    std::uniform_int_distribution<std::size_t> pick_prior(0, prior.empty() ? 0 : prior.size() - 1);
    std::vector<TrainExample> batch;
    for (int s = 0; s < steps; ++s) {
        batch.clear();
        for (int b = 0; b < cfg.batch_size; ++b) {
            batch.push_back({z[plan.next()], &cond, nullptr, 1.0});
            if (cfg.lambda > 0) {
                const PriorPair& pp = prior[pick_prior(rng)];
                batch.push_back({pp.z0, &pp.cond, nullptr, cfg.lambda});
            }
        }
        // Prior examples carry weight lambda but do not count towards the
        // batch normaliser, so the loss is mean over instances of loss_db.
        descend(w, opt, train, stack.schedule, batch, rng);
    }
}

}  // namespace

SurrogateState pretrain_static_surrogate(const DiffusionStack& stack, const UNetWeights& theta_pre,
                                         std::span<const ImageTensor> clean_set, const TextCondition& cond_trigger,
                                         const FinetuneConfig& cfg) {
    cfg.validate();
    if (clean_set.empty()) throw ParameterError("pretrain_static_surrogate: empty clean set");
    SurrogateState st{theta_pre.without_adapter(), Adam{}, 0};
    st.weights.role = WeightRole::static_surrogate;
    if (cfg.iterations == 0) {
        st.weights = theta_pre;
        return st;
    }
    st.optimizer.lr = cfg.learning_rate;
    const auto z = encode_all(stack, clean_set);
    auto rng = make_rng(cfg.seed, "static-surrogate");
    FinetuneConfig no_prior = cfg;
    no_prior.lambda = 0.0;
    run_db_steps(stack, st.weights, st.optimizer, UNetParams::Train::all, z, cond_trigger, {}, no_prior,
                 cfg.iterations, rng);
    st.steps = cfg.iterations;
    return st;
}

SurrogateState step_dynamic_surrogate(const DiffusionStack& stack, const SurrogateState& state,
                                      std::span<const ImageTensor> perturbed_batch, const TextCondition& cond_trigger,
                                      std::span<const PriorPair> prior_pairs, const FinetuneConfig& cfg, int steps,
                                      std::uint64_t seed) {
    cfg.validate();
    if (steps < 0) throw ParameterError("steps must be >= 0");
    SurrogateState st = state;
    if (steps == 0) return st;
    if (perturbed_batch.empty()) throw ParameterError("step_dynamic_surrogate: empty batch");
    const auto z = encode_all(stack, perturbed_batch);
    st.optimizer.lr = cfg.learning_rate;
    auto rng = make_rng(seed, "dynamic-surrogate", static_cast<std::uint64_t>(state.steps));
    run_db_steps(stack, st.weights, st.optimizer, UNetParams::Train::all, z, cond_trigger, prior_pairs, cfg, steps,
                 rng);
    st.steps += steps;
    return st;
}

UNetWeights attacker_finetune(const DiffusionStack& stack, const UNetWeights& theta_pre,
                              std::span<const ImageTensor> protected_set, const TextCondition& cond_trigger,
                              std::span<const PriorPair> prior_pairs, const FinetuneConfig& cfg) {
    cfg.validate();
    if (protected_set.empty()) throw ParameterError("attacker_finetune: empty training set");
    UNetWeights w = theta_pre.without_adapter();
    UNetParams::Train train = UNetParams::Train::all;
    if (cfg.mode == FinetuneMode::lora) {
        w = w.with_lora(cfg.lora_rank, derive_seed(cfg.seed, "lora-init"));
        train = UNetParams::Train::lora_only;
    }
    w.role = WeightRole::attacker;
    const auto z = encode_all(stack, protected_set);
    Adam opt;
    opt.lr = cfg.learning_rate;
    auto rng = make_rng(cfg.seed, "attacker");
    run_db_steps(stack, w, opt, train, z, cond_trigger, prior_pairs, cfg, cfg.iterations, rng);
    return w;
}

std::vector<PriorPair> make_prior_pairs(const DiffusionStack& stack, const UNetWeights& weights,
                                        const std::string& prompt, int n, int sample_steps, std::uint64_t seed) {
    if (n < 0) throw ParameterError("prior set size must be >= 0");
    const TextCondition cond = stack.tokenizer.encode(prompt);
    const UNetWeights w = weights.without_adapter();
    std::vector<PriorPair> out;
    for (int i = 0; i < n; ++i) {
        const ImageTensor x = sample(w, stack.schedule, stack.codec, cond, nullptr, sample_steps,
                                     derive_seed(seed, "prior", static_cast<std::uint64_t>(i)), stack.image_size);
        out.push_back({stack.encode(x), cond});
    }
    return out;
}

double median_replay_loss(const DiffusionStack& stack, const UNetWeights& w, std::span<const ImageTensor> images,
                          const TextCondition& cond, int n_draws, std::uint64_t seed) {
    if (images.empty() || n_draws < 1) throw ParameterError("median_replay_loss: nothing to evaluate");
    const auto z = encode_all(stack, images);
    const NoisePredictor pred = unet_predictor(w.config.adapter ? w.without_adapter() : w);
    auto rng = make_rng(seed, "replay");
    std::vector<double> losses;
    for (int k = 0; k < n_draws; ++k) {
        const NoiseDraw d = draw_noise(stack.schedule, stack.latent_shape(), rng);
        for (const auto& zi : z) losses.push_back(loss_cond(pred, stack.schedule, zi, d.t, d.eps, cond));
    }
    const auto mid = losses.begin() + static_cast<std::ptrdiff_t>(losses.size() / 2);
    std::nth_element(losses.begin(), mid, losses.end());
    return *mid;
}

UNetWeights pretrain_base_model(const DiffusionStack& stack, const FaceDataset& ds, const EncoderWeights* id_encoder,
                                const UNetConfig& ucfg, const BaseTrainConfig& cfg, std::vector<double>* loss_curve) {
    if (ds.samples.empty()) throw ParameterError("pretrain_base_model: empty dataset");
    if (cfg.iterations < 0 || cfg.batch_size < 1 || !(cfg.learning_rate > 0))
        throw ParameterError("pretrain_base_model: invalid configuration");
    UNetConfig uc = ucfg;
    uc.adapter = id_encoder != nullptr;
    uc.schedule_steps = stack.schedule.T;
    UNetWeights w = UNetWeights::init(uc, derive_seed(cfg.seed, "unet-init"));
    w.role = WeightRole::pretrained;

    const TextCondition prompts[2] = {stack.tokenizer.encode(kPriorPrompt),
                                      stack.tokenizer.encode(kPortraitPriorPrompt)};
    std::vector<LatentTensor> z;
    std::vector<Tensor> ids;
    for (const auto& s : ds.samples) {
        z.push_back(stack.encode(s.image32));
        if (id_encoder) ids.push_back(encode(*id_encoder, align_face(s.image112, s.landmarks112).crop).vector());
    }
    w.fit_preconditioner(z);
    Adam opt;
    opt.lr = cfg.learning_rate;
    auto rng = make_rng(cfg.seed, "base-train");
    std::uniform_int_distribution<std::size_t> pick(0, z.size() - 1);
    std::bernoulli_distribution drop(cfg.id_dropout), which_prompt(0.5);
    std::vector<TrainExample> batch;
    for (int it = 0; it < cfg.iterations; ++it) {
        // Cosine decay to 10% of the base rate.
        const double frac = static_cast<double>(it) / std::max(1, cfg.iterations);
        opt.lr = cfg.learning_rate * (0.55 + 0.45 * std::cos(std::numbers::pi * frac));
        batch.clear();
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::size_t i = pick(rng);
            const Tensor* id = (id_encoder && !drop(rng)) ? &ids[i] : nullptr;
            batch.push_back({z[i], &prompts[which_prompt(rng) ? 1 : 0], id, 1.0});
        }
        const double l = descend(w, opt, UNetParams::Train::all, stack.schedule, batch, rng, cfg.timestep_weight_cap);
        if (loss_curve) loss_curve->push_back(l);
    }
    return w;
}

}  // namespace dladiff
