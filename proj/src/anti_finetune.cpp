#include "dladiff/anti_finetune.hpp"

#include <cmath>

#include "dladiff/rng.hpp"

namespace dladiff {

void ADFTConfig::validate() const {
    if (!(eta_ft > 0 && eta_ft < 1)) throw ParameterError("eta_ft must lie in (0,1)");
    if (!(sigma_ft >= 0) || !std::isfinite(sigma_ft)) throw ParameterError("sigma_ft must be finite and >= 0");
    if (iter_opt < 0 || iter_1 < 0 || iter_2 < 0 || iter_3 < 0) throw ParameterError("iteration counts must be >= 0");
    if (static_iterations < 0 || prior_pairs < 0 || prior_sample_steps < 0)
        throw ParameterError("surrogate budgets must be >= 0");
    if (attention.timesteps < 1) throw ParameterError("attention timesteps must be >= 1");
    if (!attention.self_map && !attention.cross_map) throw ConfigError("attention loss needs at least one map");
}

namespace {

void check_pair(const UNetWeights& a, const UNetWeights& b) {
    UNetConfig ca = a.config, cb = b.config;
    ca.adapter = cb.adapter = false;
    if (!(ca == cb)) throw ConfigError("surrogate architectures differ");
}

ag::Var perturbed_latent(const DiffusionStack& stack, const ImageTensor& x, const ag::Var& d) {
    if (d.shape() != x.tensor().shape()) throw ShapeError("perturbation shape does not match image");
    return stack.codec.encode(ag::clamp(ag::add(ag::constant(x.tensor()), d), 0.0, 1.0));
}

ag::Var map_distance(const UNetGraph& s, const UNetGraph& d, const TextCondition& cond, const AttentionSelection& sel) {
    ag::Var total;
    auto acc = [&](const ag::Var& v) { total = total.defined() ? ag::add(total, v) : v; };
    if (sel.cross_map) {
        ag::Var cs = s.cross_attn, cd = d.cross_attn;
        if (sel.trigger_column_only) {
            if (!cond.trigger_index) throw ConfigError("trigger-column attention loss needs a trigger token in the prompt");
            cs = ag::select_col(cs, *cond.trigger_index);
            cd = ag::select_col(cd, *cond.trigger_index);
        }
        acc(ag::sum_sq(ag::sub(cs, cd)));
    }
    if (sel.self_map) acc(ag::sum_sq(ag::sub(s.self_attn, d.self_attn)));
    return total;
}

LossGrad attention_impl(const DiffusionStack& stack, const UNetWeights& theta_s, const UNetWeights& theta_d,
                        const ImageTensor& x, const Perturbation& delta, int t, const LatentTensor& eps,
                        const TextCondition& cond, const AttentionSelection& sel, bool want_grad) {
    check_pair(theta_s, theta_d);
    const UNetParams ps(theta_s.config.adapter ? theta_s.without_adapter() : theta_s, UNetParams::Train::none);
    const UNetParams pd(theta_d.config.adapter ? theta_d.without_adapter() : theta_d, UNetParams::Train::none);
    const ag::Var e = ag::constant(eps.tensor());
    const ag::Var zs = forward_noise(ag::constant(stack.encode(x).tensor()), t, e, stack.schedule);
    const UNetGraph gs = unet_forward(ps, zs, t, cond, ag::Var());
    ag::Var d = want_grad ? ag::param(delta.delta()) : ag::constant(delta.delta());
    const ag::Var zd = forward_noise(perturbed_latent(stack, x, d), t, e, stack.schedule);
    const UNetGraph gd = unet_forward(pd, zd, t, cond, ag::Var());
    ag::Var loss = map_distance(gs, gd, cond, sel);
    LossGrad out{loss.item(), {}};
    if (want_grad) {
        ag::backward(loss);
        out.grad = d.grad();
    }
    return out;
}

}  // namespace

double attention_loss(const DiffusionStack& stack, const UNetWeights& theta_s, const UNetWeights& theta_d,
                      const ImageTensor& x, const Perturbation& delta, int t, const LatentTensor& eps,
                      const TextCondition& cond, const AttentionSelection& sel) {
    return attention_impl(stack, theta_s, theta_d, x, delta, t, eps, cond, sel, false).value;
}

LossGrad attention_loss_grad(const DiffusionStack& stack, const UNetWeights& theta_s, const UNetWeights& theta_d,
                             const ImageTensor& x, const Perturbation& delta, int t, const LatentTensor& eps,
                             const TextCondition& cond, const AttentionSelection& sel) {
    return attention_impl(stack, theta_s, theta_d, x, delta, t, eps, cond, sel, true);
}

LossGrad cond_loss_grad(const DiffusionStack& stack, const UNetWeights& theta, const ImageTensor& x,
                        const Perturbation& delta, int t, const LatentTensor& eps, const TextCondition& cond) {
    const UNetParams p(theta.config.adapter ? theta.without_adapter() : theta, UNetParams::Train::none);
    ag::Var d = ag::param(delta.delta());
    ag::Var loss = loss_cond(p, stack.schedule, perturbed_latent(stack, x, d), t, ag::constant(eps.tensor()), cond);
    ag::backward(loss);
    return {loss.item(), d.grad()};
}

Layer1Result optimize_layer1(const DiffusionStack& stack, std::span<const ImageTensor> protect_set,
                             std::span<const ImageTensor> clean_set, const UNetWeights& theta_pre,
                             const ADFTConfig& cfg, const FinetuneConfig& ft_cfg) {
    cfg.validate();
    ft_cfg.validate();
    if (protect_set.empty()) throw ParameterError("optimize_layer1: nothing to protect");
    const TextCondition cond = stack.tokenizer.encode(kTriggerPrompt);
    const std::size_t n = protect_set.size();

    Layer1Result res;
    for (const auto& x : protect_set) res.deltas.emplace_back(x.tensor().shape(), cfg.eta_ft, PerturbationLayer::ft);
    res.theta_d = SurrogateState{theta_pre.without_adapter(), Adam{}, 0};
    res.theta_d.weights.role = WeightRole::dynamic_surrogate;
    if (cfg.iter_opt == 0) {
        res.theta_s = theta_pre;
        return res;
    }

    // Step-0: static surrogate on clean data, frozen afterwards.
    if (cfg.dsur) {
        if (clean_set.empty()) throw ParameterError("optimize_layer1: static surrogate needs a clean set");
        FinetuneConfig s_cfg = ft_cfg;
        s_cfg.iterations = cfg.static_iterations;
        s_cfg.seed = derive_seed(cfg.seed, "step0");
        res.theta_s = pretrain_static_surrogate(stack, theta_pre, clean_set, cond, s_cfg).weights.without_adapter();
        res.theta_s.role = WeightRole::static_surrogate;
    } else {
        res.theta_s = theta_pre.without_adapter();
    }

    std::vector<PriorPair> prior;
    if (cfg.adft && ft_cfg.lambda > 0)
        prior = make_prior_pairs(stack, theta_pre, kPriorPrompt, cfg.prior_pairs, cfg.prior_sample_steps,
                                 derive_seed(cfg.seed, "prior-set"));

    const Shape ls = stack.latent_shape();
    for (int epoch = 0; epoch < cfg.iter_opt; ++epoch) {
        Layer1Record rec;
        rec.epoch = epoch;

        // Stage 1: attention-disruption ascent between the two surrogates.
        if (cfg.dsur) {
            for (int k = 0; k < cfg.iter_1; ++k) {
                double total = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    auto rng = make_rng(derive_seed(cfg.seed, "stage1", static_cast<std::uint64_t>(epoch)), "step",
                                        static_cast<std::uint64_t>(k * n + i));
                    Tensor g(protect_set[i].tensor().shape());
                    double v = 0;
                    for (int s = 0; s < cfg.attention.timesteps; ++s) {
                        const NoiseDraw d = draw_noise(stack.schedule, ls, rng);
                        const LossGrad lg = attention_loss_grad(stack, res.theta_s, res.theta_d.weights, protect_set[i],
                                                                res.deltas[i], d.t, d.eps, cond, cfg.attention);
                        g += lg.grad;
                        v += lg.value;
                    }
                    g *= 1.0 / cfg.attention.timesteps;
                    total += v / cfg.attention.timesteps;
                    PgdStep st = pgd_step(res.deltas[i], g, cfg.sigma_ft, cfg.mode);
                    if (!st.accepted) ++rec.rejected_steps;
                    res.deltas[i] = std::move(st.delta);
                }
                rec.attention_loss = total / static_cast<double>(n);
            }
        }

        if (cfg.adft) {
            // Stage 2: denoising-loss ascent through the dynamic surrogate.
            for (int k = 0; k < cfg.iter_2; ++k) {
                double total = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    auto rng = make_rng(derive_seed(cfg.seed, "stage2", static_cast<std::uint64_t>(epoch)), "step",
                                        static_cast<std::uint64_t>(k * n + i));
                    const NoiseDraw d = draw_noise(stack.schedule, ls, rng);
                    const LossGrad lg =
                        cond_loss_grad(stack, res.theta_d.weights, protect_set[i], res.deltas[i], d.t, d.eps, cond);
                    total += lg.value;
                    PgdStep st = pgd_step(res.deltas[i], lg.grad, cfg.sigma_ft, cfg.mode);
                    if (!st.accepted) ++rec.rejected_steps;
                    res.deltas[i] = std::move(st.delta);
                }
                rec.cond_loss = total / static_cast<double>(n);
            }

            // Stage 3: the dynamic surrogate learns the current perturbed set.
            std::vector<ImageTensor> perturbed;
            for (std::size_t i = 0; i < n; ++i) perturbed.push_back(res.deltas[i].apply(protect_set[i]));
            res.theta_d = step_dynamic_surrogate(stack, res.theta_d, perturbed, cond, prior, ft_cfg, cfg.iter_3,
                                                 derive_seed(cfg.seed, "stage3", static_cast<std::uint64_t>(epoch)));
        }
        res.rejected_steps += rec.rejected_steps;
        res.history.push_back(rec);
    }
    return res;
}

}  // namespace dladiff
