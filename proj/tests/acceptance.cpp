// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is 0 when every criterion was evaluated (1 with
// --strict if any failed, 2 on an internal error).
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dladiff/eval.hpp"
#include "dladiff/rng.hpp"

using namespace dladiff;

namespace {

struct Verdict {
    int id;
    std::string name;
    bool pass;
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

std::string sci(double v) {
    std::ostringstream os;
    os.setf(std::ios::scientific);
    os.precision(2);
    os << v;
    return os.str();
}

class Clock {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------

Verdict bounds(const World& world) {
    Clock clk;
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int violations = 0;
    for (const auto& [eta, layer] :
         {std::pair{7.0 / 255.0, PerturbationLayer::ft}, std::pair{11.0 / 255.0, PerturbationLayer::zs}}) {
        Perturbation d(Shape{8, 8, 3}, eta, layer);
        for (int i = 0; i < 1000; ++i) {
            const Tensor g = Tensor::randn({8, 8, 3}, rng, std::pow(10.0, -3.0 + 6.0 * u(rng)));
            d = pgd_step(d, g, std::pow(10.0, -4.0 + 4.0 * u(rng)), i % 2 ? GradientMode::sign : GradientMode::raw).delta;
            violations += d.linf() > eta;
        }
    }
    ExperimentConfig cfg = ExperimentConfig::desk();
    cfg.identities = 1;
    cfg.train_images = 2;
    cfg.adft.iter_opt = 2;
    cfg.adft.static_iterations = 50;
    cfg.zs.max_iters = 60;
    const FaceDataset data = protection_dataset(cfg);
    const ProtectedIdentity p = protect_identity(world, data, kProtectFirstId, cfg, 99, true, true);
    double ft = 0, zs = 0;
    for (std::size_t k = 0; k < p.clean.size(); ++k) {
        ft = std::max(ft, p.delta_ft[k].linf());
        zs = std::max(zs, p.delta_zs[k].linf());
    }
    const bool pass = violations == 0 && ft <= 7.0 / 255.0 && zs <= 11.0 / 255.0 && clk.seconds() < 60;
    return {1, "bound suite", pass,
            "pgd violations " + std::to_string(violations) + "/2000, protect max|d_ft| " + fmt(ft * 255, 3) +
                "/255, max|d_zs| " + fmt(zs * 255, 3) + "/255, " + fmt(clk.seconds(), 1) + " s"};
}

Verdict schedule() {
    const NoiseSchedule s = make_short_schedule(50);
    double recurrence = 0;
    double ab = 1;
    for (int t = 1; t <= s.T; ++t) {
        ab *= 1.0 - s.beta(t);
        recurrence = std::max(recurrence, std::abs(s.alpha_bar(t) - ab) / ab);
    }
    std::mt19937_64 rng(5);
    const LatentTensor z0(Tensor::randn({8, 8, 48}, rng));
    Tensor noise = Tensor::zeros(z0.shape());
    double coef = 1, var = 0, chain_err = 0;
    for (int t = 1; t <= 10; ++t) {
        noise = noise * std::sqrt(s.alpha(t)) + Tensor::randn(z0.shape(), rng) * std::sqrt(s.beta(t));
        coef *= std::sqrt(s.alpha(t));
        var = s.alpha(t) * var + s.beta(t);
        const LatentTensor eps(noise * (1.0 / std::sqrt(1.0 - s.alpha_bar(t))));
        const Tensor chain = z0.tensor() * coef + noise;
        chain_err = std::max(chain_err, max_abs(forward_noise(z0, t, eps, s).tensor() - chain));
        chain_err = std::max(chain_err, std::abs(var - (1.0 - s.alpha_bar(t))));
    }
    return {2, "scheduler/noising suite", recurrence <= 1e-14 && chain_err <= 1e-6,
            "alpha_bar recurrence rel err " + sci(recurrence) + ", closed form vs chain (t<=10) " +
                sci(chain_err)};
}

template <class F>
double directional_error(const F& f, const Tensor& g, const Tensor& base, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double worst = 0;
    for (int k = 0; k < 3; ++k) {
        Tensor d = Tensor::randn(base.shape(), rng);
        d *= 1.0 / std::sqrt(sum_sq(d));
        const double h = 1e-5;
        const double fd = (f(base + d * h) - f(base - d * h)) / (2 * h);
        const double an = dot(g, d);
        worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-12}));
    }
    return worst;
}

Verdict gradients(const World& world) {
    Clock clk;
    DiffusionStack stack;
    stack.image_size = 8;
    std::mt19937_64 rng(3);
    const ImageTensor x(Tensor::uniform({8, 8, 3}, rng, 0.25, 0.75));
    const Tensor d0 = Tensor::uniform({8, 8, 3}, rng, -0.02, 0.02);
    const LatentTensor eps(Tensor::randn(stack.codec.latent_shape(8, 8), rng));
    const TextCondition cond = stack.tokenizer.encode(kTriggerPrompt);
    const auto pert = [](const Tensor& d) { return Perturbation(d, 0.5, PerturbationLayer::ft); };
    const UNetWeights theta = world.theta_pre.without_adapter();
    const UNetWeights theta_d = UNetWeights::init(theta.config, 17);

    const LossGrad lc = cond_loss_grad(stack, theta, x, pert(d0), 12, eps, cond);
    const double e_cond = directional_error(
        [&](const Tensor& d) { return loss_cond(theta, stack.schedule, stack.encode(pert(d).apply(x)), 12, eps, cond); },
        lc.grad, d0, 1);
    const LossGrad la = attention_loss_grad(stack, theta, theta_d, x, pert(d0), 12, eps, cond);
    const double e_att = directional_error(
        [&](const Tensor& d) { return attention_loss(stack, theta, theta_d, x, pert(d), 12, eps, cond); }, la.grad, d0, 2);

    const auto encs = world.training_encoders();
    const ImageTensor clean(Tensor::uniform({kCropSize, kCropSize, 3}, rng, 0.25, 0.75));
    std::vector<IdentityEmbedding> targets;
    for (const auto* e : encs) targets.push_back(encode(*e, clean));
    const std::vector<double> w(encs.size(), 1.0 / static_cast<double>(encs.size()));
    // Perturbation confined to an 8 x 8 patch of the crop.
    Tensor mask({kCropSize, kCropSize, 3}, 0.0);
    for (int r = 50; r < 58; ++r)
        for (int c = 50; c < 58; ++c)
            for (int ch = 0; ch < 3; ++ch) mask[(static_cast<std::size_t>(r) * kCropSize + c) * 3 + ch] = 1.0;
    Tensor dz = Tensor::uniform(clean.tensor().shape(), rng, -0.02, 0.02);
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= mask[i];
    const IdentityLossGrad li = identity_loss_grad(clean, dz, targets, encs, w);
    Tensor gpatch = li.grad;
    for (std::size_t i = 0; i < gpatch.size(); ++i) gpatch[i] *= mask[i];
    std::mt19937_64 prng(4);
    double e_id = 0;
    for (int k = 0; k < 3; ++k) {
        Tensor d = Tensor::randn(dz.shape(), prng);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= mask[i];
        d *= 1.0 / std::sqrt(sum_sq(d));
        const double h = 1e-5;
        const auto f = [&](const Tensor& v) { return identity_loss(ImageTensor(clean.tensor() + v), clean, encs, w); };
        const double fd = (f(dz + d * h) - f(dz - d * h)) / (2 * h), an = dot(gpatch, d);
        e_id = std::max(e_id, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-12}));
    }
    const bool pass = e_cond <= 1e-3 && e_att <= 1e-3 && e_id <= 1e-3 && clk.seconds() < 300;
    return {3, "gradient suite", pass,
            "max rel err loss_cond " + sci(e_cond) + ", attention_loss " + sci(e_att) +
                ", identity_loss " + sci(e_id) + ", " + fmt(clk.seconds(), 1) + " s"};
}

Verdict determinism(const World& world) {
    ExperimentConfig cfg = ExperimentConfig::desk();
    cfg.identities = 1;
    cfg.train_images = 2;
    cfg.adft.iter_opt = 2;
    cfg.adft.static_iterations = 30;
    cfg.zs.max_iters = 30;
    cfg.attack.iterations = 40;
    const auto once = [&]() {
        const FaceDataset data = protection_dataset(cfg);
        const ProtectedIdentity p = protect_identity(world, data, kProtectFirstId, cfg, 7, true, true);
        const DiffusionStack& st = world.stack;
        const UNetWeights pre = world.theta_pre.without_adapter();
        const auto prior = make_prior_pairs(st, pre, kPriorPrompt, 2, 10, 8);
        FinetuneConfig f = cfg.attack;
        f.seed = 9;
        const UNetWeights tuned = attacker_finetune(st, pre, p.protected_, st.tokenizer.encode(kTriggerPrompt), prior, f);
        std::vector<ImageTensor> gen, refs;
        for (int i = 0; i < 4; ++i) {
            const ImageTensor g = sample(tuned, st.schedule, st.codec, st.tokenizer.encode(kTriggerPrompt), nullptr, 20, 100 + i);
            gen.push_back(align_face(g, canonical_landmarks(32)).crop);
        }
        for (std::size_t k = 0; k < p.clean.size(); ++k) refs.push_back(align_face(p.clean[k], p.landmarks[k]).crop);
        MetricReport r;
        r.experiment = "pipeline";
        r.seeds = {7};
        r.metrics["ism"] = ism(gen, refs, world.held_out());
        std::vector<Tensor> fg, fr;
        for (const auto& g : gen) fg.push_back(encoder_features(world.held_out(), g));
        for (const auto& g : refs) fr.push_back(encoder_features(world.held_out(), g));
        r.metrics["fid_proxy"] = frechet_distance(fg, fr);
        r.metrics["psnr"] = psnr(p.protected_[0], p.clean[0]);
        return r.to_text();
    };
    const std::string a = once(), b = once();
    return {9, "determinism", a == b, a == b ? "protect -> attack -> eval reports identical (" + std::to_string(a.size()) + " bytes)"
                                               : "reports differ"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string cache = "cache";
    std::string report_path;
    bool strict = false;
    app.add_option("--cache", cache, "world cache root");
    app.add_option("--report", report_path, "also write the verdict lines here");
    app.add_flag("--strict", strict, "exit 1 if any criterion fails");
    CLI11_PARSE(app, argc, argv);

    try {
        Clock total;
        const World world = World::load_or_build(WorldConfig{}, cache, &std::clog);
        std::vector<Verdict> v;
        const auto emit = [&](Verdict x) {
            std::cout << "criterion " << x.id << " " << (x.pass ? "PASS" : "FAIL") << " " << x.name << ": " << x.detail
                      << std::endl;
            v.push_back(std::move(x));
        };
        emit(bounds(world));
        emit(schedule());
        emit(gradients(world));

        const ExperimentConfig cfg = ExperimentConfig::desk();
        const MetricReport ft = run_experiment("finetune_defense", world, cfg, &std::clog);
        {
            const double ic = ft.metrics.at("ism_clean"), ip = ft.metrics.at("ism_protected");
            const double fc = ft.metrics.at("fid_proxy_clean"), fp = ft.metrics.at("fid_proxy_protected");
            emit({4, "fine-tuning defense", ip <= 0.6 * ic && fp >= 1.5 * fc,
                  "median ISM " + fmt(ic) + " -> " + fmt(ip) + " (ratio " + fmt(ip / ic) + ", need <= 0.6), fid_proxy " +
                      fmt(fc) + " -> " + fmt(fp) + " (ratio " + fmt(fp / fc) + ", need >= 1.5)"});
        }
        const MetricReport lora = run_experiment("lora_transfer", world, cfg, &std::clog);
        {
            const double ic = lora.metrics.at("ism_clean"), ip = lora.metrics.at("ism_protected");
            emit({5, "LoRA transfer", ip <= 0.75 * ic,
                  "median ISM " + fmt(ic) + " -> " + fmt(ip) + " (reduction " + fmt(100 * (1 - ip / ic), 1) +
                      "%, need >= 25%)"});
        }
        const MetricReport zs = run_experiment("zeroshot_defense", world, cfg, &std::clog);
        {
            bool ok = true;
            std::string d = "ISM_pro";
            for (const auto* e : world.training_encoders()) {
                const double s = zs.metrics.at("ism_pro." + e->spec.id);
                ok &= s <= cfg.zs.ths;
                d += " " + e->spec.id + "=" + fmt(s);
            }
            const double ho = zs.metrics.at("heldout_drop"), gen = zs.metrics.at("ism_gen_drop");
            ok &= ho >= 0.5 && gen >= 0.5;
            d += " (need <= " + fmt(cfg.zs.ths, 2) + "), held-out drop " + fmt(100 * ho, 1) + "% (need >= 50%), ISM_gen " +
                 fmt(zs.metrics.at("ism_gen_clean")) + " -> " + fmt(zs.metrics.at("ism_gen_protected")) + " drop " +
                 fmt(100 * gen, 1) + "% (need >= 50%)";
            emit({6, "zero-shot defense", ok, d});
        }
        const MetricReport az = run_experiment("ablation_antizs", world, cfg, &std::clog);
        const MetricReport nd = run_experiment("ablation_dsur", world, cfg, &std::clog);
        const MetricReport na = run_experiment("ablation_adft", world, cfg, &std::clog);
        {
            const double restored = az.metrics.at("restored_fraction");
            const double gap = ft.metrics.at("ism_gap"), gd = nd.metrics.at("ism_gap"), ga = na.metrics.at("ism_gap");
            emit({7, "ablation suite", restored >= 0.9 && gd < gap && ga < gap,
                  "w/o Anti-ZS ISM_pro " + fmt(az.metrics.at("ism_pro")) + " = " + fmt(100 * restored, 1) +
                      "% of unprotected (need >= 90%); ISM gap full " + fmt(gap) + ", w/o DSUR " + fmt(gd) +
                      ", w/o ADFT " + fmt(ga) + " (need both < full)"});
        }
        const MetricReport ps = run_experiment("psnr_audit", world, cfg, &std::clog);
        {
            const double floor = 20.0 * std::log10(255.0 / 18.0);
            const double mn = ps.metrics.at("psnr_min"), mean = ps.metrics.at("psnr");
            emit({8, "PSNR audit", mn >= floor,
                  "min " + fmt(mn, 2) + " dB, mean " + fmt(mean, 2) + " dB (floor " + fmt(floor, 2) + " dB; soft target 30 dB " +
                      (mean >= 30 ? "met" : "not met") + ")"});
        }
        emit(determinism(world));

        int failed = 0;
        for (const auto& x : v) failed += !x.pass;
        std::cout << "acceptance: " << v.size() - failed << "/" << v.size() << " criteria pass, " << fmt(total.seconds(), 0)
                  << " s" << std::endl;
        if (!report_path.empty()) {
            std::ofstream os(report_path);
            for (const auto& x : v)
                os << "criterion " << x.id << " " << (x.pass ? "PASS" : "FAIL") << " " << x.name << ": " << x.detail << '\n';
            for (const MetricReport* r : {&ft, &lora, &zs, &az, &nd, &na, &ps}) os << '\n' << r->to_text();
        }
        return strict && failed ? 1 : 0;
    } catch (const std::exception& e) {
        std::cerr << "acceptance: internal error: " << e.what() << std::endl;
        return 2;
    }
}
