#include "dladiff/eval.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <ostream>
#include <sstream>

#include "dladiff/rng.hpp"

namespace dladiff {

// ---------------------------------------------------------------------------
// World

std::string WorldConfig::to_text() const {
    KeyValueText kv;
    kv.set("seed", static_cast<long long>(seed));
    kv.set("encoder_identities", static_cast<long long>(encoder_identities));
    kv.set("encoder_poses", static_cast<long long>(encoder_poses));
    kv.set("encoder_steps", static_cast<long long>(encoder_steps));
    kv.set("base_identities", static_cast<long long>(base_identities));
    kv.set("base_poses", static_cast<long long>(base_poses));
    kv.set("base_iterations", static_cast<long long>(base_iterations));
    return kv.str();
}

std::string WorldConfig::digest() const {
    const std::string t = to_text();
    return to_hex(fnv1a64(t.data(), t.size()));
}

std::vector<const EncoderWeights*> World::training_encoders() const {
    std::vector<const EncoderWeights*> out;
    for (const auto& e : encoders)
        if (!e.spec.held_out) out.push_back(&e);
    return out;
}

const EncoderWeights& World::held_out() const {
    for (const auto& e : encoders)
        if (e.spec.held_out) return e;
    throw ConfigError("world has no held-out encoder");
}

const EncoderWeights& World::adapter_encoder() const { return *training_encoders().at(0); }

namespace {

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void note(std::ostream* log, const std::string& line) {
    if (log) *log << line << std::endl;
}

std::string fixed(double v, int prec = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

}  // namespace

World World::build(const WorldConfig& cfg, std::ostream* log) {
    if (cfg.encoder_identities < 2 || cfg.base_identities < 2 || cfg.encoder_poses < 1 || cfg.base_poses < 1)
        throw ParameterError("world: need at least two identities and one pose per set");
    World w;
    w.config = cfg;
    Stopwatch sw;
    const FaceDataset enc_ds =
        generate_identity_set(cfg.encoder_identities, cfg.encoder_poses, derive_seed(cfg.seed, "encoder-set"), 0);
    EncoderTrainConfig ec;
    ec.steps = cfg.encoder_steps;
    for (const EncoderSpec& spec : default_encoder_specs()) {
        ec.seed = derive_seed(cfg.seed, "encoder", fnv1a64(spec.id.data(), spec.id.size()));
        w.encoders.push_back(train_encoder(spec, enc_ds, ec));
        note(log, "encoder " + spec.id + " trained at " + fixed(sw.seconds(), 1) + " s");
    }
    const FaceDataset base_ds =
        generate_identity_set(cfg.base_identities, cfg.base_poses, derive_seed(cfg.seed, "base-set"), 1000);
    BaseTrainConfig bc;
    bc.iterations = cfg.base_iterations;
    bc.seed = derive_seed(cfg.seed, "base-model");
    w.theta_pre = pretrain_base_model(w.stack, base_ds, &w.adapter_encoder(), UNetConfig{}, bc, nullptr);
    note(log, "base model trained at " + fixed(sw.seconds(), 1) + " s");
    return w;
}

void World::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& e : encoders) save_checkpoint(dir / (e.spec.id + ".ckpt"), e.to_checkpoint());
    save_checkpoint(dir / "theta_pre.ckpt", theta_pre.to_checkpoint());
    std::ofstream os(dir / "world.txt");
    os << config.to_text();
    if (!os) throw std::runtime_error("cannot write " + (dir / "world.txt").string());
}

World World::load(const std::filesystem::path& dir) {
    std::ifstream is(dir / "world.txt");
    if (!is) throw std::runtime_error("no world description in " + dir.string());
    std::stringstream ss;
    ss << is.rdbuf();
    const KeyValueText kv = KeyValueText::parse(ss.str());
    World w;
    w.config.seed = static_cast<std::uint64_t>(kv.get_double("seed"));
    w.config.encoder_identities = static_cast<int>(kv.get_double("encoder_identities"));
    w.config.encoder_poses = static_cast<int>(kv.get_double("encoder_poses"));
    w.config.encoder_steps = static_cast<int>(kv.get_double("encoder_steps"));
    w.config.base_identities = static_cast<int>(kv.get_double("base_identities"));
    w.config.base_poses = static_cast<int>(kv.get_double("base_poses"));
    w.config.base_iterations = static_cast<int>(kv.get_double("base_iterations"));
    for (const EncoderSpec& spec : default_encoder_specs()) {
        EncoderWeights e = EncoderWeights::from_checkpoint(load_checkpoint(dir / (spec.id + ".ckpt")));
        e.spec.held_out = spec.held_out;
        w.encoders.push_back(std::move(e));
    }
    w.theta_pre = UNetWeights::from_checkpoint(load_checkpoint(dir / "theta_pre.ckpt"));
    return w;
}

World World::load_or_build(const WorldConfig& cfg, const std::filesystem::path& cache_root, std::ostream* log) {
    const std::filesystem::path dir = cache_root / ("world-" + cfg.digest());
    if (std::filesystem::exists(dir / "world.txt") && std::filesystem::exists(dir / "theta_pre.ckpt")) {
        note(log, "loading cached world from " + dir.string());
        return load(dir);
    }
    note(log, "building world into " + dir.string());
    World w = build(cfg, log);
    w.save(dir);
    return w;
}

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig ExperimentConfig::desk() {
    ExperimentConfig c;
    c.surrogate.learning_rate = 1e-3;
    c.attack.learning_rate = 1e-3;
    return c;
}

void ExperimentConfig::validate() const {
    adft.validate();
    surrogate.validate();
    attack.validate();
    lora_attack.validate();
    if (lora_attack.mode != FinetuneMode::lora) throw ConfigError("lora_attack must use lora mode");
    zs.validate(2);
    if (identities < 1 || train_images < 1 || reference_images < 1 || real_images < 2)
        throw ParameterError("experiment: identity and image counts must be positive (real_images >= 2)");
    if (samples_per_identity < 1 || sample_steps < 1) throw ParameterError("experiment: sampling counts must be >= 1");
    if (prompts.empty()) throw ParameterError("experiment: no sampling prompts");
    if (seeds.empty()) throw ParameterError("experiment: no seeds");
}

const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"finetune_defense", "lora_transfer",  "zeroshot_defense",
                                                "ablation_dsur",    "ablation_adft",  "ablation_antizs",
                                                "psnr_audit"};
    return names;
}

FaceDataset protection_dataset(const ExperimentConfig& cfg) {
    const int poses = cfg.train_images + cfg.reference_images + cfg.real_images;
    return generate_identity_set(std::max(2, cfg.identities), poses, cfg.data_seed, kProtectFirstId);
}

// ---------------------------------------------------------------------------
// Protection

namespace {

std::vector<const FaceSample*> poses_of(const FaceDataset& data, int identity) {
    auto s = data.of_identity(identity);
    std::sort(s.begin(), s.end(), [](const FaceSample* a, const FaceSample* b) { return a->pose_index < b->pose_index; });
    return s;
}

std::string describe(const ADFTConfig& a) {
    std::ostringstream os;
    os << format_double(a.eta_ft) << '/' << format_double(a.sigma_ft) << '/' << a.iter_opt << '/' << a.iter_1 << '/'
       << a.iter_2 << '/' << a.iter_3 << '/' << to_string(a.mode) << '/' << a.attention.self_map
       << a.attention.cross_map << a.attention.trigger_column_only << a.attention.timesteps << '/'
       << a.static_iterations << '/' << a.prior_pairs << '/' << a.prior_sample_steps << '/' << a.dsur << a.adft;
    return os.str();
}

std::string describe(const FinetuneConfig& f) {
    std::ostringstream os;
    os << f.iterations << '/' << f.batch_size << '/' << format_double(f.learning_rate) << '/'
       << format_double(f.lambda) << '/' << to_string(f.mode) << '/' << f.lora_rank;
    return os.str();
}

std::string describe(const ZSConfig& z) {
    std::ostringstream os;
    os << format_double(z.eta_zs) << '/' << format_double(z.sigma_zs) << '/' << format_double(z.ths) << '/'
       << z.max_iters << '/' << format_double(z.jitter_scale) << '/' << to_string(z.mode);
    for (double w : z.weights) os << '/' << format_double(w);
    return os.str();
}

// Results shared between experiments of one process.
struct Memo {
    std::map<std::string, ProtectedIdentity> layer1;
    std::map<std::string, ProtectedIdentity> full;
    std::map<std::string, std::vector<PriorPair>> prior;
    struct Attack {
        std::vector<double> sims;  // per generated sample vs the identity references
        std::vector<Tensor> features;
    };
    std::map<std::string, Attack> attacks;
};

Memo& memo_for(const World& world) {
    static std::map<const World*, std::pair<std::string, Memo>> memos;
    auto& slot = memos[&world];
    const std::string key = world.config.digest();
    if (slot.first != key) slot = {key, Memo{}};
    return slot.second;
}

std::string data_key(const ExperimentConfig& cfg) {
    return std::to_string(cfg.data_seed) + ':' + std::to_string(cfg.identities) + ':' +
           std::to_string(cfg.train_images) + ':' + std::to_string(cfg.reference_images) + ':' +
           std::to_string(cfg.real_images);
}

}  // namespace

ProtectedIdentity protect_identity(const World& world, const FaceDataset& data, int identity,
                                   const ExperimentConfig& cfg, std::uint64_t seed, bool with_layer1,
                                   bool with_layer2) {
    const auto poses = poses_of(data, identity);
    if (static_cast<int>(poses.size()) < cfg.train_images)
        throw ParameterError("identity " + std::to_string(identity) + " has too few poses");
    ProtectedIdentity p;
    p.identity = identity;
    for (int k = 0; k < cfg.train_images; ++k) {
        p.clean.push_back(poses[k]->image32);
        p.landmarks.push_back(poses[k]->landmarks32);
    }
    if (with_layer1) {
        ADFTConfig a = cfg.adft;
        a.seed = derive_seed(seed, "layer1", static_cast<std::uint64_t>(identity));
        FinetuneConfig s = cfg.surrogate;
        s.mode = FinetuneMode::full_unet;
        s.seed = derive_seed(seed, "surrogate", static_cast<std::uint64_t>(identity));
        Layer1Result r = optimize_layer1(world.stack, p.clean, p.clean, world.theta_pre, a, s);
        p.delta_ft = std::move(r.deltas);
        p.history = std::move(r.history);
    } else {
        for (const auto& x : p.clean) p.delta_ft.emplace_back(x.tensor().shape(), cfg.adft.eta_ft, PerturbationLayer::ft);
    }
    for (std::size_t k = 0; k < p.clean.size(); ++k) p.layer1.push_back(p.delta_ft[k].apply(p.clean[k]));

    if (with_layer2) {
        const auto encs = world.training_encoders();
        for (std::size_t k = 0; k < p.clean.size(); ++k) {
            ZSConfig z = cfg.zs;
            z.seed = derive_seed(seed, "layer2", static_cast<std::uint64_t>(identity) * 1000 + k);
            Layer2Result r = optimize_layer2(p.layer1[k], p.clean[k], p.landmarks[k], encs, z);
            p.protected_.push_back(composite_back(p.layer1[k], r.protected_crop, r.M));
            p.delta_zs.push_back(r.delta);
            p.layer2.push_back(std::move(r));
        }
    } else {
        p.protected_ = p.layer1;
        for (const auto& x : p.clean) {
            (void)x;
            p.delta_zs.emplace_back(Shape{kCropSize, kCropSize, 3}, cfg.zs.eta_zs, PerturbationLayer::zs);
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

ImageTensor generated_crop(const ImageTensor& g) {
    return align_face(g, canonical_landmarks(g.height())).crop;
}

class Runner {
public:
    Runner(const World& w, const ExperimentConfig& c, std::ostream* log)
        : world_(w), cfg_(c), log_(log), data_(protection_dataset(c)), memo_(memo_for(w)) {
        cfg_.validate();
        for (int i = 0; i < cfg_.identities; ++i) ids_.push_back(data_.identities[i].id);
        pre_plain_ = world_.theta_pre.without_adapter();
        const EncoderWeights& ho = world_.held_out();
        for (int id : ids_) {
            const auto poses = poses_of(data_, id);
            std::vector<ImageTensor> refs;
            for (int k = 0; k < cfg_.reference_images; ++k) {
                const FaceSample& s = *poses[cfg_.train_images + k];
                refs.push_back(align_face(s.image112, s.landmarks112).crop);
            }
            std::vector<IdentityEmbedding> e;
            for (const auto& r : refs) e.push_back(encode(ho, r));
            references_[id] = std::move(e);
            for (int k = 0; k < cfg_.real_images; ++k) {
                const FaceSample& s = *poses[cfg_.train_images + cfg_.reference_images + k];
                real_features_.push_back(encoder_features(ho, align_face(s.image32, s.landmarks32).crop));
            }
        }
    }

    void log(const std::string& line) const { note(log_, line); }

    const ProtectedIdentity& layer1(int id, std::uint64_t seed, const ADFTConfig& adft) {
        const std::string key = data_key(cfg_) + '|' + std::to_string(id) + '|' + std::to_string(seed) + '|' +
                                describe(adft) + '|' + describe(cfg_.surrogate);
        auto it = memo_.layer1.find(key);
        if (it != memo_.layer1.end()) return it->second;
        Stopwatch sw;
        ExperimentConfig c = cfg_;
        c.adft = adft;
        ProtectedIdentity p = protect_identity(world_, data_, id, c, seed, true, false);
        log("  layer 1 id " + std::to_string(id) + " seed " + std::to_string(seed) + ": " +
            fixed(sw.seconds(), 1) + " s");
        return memo_.layer1.emplace(key, std::move(p)).first->second;
    }

    const ProtectedIdentity& full(int id, std::uint64_t seed) {
        const std::string key = data_key(cfg_) + '|' + std::to_string(id) + '|' + std::to_string(seed) + '|' +
                                describe(cfg_.adft) + '|' + describe(cfg_.surrogate) + '|' + describe(cfg_.zs);
        auto it = memo_.full.find(key);
        if (it != memo_.full.end()) return it->second;
        ProtectedIdentity p = layer1(id, seed, cfg_.adft);
        Stopwatch sw;
        const auto encs = world_.training_encoders();
        p.protected_.clear();
        p.delta_zs.clear();
        p.layer2.clear();
        for (std::size_t k = 0; k < p.clean.size(); ++k) {
            ZSConfig z = cfg_.zs;
            z.seed = derive_seed(seed, "layer2", static_cast<std::uint64_t>(id) * 1000 + k);
            Layer2Result r = optimize_layer2(p.layer1[k], p.clean[k], p.landmarks[k], encs, z);
            p.protected_.push_back(composite_back(p.layer1[k], r.protected_crop, r.M));
            p.delta_zs.push_back(r.delta);
            p.layer2.push_back(std::move(r));
        }
        log("  layer 2 id " + std::to_string(id) + " seed " + std::to_string(seed) + ": " +
            fixed(sw.seconds(), 1) + " s");
        return memo_.full.emplace(key, std::move(p)).first->second;
    }

    const std::vector<PriorPair>& prior(std::uint64_t seed) {
        const std::string key = std::to_string(seed) + '|' + std::to_string(cfg_.adft.prior_pairs) + '|' +
                                std::to_string(cfg_.adft.prior_sample_steps);
        auto it = memo_.prior.find(key);
        if (it != memo_.prior.end()) return it->second;
        auto pairs = make_prior_pairs(world_.stack, pre_plain_, kPriorPrompt, cfg_.adft.prior_pairs,
                                      cfg_.adft.prior_sample_steps, derive_seed(seed, "attack-prior"));
        return memo_.prior.emplace(key, std::move(pairs)).first->second;
    }

    // Attacker fine-tuning on `images`, then sampling with the inference
    // prompts. `tag` separates clean from protected inputs in the memo.
    const Memo::Attack& attack(int id, std::uint64_t seed, const FinetuneConfig& fc, const std::string& tag,
                               const std::vector<ImageTensor>& images) {
        const std::string key = data_key(cfg_) + '|' + std::to_string(id) + '|' + std::to_string(seed) + '|' +
                                describe(fc) + '|' + std::to_string(cfg_.samples_per_identity) + '|' +
                                std::to_string(cfg_.sample_steps) + '|' + tag;
        auto it = memo_.attacks.find(key);
        if (it != memo_.attacks.end()) return it->second;
        Stopwatch sw;
        FinetuneConfig f = fc;
        f.seed = derive_seed(seed, "attack", static_cast<std::uint64_t>(id));
        const TextCondition trigger = world_.stack.tokenizer.encode(kTriggerPrompt);
        const UNetWeights tuned = attacker_finetune(world_.stack, pre_plain_, images, trigger, prior(seed), f);
        Memo::Attack out;
        const EncoderWeights& ho = world_.held_out();
        std::vector<TextCondition> prompts;
        for (const auto& p : cfg_.prompts) prompts.push_back(world_.stack.tokenizer.encode(p));
        for (int i = 0; i < cfg_.samples_per_identity; ++i) {
            const ImageTensor g = sample(tuned, world_.stack.schedule, world_.stack.codec, prompts[i % prompts.size()],
                                         nullptr, cfg_.sample_steps,
                                         derive_seed(seed, "attack-sample", static_cast<std::uint64_t>(id) * 1000 + i));
            const ImageTensor crop = generated_crop(g);
            out.sims.push_back(ism(std::vector<IdentityEmbedding>{encode(ho, crop)}, references_.at(id)));
            out.features.push_back(encoder_features(ho, crop));
        }
        log("  attack " + tag.substr(0, tag.find(':')) + " id " + std::to_string(id) + " seed " + std::to_string(seed) + ": " +
            fixed(sw.seconds(), 1) + " s");
        return memo_.attacks.emplace(key, std::move(out)).first->second;
    }

    struct FtSeed {
        double ism_clean, ism_protected, fid_clean, fid_protected;
    };

    // Clean vs protected DreamBooth (or LoRA) outcome for one seed.
    FtSeed finetune_seed(std::uint64_t seed, const ADFTConfig& adft, const FinetuneConfig& fc) {
        std::vector<double> ic, ip;
        std::vector<Tensor> fcl, fpr;
        for (int id : ids_) {
            const ProtectedIdentity& p = cfg_.finetune_with_layer2 ? full(id, seed) : layer1(id, seed, adft);
            if (cfg_.finetune_with_layer2 && describe(adft) != describe(cfg_.adft))
                throw ConfigError("layer-2 fine-tuning runs use the configured ADFT settings only");
            const auto& c = attack(id, seed, fc, "clean", p.clean);
            const std::string tag = "protected:" + describe(adft) + (cfg_.finetune_with_layer2 ? "+zs" : "");
            const auto& q = attack(id, seed, fc, tag, p.protected_);
            ic.push_back(mean(c.sims));
            ip.push_back(mean(q.sims));
            fcl.insert(fcl.end(), c.features.begin(), c.features.end());
            fpr.insert(fpr.end(), q.features.begin(), q.features.end());
        }
        return {mean(ic), mean(ip), frechet_distance(fcl, real_features_), frechet_distance(fpr, real_features_)};
    }

    MetricReport finetune_report(const std::string& name, const ADFTConfig& adft, const FinetuneConfig& fc) {
        MetricReport r = base_report(name);
        std::vector<double> ic, ip, fc_, fp, ratio, gap, fratio;
        for (std::uint64_t s : cfg_.seeds) {
            const FtSeed o = finetune_seed(s, adft, fc);
            const std::string sfx = ".seed" + std::to_string(s);
            r.metrics["ism_clean" + sfx] = o.ism_clean;
            r.metrics["ism_protected" + sfx] = o.ism_protected;
            r.metrics["fid_proxy_clean" + sfx] = o.fid_clean;
            r.metrics["fid_proxy_protected" + sfx] = o.fid_protected;
            ic.push_back(o.ism_clean);
            ip.push_back(o.ism_protected);
            fc_.push_back(o.fid_clean);
            fp.push_back(o.fid_protected);
            gap.push_back(o.ism_clean - o.ism_protected);
            log(name + " seed " + std::to_string(s) + ": ism " + fixed(o.ism_clean) + " -> " + fixed(o.ism_protected) +
                ", fid_proxy " + fixed(o.fid_clean) + " -> " + fixed(o.fid_protected));
        }
        r.metrics["ism_clean"] = median(ic);
        r.metrics["ism_protected"] = median(ip);
        r.metrics["fid_proxy_clean"] = median(fc_);
        r.metrics["fid_proxy_protected"] = median(fp);
        r.metrics["ism_gap"] = median(gap);
        r.metrics["ism_ratio"] = median(ip) / median(ic);
        r.metrics["fid_ratio"] = median(fp) / median(fc_);
        r.counts["samples_per_condition"] = static_cast<long long>(cfg_.samples_per_identity) * cfg_.identities;
        return r;
    }

    MetricReport zeroshot_report(const std::string& name, bool layer2) {
        MetricReport r = base_report(name);
        const auto encs = world_.training_encoders();
        const EncoderWeights& ho = world_.held_out();
        const EncoderWeights& ad = world_.adapter_encoder();
        const TextCondition prompt = world_.stack.tokenizer.encode(kPriorPrompt);
        std::vector<std::vector<double>> pro(encs.size());
        std::vector<double> pro_ho, gen_clean, gen_prot, gen_clean_img, gen_prot_img, unprot;
        const int per_image = std::max(1, cfg_.samples_per_identity / cfg_.train_images);
        for (std::uint64_t s : cfg_.seeds) {
            std::vector<std::vector<double>> pro_s(encs.size());
            std::vector<double> ho_s, gc_s, gp_s, gci_s, gpi_s;
            for (int id : ids_) {
                const ProtectedIdentity& p = layer2 ? full(id, s) : layer1(id, s, cfg_.adft);
                std::vector<double> gc_id, gp_id;
                for (std::size_t k = 0; k < p.clean.size(); ++k) {
                    const ImageTensor cc = align_face(p.clean[k], p.landmarks[k]).crop;
                    const ImageTensor pc = align_face(p.protected_[k], p.landmarks[k]).crop;
                    for (std::size_t i = 0; i < encs.size(); ++i)
                        pro_s[i].push_back(cosine_similarity(encode(*encs[i], pc), encode(*encs[i], cc)));
                    ho_s.push_back(cosine_similarity(encode(ho, pc), encode(ho, cc)));
                    unprot.push_back(cosine_similarity(encode(ho, cc), encode(ho, cc)));
                    const IdentityEmbedding ec = encode(ad, cc), ep = encode(ad, pc);
                    double sc = 0, sp = 0;
                    for (int j = 0; j < per_image; ++j) {
                        const std::uint64_t sd =
                            derive_seed(s, "adapter-sample", static_cast<std::uint64_t>(id) * 1000 + k * 50 + j);
                        const ImageTensor a = generated_crop(sample(world_.theta_pre, world_.stack.schedule,
                                                                    world_.stack.codec, prompt, &ec,
                                                                    cfg_.sample_steps, sd));
                        const ImageTensor b = generated_crop(sample(world_.theta_pre, world_.stack.schedule,
                                                                    world_.stack.codec, prompt, &ep,
                                                                    cfg_.sample_steps, sd));
                        sc += ism(std::vector<IdentityEmbedding>{encode(ho, a)}, references_.at(id));
                        sp += ism(std::vector<IdentityEmbedding>{encode(ho, b)}, references_.at(id));
                    }
                    gci_s.push_back(sc / per_image);
                    gpi_s.push_back(sp / per_image);
                    gc_id.push_back(sc / per_image);
                    gp_id.push_back(sp / per_image);
                }
                gc_s.push_back(mean(gc_id));
                gp_s.push_back(mean(gp_id));
            }
            const std::string sfx = ".seed" + std::to_string(s);
            for (std::size_t i = 0; i < encs.size(); ++i) {
                r.metrics["ism_pro." + encs[i]->spec.id + sfx] = mean(pro_s[i]);
                pro[i].push_back(mean(pro_s[i]));
            }
            r.metrics["ism_pro." + ho.spec.id + sfx] = mean(ho_s);
            r.metrics["ism_gen_clean" + sfx] = mean(gc_s);
            r.metrics["ism_gen_protected" + sfx] = mean(gp_s);
            pro_ho.push_back(mean(ho_s));
            gen_clean.push_back(mean(gc_s));
            gen_prot.push_back(mean(gp_s));
            gen_clean_img.push_back(mean(gci_s));
            gen_prot_img.push_back(mean(gpi_s));
            std::string line = name + " seed " + std::to_string(s) + ": ism_pro";
            for (std::size_t i = 0; i < encs.size(); ++i) line += " " + encs[i]->spec.id + "=" + fixed(mean(pro_s[i]));
            line += " " + ho.spec.id + "=" + fixed(mean(ho_s)) + ", ism_gen " + fixed(mean(gc_s)) + " -> " + fixed(mean(gp_s));
            log(line);
        }
        double worst = -1;
        for (std::size_t i = 0; i < encs.size(); ++i) {
            r.metrics["ism_pro." + encs[i]->spec.id] = median(pro[i]);
            worst = std::max(worst, median(pro[i]));
        }
        r.metrics["ism_pro"] = worst;
        r.metrics["ism_pro." + ho.spec.id] = median(pro_ho);
        r.metrics["ism_pro_unprotected"] = mean(unprot);
        r.metrics["heldout_drop"] = 1.0 - median(pro_ho) / mean(unprot);
        r.metrics["ism_gen_clean"] = median(gen_clean);
        r.metrics["ism_gen_protected"] = median(gen_prot);
        r.metrics["ism_gen_clean_per_image"] = median(gen_clean_img);
        r.metrics["ism_gen_protected_per_image"] = median(gen_prot_img);
        r.metrics["ism_gen_drop"] = 1.0 - median(gen_prot) / median(gen_clean);
        r.counts["protected_images"] = static_cast<long long>(cfg_.train_images) * cfg_.identities;
        r.counts["adapter_samples_per_image"] = per_image;
        return r;
    }

    MetricReport psnr_report(const std::string& name) {
        MetricReport r = base_report(name);
        std::vector<double> full_v, l1_v;
        long long converged = 0, total = 0;
        for (std::uint64_t s : cfg_.seeds) {
            for (int id : ids_) {
                const ProtectedIdentity& p = full(id, s);
                for (std::size_t k = 0; k < p.clean.size(); ++k) {
                    full_v.push_back(psnr(p.protected_[k], p.clean[k]));
                    l1_v.push_back(psnr(p.layer1[k], p.clean[k]));
                    converged += p.layer2[k].converged;
                    ++total;
                }
            }
        }
        r.metrics["psnr"] = mean(full_v);
        r.metrics["psnr_min"] = *std::min_element(full_v.begin(), full_v.end());
        r.metrics["psnr_layer1"] = mean(l1_v);
        r.metrics["psnr_floor"] = 20.0 * std::log10(255.0 / 18.0);
        r.counts["images"] = total;
        r.counts["layer2_converged"] = converged;
        log(name + ": psnr mean " + fixed(mean(full_v), 2) + " min " + fixed(r.metrics["psnr_min"], 2));
        return r;
    }

    const ExperimentConfig& cfg() const { return cfg_; }

private:
    MetricReport base_report(const std::string& name) const {
        MetricReport r;
        r.experiment = name;
        r.seeds = cfg_.seeds;
        r.counts["identities"] = cfg_.identities;
        return r;
    }

    const World& world_;
    ExperimentConfig cfg_;
    std::ostream* log_;
    FaceDataset data_;
    Memo& memo_;
    std::vector<int> ids_;
    UNetWeights pre_plain_;
    std::map<int, std::vector<IdentityEmbedding>> references_;
    std::vector<Tensor> real_features_;
};

}  // namespace

MetricReport run_experiment(const std::string& name, const World& world, const ExperimentConfig& cfg,
                            std::ostream* log) {
    const auto& names = experiment_names();
    if (std::find(names.begin(), names.end(), name) == names.end())
        throw ParameterError("unknown experiment: " + name);
    Runner run(world, cfg, log);
    Stopwatch sw;
    MetricReport r;
    if (name == "finetune_defense") {
        r = run.finetune_report(name, cfg.adft, cfg.attack);
    } else if (name == "lora_transfer") {
        r = run.finetune_report(name, cfg.adft, cfg.lora_attack);
    } else if (name == "ablation_dsur" || name == "ablation_adft") {
        ADFTConfig a = cfg.adft;
        (name == "ablation_dsur" ? a.dsur : a.adft) = false;
        r = run.finetune_report(name, a, cfg.attack);
    } else if (name == "zeroshot_defense") {
        r = run.zeroshot_report(name, true);
    } else if (name == "ablation_antizs") {
        r = run.zeroshot_report(name, false);
        const MetricReport on = run.zeroshot_report(name, true);
        r.metrics["ism_pro_with_antizs"] = on.metrics.at("ism_pro");
        r.metrics["restored_fraction"] = r.metrics.at("ism_pro") / r.metrics.at("ism_pro_unprotected");
    } else {
        r = run.psnr_report(name);
    }
    run.log(name + " finished in " + fixed(sw.seconds(), 1) + " s");
    return r;
}

}  // namespace dladiff
