#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dladiff/eval.hpp"
#include "dladiff/rng.hpp"
#include "run_config.hpp"
#include "svg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace dladiff;
using namespace dladiff::cli;

namespace {

struct Options {
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out, dataset, encoders, model, images, samples, cache, experiment, mode;
    std::vector<std::string> reports;
    std::optional<int> identity;
    bool layer1_only = false, layer2_only = false;
};

std::string text_digest(const std::string& s) { return to_hex(fnv1a64(s.data(), s.size())); }

std::string read_file(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot open " + p.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << text;
}

std::vector<fs::path> files_under(const fs::path& root) {
    std::vector<fs::path> out;
    if (fs::is_regular_file(root)) return {root};
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

// Content hash of a file or of every file under a directory (names included).
std::string content_digest(const fs::path& p) {
    if (!fs::exists(p)) throw std::runtime_error("missing input: " + p.string());
    std::string acc;
    for (const auto& f : files_under(p)) acc += fs::relative(f, fs::is_directory(p) ? p : p.parent_path()).generic_string() + ':' + file_digest(f) + '\n';
    return text_digest(acc);
}

RunConfig build_config(const std::string& command, const Options& o) {
    json j = json::object();
    if (!o.config_file.empty()) {
        try {
            j = json::parse(read_file(o.config_file));
        } catch (const json::parse_error& e) {
            throw ConfigKeyError("config file " + o.config_file + " is not valid JSON: " + e.what());
        }
    }
    const auto set = [&](const std::string& key, const json& v) { apply_override(j, key + "=" + v.dump()); };
    if (o.seed) set("seed", *o.seed);
    if (!o.out.empty()) set("out", o.out);
    if (!o.dataset.empty()) set("paths.dataset", o.dataset);
    if (!o.encoders.empty()) set("paths.encoders", o.encoders);
    if (!o.model.empty()) set("paths.model", o.model);
    if (!o.images.empty()) set("paths.images", o.images);
    if (!o.samples.empty()) set("paths.samples", o.samples);
    if (!o.cache.empty()) set("paths.cache", o.cache);
    if (!o.reports.empty()) set("paths.reports", o.reports);
    if (!o.experiment.empty()) set("experiment", o.experiment);
    if (!o.mode.empty()) set("attack.mode", o.mode);
    if (o.identity) set("protect.identity", *o.identity);
    if (o.layer1_only) set("protect.layer2", false);
    if (o.layer2_only) set("protect.layer1", false);
    for (const auto& a : o.overrides) apply_override(j, a);
    RunConfig cfg;
    cfg.merge(j);
    cfg.command = command;
    cfg.validate();
    return cfg;
}

fs::path output_root() {
    const char* env = std::getenv("DLADIFF_OUT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

std::string config_digest(const RunConfig& cfg) {
    ordered_json j = cfg.to_json();
    j.erase("out");
    return text_digest(j.dump());
}

class Run {
public:
    explicit Run(RunConfig c) : cfg(std::move(c)) {
        dir = cfg.out.empty() ? output_root() / (cfg.command + "-" + config_digest(cfg)) : fs::path(cfg.out);
        cfg.out = dir.string();
        fs::create_directories(dir);
        ordered_json j = cfg.to_json();
        j.erase("out");
        write_file(dir / "config.json", j.dump(2) + "\n");
    }

    void input(const std::string& name, const std::string& path) {
        if (path.empty()) throw ConfigKeyError("paths." + name + " is required for " + cfg.command);
        inputs[name] = content_digest(path);
    }

    void finish() const {
        ordered_json m;
        m["command"] = cfg.command;
        m["seed"] = cfg.seed;
        m["config_digest"] = config_digest(cfg);
        m["inputs"] = ordered_json::object();
        for (const auto& [k, v] : inputs) m["inputs"][k] = v;
        m["outputs"] = ordered_json::object();
        for (const auto& f : files_under(dir)) {
            const std::string rel = fs::relative(f, dir).generic_string();
            if (rel == "manifest.json") continue;
            m["outputs"][rel] = file_digest(f);
        }
        write_file(dir / "manifest.json", m.dump(2) + "\n");
        std::cout << dir.string() << std::endl;
    }

    RunConfig cfg;
    fs::path dir;
    std::map<std::string, std::string> inputs;
};

World assemble_world(Run& run) {
    const RunConfig& cfg = run.cfg;
    if (cfg.paths.encoders.empty() && cfg.paths.model.empty()) {
        const fs::path root = cfg.paths.cache.empty() ? output_root() / "cache" : fs::path(cfg.paths.cache);
        return World::load_or_build(cfg.world, root, &std::clog);
    }
    run.input("encoders", cfg.paths.encoders);
    run.input("model", cfg.paths.model);
    World w;
    w.config = cfg.world;
    for (const EncoderSpec& spec : default_encoder_specs()) {
        EncoderWeights e = EncoderWeights::from_checkpoint(load_checkpoint(fs::path(cfg.paths.encoders) / (spec.id + ".ckpt")));
        e.spec.held_out = spec.held_out;
        w.encoders.push_back(std::move(e));
    }
    w.theta_pre = UNetWeights::from_checkpoint(load_checkpoint(cfg.paths.model));
    return w;
}

std::vector<int> identities_of(const FaceDataset& ds, int only) {
    std::set<int> ids;
    for (const auto& s : ds.samples)
        if (only < 0 || s.identity == only) ids.insert(s.identity);
    if (ids.empty()) throw std::runtime_error("no matching identity in the image set");
    return {ids.begin(), ids.end()};
}

// ---------------------------------------------------------------------------

void cmd_synth(Run& run) {
    const auto& c = run.cfg;
    const FaceDataset ds =
        generate_identity_set(c.synth.identities, c.synth.poses, derive_seed(c.seed, "synth"), c.synth.first_id);
    save_dataset(ds, run.dir / "dataset");
}

void cmd_train_encoders(Run& run) {
    const auto& c = run.cfg;
    run.input("dataset", c.paths.dataset);
    const FaceDataset ds = load_dataset(c.paths.dataset);
    EncoderTrainConfig ec;
    ec.steps = c.world.encoder_steps;
    std::ostringstream summary;
    std::vector<ImageTensor> crops;
    std::vector<int> labels;
    for (const FaceSample& s : ds.samples) {
        crops.push_back(aligned_crops(s)[0]);
        labels.push_back(s.identity);
    }
    for (const EncoderSpec& spec : default_encoder_specs()) {
        ec.seed = derive_seed(c.seed, "encoder", fnv1a64(spec.id.data(), spec.id.size()));
        const EncoderWeights e = train_encoder(spec, ds, ec);
        save_checkpoint(run.dir / (spec.id + ".ckpt"), e.to_checkpoint());
        summary << spec.id << " arch=" << to_string(spec.arch) << " held_out=" << spec.held_out
                << " train_auc=" << format_double(verification_auc(e, crops, labels)) << '\n';
        std::clog << "trained " << spec.id << std::endl;
    }
    write_file(run.dir / "encoders.txt", summary.str());
}

void cmd_pretrain(Run& run) {
    const auto& c = run.cfg;
    run.input("dataset", c.paths.dataset);
    const FaceDataset ds = load_dataset(c.paths.dataset);
    std::optional<EncoderWeights> adapter;
    if (!c.paths.encoders.empty()) {
        run.input("encoders", c.paths.encoders);
        const EncoderSpec spec = default_encoder_specs().front();
        adapter = EncoderWeights::from_checkpoint(load_checkpoint(fs::path(c.paths.encoders) / (spec.id + ".ckpt")));
    }
    const DiffusionStack stack;
    BaseTrainConfig bc;
    bc.iterations = c.world.base_iterations;
    bc.seed = derive_seed(c.seed, "base-model");
    std::vector<double> curve;
    const UNetWeights w =
        pretrain_base_model(stack, ds, adapter ? &*adapter : nullptr, UNetConfig{}, bc, &curve);
    save_checkpoint(run.dir / "theta_pre.ckpt", w.to_checkpoint());
    std::string csv = "iteration,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) csv += std::to_string(i) + "," + format_double(curve[i]) + "\n";
    write_file(run.dir / "loss_curve.csv", csv);
    write_line_plot(run.dir / "loss_curve.svg", "base model training loss", {{"loss", curve}});
}

void cmd_protect(Run& run) {
    const auto& c = run.cfg;
    const World world = assemble_world(run);
    run.input("images", c.paths.images);
    const FaceDataset ds = load_dataset(c.paths.images, false);
    FaceDataset out;
    out.seed = ds.seed;
    const fs::path side = run.dir / "sidecars";
    fs::create_directories(side);
    const double bound = (c.protect.layer1 ? c.exp.adft.eta_ft : 0.0) + (c.protect.layer2 ? c.exp.zs.eta_zs : 0.0);
    for (int id : identities_of(ds, c.protect.identity)) {
        auto poses = ds.of_identity(id);
        std::sort(poses.begin(), poses.end(), [](auto* a, auto* b) { return a->pose_index < b->pose_index; });
        ExperimentConfig e = c.exp;
        e.train_images = static_cast<int>(poses.size());
        const ProtectedIdentity p = protect_identity(world, ds, id, e, derive_seed(c.seed, "protect"),
                                                     c.protect.layer1, c.protect.layer2);
        std::vector<Series> curves;
        for (std::size_t k = 0; k < poses.size(); ++k) {
            const double change = max_abs(p.protected_[k].tensor() - p.clean[k].tensor());
            if (change > bound + 1e-12)
                throw std::runtime_error("protected image exceeds the combined budget: " + format_double(change));
            FaceSample s = *poses[k];
            s.image32 = p.protected_[k];
            s.image112 = ImageTensor{};
            out.samples.push_back(s);
            ordered_json j;
            j["identity"] = id;
            j["pose"] = s.pose_index;
            j["layer1"] = c.protect.layer1;
            j["layer2"] = c.protect.layer2;
            j["eta_ft"] = c.exp.adft.eta_ft;
            j["eta_zs"] = c.exp.zs.eta_zs;
            j["linf_ft"] = p.delta_ft[k].linf();
            j["linf_zs"] = p.delta_zs[k].linf();
            j["linf_total"] = change;
            j["psnr"] = std::isinf(psnr(p.protected_[k], p.clean[k])) ? json("inf") : json(psnr(p.protected_[k], p.clean[k]));
            if (c.protect.layer2) {
                const Layer2Result& r = p.layer2[k];
                j["layer2_converged"] = r.converged;
                j["layer2_iterations"] = r.iterations;
                j["layer2_similarity"] = r.final_similarity;
                curves.push_back({"pose " + std::to_string(s.pose_index), r.loss_history});
            }
            write_file(side / ("id" + std::to_string(id) + "_" + std::to_string(s.pose_index) + ".json"), j.dump(2) + "\n");
        }
        if (c.protect.layer1 && !p.history.empty()) {
            std::string csv = "epoch,attention_loss,cond_loss,rejected_steps\n";
            Series att{"attention loss", {}}, cond{"denoising loss", {}};
            for (const auto& h : p.history) {
                csv += std::to_string(h.epoch) + "," + format_double(h.attention_loss) + "," + format_double(h.cond_loss) +
                       "," + std::to_string(h.rejected_steps) + "\n";
                att.y.push_back(h.attention_loss);
                cond.y.push_back(h.cond_loss);
            }
            write_file(side / ("id" + std::to_string(id) + "_layer1.csv"), csv);
            write_line_plot(side / ("id" + std::to_string(id) + "_layer1.svg"), "layer 1 losses, identity " + std::to_string(id),
                            {att, cond});
        }
        if (!curves.empty())
            write_line_plot(side / ("id" + std::to_string(id) + "_layer2.svg"), "layer 2 loss, identity " + std::to_string(id),
                            curves);
        std::clog << "protected identity " << id << std::endl;
    }
    for (int id : identities_of(out, -1)) out.identities.push_back(SyntheticIdentity{id, {}});
    save_dataset(out, run.dir / "images");
}

void cmd_attack(Run& run) {
    const auto& c = run.cfg;
    run.input("model", c.paths.model);
    run.input("images", c.paths.images);
    const DiffusionStack stack;
    const UNetWeights pre = UNetWeights::from_checkpoint(load_checkpoint(c.paths.model)).without_adapter();
    const FaceDataset ds = load_dataset(c.paths.images, false);
    const auto prior = make_prior_pairs(stack, pre, kPriorPrompt, c.exp.adft.prior_pairs, c.exp.adft.prior_sample_steps,
                                        derive_seed(c.seed, "attack-prior"));
    const TextCondition trigger = stack.tokenizer.encode(kTriggerPrompt);
    std::vector<TextCondition> prompts;
    for (const auto& p : c.exp.prompts) prompts.push_back(stack.tokenizer.encode(p));
    fs::create_directories(run.dir / "samples");
    std::string listing = "# id index prompt\n";
    for (int id : identities_of(ds, c.protect.identity)) {
        std::vector<ImageTensor> imgs;
        for (const FaceSample* s : ds.of_identity(id)) imgs.push_back(s->image32);
        FinetuneConfig f = c.exp.attack;
        f.seed = derive_seed(c.seed, "attack", static_cast<std::uint64_t>(id));
        const UNetWeights tuned = attacker_finetune(stack, pre, imgs, trigger, prior, f);
        save_checkpoint(run.dir / ("attacker_id" + std::to_string(id) + ".ckpt"), tuned.to_checkpoint());
        for (int i = 0; i < c.exp.samples_per_identity; ++i) {
            const std::size_t pi = static_cast<std::size_t>(i) % prompts.size();
            const ImageTensor g = sample(tuned, stack.schedule, stack.codec, prompts[pi], nullptr, c.exp.sample_steps,
                                         derive_seed(c.seed, "attack-sample", static_cast<std::uint64_t>(id) * 1000 + i));
            const std::string name = "id" + std::to_string(id) + "_" + std::to_string(i) + ".png";
            write_png(run.dir / "samples" / name, g);
            listing += std::to_string(id) + " " + std::to_string(i) + " " + c.exp.prompts[pi] + "\n";
        }
        std::clog << "attacked identity " << id << std::endl;
    }
    write_file(run.dir / "samples" / "samples.txt", listing);
}

MetricReport eval_samples(Run& run) {
    const auto& c = run.cfg;
    run.input("samples", c.paths.samples);
    run.input("dataset", c.paths.dataset);
    run.input("encoders", c.paths.encoders);
    const EncoderSpec ho_spec = default_encoder_specs().back();
    const EncoderWeights ho =
        EncoderWeights::from_checkpoint(load_checkpoint(fs::path(c.paths.encoders) / (ho_spec.id + ".ckpt")));
    const FaceDataset refs = load_dataset(c.paths.dataset, false);
    std::map<int, std::vector<ImageTensor>> gen;
    std::istringstream ls(read_file(fs::path(c.paths.samples) / "samples.txt"));
    std::string line;
    while (std::getline(ls, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        int id = 0, i = 0;
        ss >> id >> i;
        const ImageTensor g = read_png(fs::path(c.paths.samples) / ("id" + std::to_string(id) + "_" + std::to_string(i) + ".png"));
        gen[id].push_back(align_face(g, canonical_landmarks(g.height())).crop);
    }
    MetricReport r;
    r.experiment = "samples";
    r.seeds = {c.seed};
    std::vector<Tensor> fg, fr;
    std::vector<double> per_id;
    for (const auto& [id, crops] : gen) {
        std::vector<ImageTensor> ref;
        for (const FaceSample* s : refs.of_identity(id)) {
            ref.push_back(s->image112.tensor().empty() ? align_face(s->image32, s->landmarks32).crop
                                                       : align_face(s->image112, s->landmarks112).crop);
            fr.push_back(encoder_features(ho, align_face(s->image32, s->landmarks32).crop));
        }
        if (ref.empty()) throw std::runtime_error("no reference images for identity " + std::to_string(id));
        const double v = ism(crops, ref, ho);
        r.metrics["ism.id" + std::to_string(id)] = v;
        per_id.push_back(v);
        for (const auto& g : crops) fg.push_back(encoder_features(ho, g));
    }
    double m = 0;
    for (double v : per_id) m += v / static_cast<double>(per_id.size());
    r.metrics["ism"] = m;
    if (fg.size() >= 2 && fr.size() >= 2) r.metrics["fid_proxy"] = frechet_distance(fg, fr);
    r.counts["samples"] = static_cast<long long>(fg.size());
    r.counts["identities"] = static_cast<long long>(gen.size());
    return r;
}

void write_report(const fs::path& dir, const MetricReport& r) {
    r.save(dir / "report.txt");
    write_file(dir / "report.csv", r.to_csv());
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& [k, v] : r.metrics)
        if (k.find(".seed") == std::string::npos) bars.emplace_back(k, v);
    write_bar_chart(dir / "metrics.svg", r.experiment, bars);
}

void cmd_eval(Run& run) {
    const auto& c = run.cfg;
    MetricReport r;
    if (!c.paths.samples.empty()) {
        r = eval_samples(run);
    } else {
        const auto& names = experiment_names();
        if (std::find(names.begin(), names.end(), c.experiment) == names.end())
            throw ConfigKeyError("unknown experiment: " + c.experiment);
        const World world = assemble_world(run);
        r = run_experiment(c.experiment, world, c.exp, &std::clog);
    }
    write_report(run.dir, r);
    std::cout << r.to_text();
}

void cmd_report(Run& run) {
    const auto& c = run.cfg;
    if (c.paths.reports.empty()) throw ConfigKeyError("paths.reports is required for report");
    std::string csv = "experiment,metric,value\n";
    for (std::size_t i = 0; i < c.paths.reports.size(); ++i) {
        fs::path p = c.paths.reports[i];
        if (fs::is_directory(p)) p /= "report.txt";
        run.input("report" + std::to_string(i), p.string());
        const MetricReport r = MetricReport::load(p);
        const std::string body = r.to_csv();
        csv += body.substr(body.find('\n') + 1);
        std::vector<std::pair<std::string, double>> bars;
        std::cout << "== " << r.experiment << '\n';
        for (const auto& [k, v] : r.metrics) {
            if (k.find(".seed") != std::string::npos) continue;
            bars.emplace_back(k, v);
            std::cout << "  " << k << " = " << format_double(v) << '\n';
        }
        write_bar_chart(run.dir / (r.experiment + ".svg"), r.experiment, bars);
    }
    write_file(run.dir / "summary.csv", csv);
}

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("-c,--config", o.config_file, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "global seed");
    sub->add_option("-o,--out", o.out, "run directory (default: $DLADIFF_OUT/<command>-<hash>)");
    sub->add_option("--set", o.overrides, "override a config value, e.g. --set adft.iter_opt=5");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-layer protective perturbation toolkit"};
    app.require_subcommand(1);
    Options o;
    struct Cmd {
        const char* name;
        const char* help;
        void (*fn)(Run&);
    };
    const Cmd cmds[] = {
        {"synth", "render a synthetic face dataset", cmd_synth},
        {"train-encoders", "train the identity encoder family", cmd_train_encoders},
        {"pretrain", "pretrain the base diffusion model (with identity adapter)", cmd_pretrain},
        {"protect", "apply layer 1 then layer 2 to an image set", cmd_protect},
        {"attack", "simulate DreamBooth or LoRA fine-tuning and sample", cmd_attack},
        {"eval", "run a named experiment or score generated samples", cmd_eval},
        {"report", "merge metric reports into CSV and charts", cmd_report},
    };
    std::map<CLI::App*, const Cmd*> by_app;
    for (const Cmd& c : cmds) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, o);
        by_app[sub] = &c;
        const std::string n = c.name;
        if (n == "train-encoders" || n == "pretrain" || n == "eval")
            sub->add_option("--dataset", o.dataset, "dataset directory");
        if (n == "pretrain" || n == "protect" || n == "eval")
            sub->add_option("--encoders", o.encoders, "encoder checkpoint directory");
        if (n == "protect" || n == "attack" || n == "eval") sub->add_option("--model", o.model, "theta_pre checkpoint");
        if (n == "protect" || n == "attack") {
            sub->add_option("--images", o.images, "image set directory");
            sub->add_option("--identity", o.identity, "restrict to one identity");
        }
        if (n == "protect") {
            sub->add_flag("--layer1-only", o.layer1_only, "skip layer 2");
            sub->add_flag("--layer2-only", o.layer2_only, "skip layer 1 (delta_ft = 0)");
        }
        if (n == "attack") sub->add_option("--mode", o.mode, "full_unet or lora");
        if (n == "eval") {
            sub->add_option("--experiment", o.experiment, "experiment name");
            sub->add_option("--samples", o.samples, "samples directory written by attack");
            sub->add_option("--cache", o.cache, "world cache root");
        }
        if (n == "report") sub->add_option("--report", o.reports, "report file or run directory")->required();
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    try {
        for (const auto& [sub, cmd] : by_app) {
            if (!sub->parsed()) continue;
            Run run(build_config(cmd->name, o));
            cmd->fn(run);
            run.finish();
        }
    } catch (const ConfigKeyError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 0;
}
