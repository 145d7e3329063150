#include "run_config.hpp"

#include <set>

namespace dladiff::cli {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigKeyError(name_or_root() + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& v) {
        known_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            v = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigKeyError(full(key) + ": wrong value type");
        }
    }

    template <class E, class Parse>
    void get_enum(const char* key, E& v, Parse parse) {
        std::string s;
        known_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        if (!it->is_string()) throw ConfigKeyError(full(key) + ": expected a string");
        try {
            v = parse(it->template get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigKeyError(full(key) + ": " + e.what());
        }
    }

    template <class F>
    void sub(const char* key, F&& f) {
        known_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        Section s(*it, full(key));
        f(s);
        s.done();
    }

    void done() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!known_.count(it.key())) throw ConfigKeyError("unknown config key: " + full(it.key()));
    }

private:
    std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string name_or_root() const { return path_.empty() ? "config" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> known_;
};

void read(Section& s, ADFTConfig& a) {
    s.get("eta_ft", a.eta_ft);
    s.get("sigma_ft", a.sigma_ft);
    s.get("iter_opt", a.iter_opt);
    s.get("iter_1", a.iter_1);
    s.get("iter_2", a.iter_2);
    s.get("iter_3", a.iter_3);
    s.get_enum("mode", a.mode, gradient_mode_from_string);
    s.sub("attention", [&](Section& t) {
        t.get("self_map", a.attention.self_map);
        t.get("cross_map", a.attention.cross_map);
        t.get("trigger_column_only", a.attention.trigger_column_only);
        t.get("timesteps", a.attention.timesteps);
    });
    s.get("static_iterations", a.static_iterations);
    s.get("prior_pairs", a.prior_pairs);
    s.get("prior_sample_steps", a.prior_sample_steps);
    s.get("dsur", a.dsur);
    s.get("adft", a.adft);
}

void read(Section& s, ZSConfig& z) {
    s.get("eta_zs", z.eta_zs);
    s.get("sigma_zs", z.sigma_zs);
    s.get("ths", z.ths);
    s.get("max_iters", z.max_iters);
    s.get("jitter_scale", z.jitter_scale);
    s.get_enum("mode", z.mode, gradient_mode_from_string);
    s.get("weights", z.weights);
}

void read(Section& s, FinetuneConfig& f) {
    s.get("iterations", f.iterations);
    s.get("batch_size", f.batch_size);
    s.get("learning_rate", f.learning_rate);
    s.get("lambda", f.lambda);
    s.get_enum("mode", f.mode, finetune_mode_from_string);
    s.get("lora_rank", f.lora_rank);
}

ordered_json write(const ADFTConfig& a) {
    return {{"eta_ft", a.eta_ft},
            {"sigma_ft", a.sigma_ft},
            {"iter_opt", a.iter_opt},
            {"iter_1", a.iter_1},
            {"iter_2", a.iter_2},
            {"iter_3", a.iter_3},
            {"mode", to_string(a.mode)},
            {"attention",
             {{"self_map", a.attention.self_map},
              {"cross_map", a.attention.cross_map},
              {"trigger_column_only", a.attention.trigger_column_only},
              {"timesteps", a.attention.timesteps}}},
            {"static_iterations", a.static_iterations},
            {"prior_pairs", a.prior_pairs},
            {"prior_sample_steps", a.prior_sample_steps},
            {"dsur", a.dsur},
            {"adft", a.adft}};
}

ordered_json write(const ZSConfig& z) {
    return {{"eta_zs", z.eta_zs},         {"sigma_zs", z.sigma_zs}, {"ths", z.ths},
            {"max_iters", z.max_iters},   {"jitter_scale", z.jitter_scale},
            {"mode", to_string(z.mode)}, {"weights", z.weights}};
}

ordered_json write(const FinetuneConfig& f) {
    return {{"iterations", f.iterations}, {"batch_size", f.batch_size},   {"learning_rate", f.learning_rate},
            {"lambda", f.lambda},         {"mode", to_string(f.mode)},     {"lora_rank", f.lora_rank}};
}

}  // namespace

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["command"] = command;
    j["seed"] = seed;
    j["out"] = out;
    j["experiment"] = experiment;
    j["paths"] = {{"dataset", paths.dataset}, {"encoders", paths.encoders}, {"model", paths.model},
                  {"images", paths.images},   {"samples", paths.samples},   {"cache", paths.cache},
                  {"reports", paths.reports}};
    j["synth"] = {{"identities", synth.identities}, {"poses", synth.poses}, {"first_id", synth.first_id}};
    j["world"] = {{"encoder_identities", world.encoder_identities}, {"encoder_poses", world.encoder_poses},
                  {"encoder_steps", world.encoder_steps},           {"base_identities", world.base_identities},
                  {"base_poses", world.base_poses},                 {"base_iterations", world.base_iterations}};
    j["eval"] = {{"identities", exp.identities},
                 {"train_images", exp.train_images},
                 {"reference_images", exp.reference_images},
                 {"real_images", exp.real_images},
                 {"samples_per_identity", exp.samples_per_identity},
                 {"sample_steps", exp.sample_steps},
                 {"prompts", exp.prompts},
                 {"finetune_with_layer2", exp.finetune_with_layer2},
                 {"seeds", exp.seeds},
                 {"data_seed", exp.data_seed}};
    j["protect"] = {{"layer1", protect.layer1}, {"layer2", protect.layer2}, {"identity", protect.identity}};
    j["adft"] = write(exp.adft);
    j["zs"] = write(exp.zs);
    j["surrogate"] = write(exp.surrogate);
    j["attack"] = write(exp.attack);
    j["lora_attack"] = write(exp.lora_attack);
    return j;
}

void RunConfig::merge(const json& j) {
    Section root(j, "");
    root.get("command", command);
    root.get("seed", seed);
    root.get("out", out);
    root.get("experiment", experiment);
    root.sub("paths", [&](Section& s) {
        s.get("dataset", paths.dataset);
        s.get("encoders", paths.encoders);
        s.get("model", paths.model);
        s.get("images", paths.images);
        s.get("samples", paths.samples);
        s.get("cache", paths.cache);
        s.get("reports", paths.reports);
    });
    root.sub("synth", [&](Section& s) {
        s.get("identities", synth.identities);
        s.get("poses", synth.poses);
        s.get("first_id", synth.first_id);
    });
    root.sub("world", [&](Section& s) {
        s.get("encoder_identities", world.encoder_identities);
        s.get("encoder_poses", world.encoder_poses);
        s.get("encoder_steps", world.encoder_steps);
        s.get("base_identities", world.base_identities);
        s.get("base_poses", world.base_poses);
        s.get("base_iterations", world.base_iterations);
    });
    root.sub("eval", [&](Section& s) {
        s.get("identities", exp.identities);
        s.get("train_images", exp.train_images);
        s.get("reference_images", exp.reference_images);
        s.get("real_images", exp.real_images);
        s.get("samples_per_identity", exp.samples_per_identity);
        s.get("sample_steps", exp.sample_steps);
        s.get("prompts", exp.prompts);
        s.get("finetune_with_layer2", exp.finetune_with_layer2);
        s.get("seeds", exp.seeds);
        s.get("data_seed", exp.data_seed);
    });
    root.sub("protect", [&](Section& s) {
        s.get("layer1", protect.layer1);
        s.get("layer2", protect.layer2);
        s.get("identity", protect.identity);
    });
    root.sub("adft", [&](Section& s) { read(s, exp.adft); });
    root.sub("zs", [&](Section& s) { read(s, exp.zs); });
    root.sub("surrogate", [&](Section& s) { read(s, exp.surrogate); });
    root.sub("attack", [&](Section& s) { read(s, exp.attack); });
    root.sub("lora_attack", [&](Section& s) { read(s, exp.lora_attack); });
    root.done();
    world.seed = seed;
}

void RunConfig::validate() const {
    try {
        exp.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigKeyError(std::string("invalid configuration: ") + e.what());
    }
    if (synth.identities < 2 || synth.poses < 1) throw ConfigKeyError("synth: need >= 2 identities and >= 1 pose");
    if (!protect.layer1 && !protect.layer2) throw ConfigKeyError("protect: both layers disabled");
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigKeyError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &j;
    std::size_t pos = 0;
    while (true) {
        const auto dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (part.empty()) throw ConfigKeyError("malformed override key: " + key);
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        pos = dot + 1;
    }
}

}  // namespace dladiff::cli
