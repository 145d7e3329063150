#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dladiff/eval.hpp"
#include "json.hpp"

namespace dladiff::cli {

/// Bad or unknown configuration entry; maps to exit code 1.
struct ConfigKeyError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct Paths {
    std::string dataset;   // save_dataset directory
    std::string encoders;  // directory with <id>.ckpt per encoder
    std::string model;     // theta_pre checkpoint
    std::string images;    // image set to protect or attack
    std::string samples;   // generated samples to evaluate
    std::string cache;     // world cache root for experiment runs
    std::vector<std::string> reports;
};

struct SynthConfig {
    int identities = 12;
    int poses = 6;
    int first_id = 0;
};

struct ProtectConfig {
    bool layer1 = true;
    bool layer2 = true;
    int identity = -1;  // -1: every identity in the image set
};

struct RunConfig {
    std::string command;
    std::uint64_t seed = 0;
    std::string out;
    std::string experiment = "finetune_defense";
    Paths paths;
    SynthConfig synth;
    WorldConfig world;
    ExperimentConfig exp = ExperimentConfig::desk();
    ProtectConfig protect;

    nlohmann::ordered_json to_json() const;
    /// Overlays `j` on the current values; unknown keys throw ConfigKeyError
    /// naming the full dotted key.
    void merge(const nlohmann::json& j);
    void validate() const;
};

/// Applies "a.b.c=value" to `j`; value is parsed as JSON when possible and
/// taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace dladiff::cli
