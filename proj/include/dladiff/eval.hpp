#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <memory>
#include <string>
#include <vector>

#include "dladiff/anti_finetune.hpp"
#include "dladiff/face.hpp"
#include "dladiff/finetune.hpp"
#include "dladiff/metrics.hpp"

namespace dladiff {

/// Everything an experiment needs before any protection happens: the
/// diffusion stack, the encoder family and the pretrained UNet (with the
/// identity adapter conditioned on the first training encoder).
struct WorldConfig {
    std::uint64_t seed = 0;
    int encoder_identities = 100;
    int encoder_poses = 6;
    int encoder_steps = 600;
    int base_identities = 200;
    int base_poses = 4;
    int base_iterations = 6000;

    std::string to_text() const;
    std::string digest() const;
};

struct World {
    WorldConfig config;
    DiffusionStack stack;
    std::vector<EncoderWeights> encoders;  // training encoders first, held-out last
    UNetWeights theta_pre;                 // adapter included

    std::vector<const EncoderWeights*> training_encoders() const;
    const EncoderWeights& held_out() const;
    /// The encoder whose embedding drives the adapter.
    const EncoderWeights& adapter_encoder() const;

    /// Trains from scratch; `log` (optional) receives one line per stage.
    static World build(const WorldConfig& cfg, std::ostream* log = nullptr);
    void save(const std::filesystem::path& dir) const;
    static World load(const std::filesystem::path& dir);
    /// Loads `cache_root/world-<digest>` when present, otherwise builds and
    /// saves it there.
    static World load_or_build(const WorldConfig& cfg, const std::filesystem::path& cache_root,
                               std::ostream* log = nullptr);
};

/// Identity ids used for protection targets; disjoint from the encoder and
/// base-model training sets.
inline constexpr int kProtectFirstId = 5000;

struct ExperimentConfig {
    ADFTConfig adft;
    ZSConfig zs;
    FinetuneConfig surrogate;  // Step-0 and dynamic-surrogate updates
    FinetuneConfig attack;     // attacker DreamBooth
    FinetuneConfig lora_attack{.learning_rate = 1e-2, .mode = FinetuneMode::lora};
    int identities = 5;
    int train_images = 4;       // images per identity that get protected
    int reference_images = 4;   // clean held-back poses for ISM
    int real_images = 20;       // clean poses per identity for fid_proxy
    int samples_per_identity = 20;
    int sample_steps = 50;
    std::vector<std::string> prompts{kTriggerPrompt, "a dslr portrait of sks person"};
    /// Whether the fine-tuning experiments also apply layer 2 to the images
    /// handed to the attacker.
    bool finetune_with_layer2 = false;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::uint64_t data_seed = 17;

    /// Desk defaults: attacker and surrogates at lr 1e-3, LoRA attacker at 1e-2.
    static ExperimentConfig desk();
    void validate() const;
};

const std::vector<std::string>& experiment_names();

/// Runs one named experiment. Reports carry per-seed values under
/// "<metric>.seed<k>" and the median over seeds under "<metric>".
MetricReport run_experiment(const std::string& name, const World& world, const ExperimentConfig& cfg,
                            std::ostream* log = nullptr);

/// One identity's protected images and the intermediate products.
struct ProtectedIdentity {
    int identity = 0;
    std::vector<ImageTensor> clean;
    std::vector<Landmarks> landmarks;
    std::vector<ImageTensor> layer1;     // x + delta_ft
    std::vector<ImageTensor> protected_; // after layer 2 (equals layer1 when skipped)
    std::vector<Perturbation> delta_ft;
    std::vector<Perturbation> delta_zs;
    std::vector<Layer2Result> layer2;
    std::vector<Layer1Record> history;
};

/// Layer 1 on all images of an identity, then (optionally) layer 2 on each.
ProtectedIdentity protect_identity(const World& world, const FaceDataset& data, int identity,
                                   const ExperimentConfig& cfg, std::uint64_t seed, bool with_layer1,
                                   bool with_layer2);

/// Protection targets: `identities` ids starting at kProtectFirstId, each
/// with train + reference + real poses.
FaceDataset protection_dataset(const ExperimentConfig& cfg);

}  // namespace dladiff
