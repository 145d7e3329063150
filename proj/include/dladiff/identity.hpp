#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dladiff/autograd.hpp"
#include "dladiff/diffusion.hpp"
#include "dladiff/image.hpp"
#include "dladiff/io.hpp"

namespace dladiff {

// ---------------------------------------------------------------------------
// Procedural faces
//
// Faces are described in a 112 x 112 "template frame" (the aligned-crop
// frame) and rendered at any resolution by scaling that frame onto the image.

struct Rgb {
    double r = 0, g = 0, b = 0;
};

/// Identity-defining generative parameters, template-frame units.
struct FaceGeometry {
    double face_cx = 56, face_cy = 66, face_rx = 38, face_ry = 50;
    double hair_line = 30;
    double eye_y = 51.6, eye_half_spacing = 17.6, eye_rx = 7, eye_ry = 4, iris_r = 3.5;
    double brow_gap = 9, brow_half_len = 8, brow_thickness = 2.5;
    double nose_y = 71.7, nose_len = 16, nose_half_w = 5;
    double mouth_y = 92.3, mouth_half_w = 14.6, mouth_h = 3.5;
    Rgb skin, hair, iris, lip;
};

struct SyntheticIdentity {
    int id = 0;
    FaceGeometry geometry;
    /// Five landmarks of the unposed face, template frame.
    Landmarks canonical_landmarks() const;
};

/// Per-image variation: similarity pose about the face centre plus lighting
/// and background.
struct PoseParams {
    double rotation = 0.0;  // radians
    double scale = 1.0;
    double tx = 0.0, ty = 0.0;  // template units
    double brightness = 1.0;
    double gradient = 0.0;  // horizontal lighting slope
    Rgb background{0.5, 0.5, 0.5};
};

SyntheticIdentity make_identity(int id, std::uint64_t seed);
PoseParams make_pose(int id, int pose_index, std::uint64_t seed);
/// Template-frame point under the pose.
Point2 apply_pose(const PoseParams& pose, Point2 p);
/// Landmarks of a posed face in pixel coordinates of a `resolution` image.
Landmarks posed_landmarks(const SyntheticIdentity& ident, const PoseParams& pose, int resolution);
/// Anti-aliased rendering, quantised to the 8-bit grid.
ImageTensor render_face(const SyntheticIdentity& ident, const PoseParams& pose, int resolution);

struct FaceSample {
    int identity = 0;
    int pose_index = 0;
    PoseParams pose;
    ImageTensor image32;
    Landmarks landmarks32;
    ImageTensor image112;
    Landmarks landmarks112;
};

struct FaceDataset {
    std::uint64_t seed = 0;
    std::vector<SyntheticIdentity> identities;
    std::vector<FaceSample> samples;

    std::vector<const FaceSample*> of_identity(int id) const;
};

/// Identities first_id .. first_id + num_ids - 1, imgs_per_id poses each.
FaceDataset generate_identity_set(int num_ids, int imgs_per_id, std::uint64_t seed, int first_id = 0);

/// Writes PNGs (id<k>_<pose>_{32,112}.png) plus landmarks.txt. Each landmarks
/// line: "<id> <pose> <res> <rotation> <scale> <tx> <ty> x1 y1 ... x5 y5".
/// Empty renditions are skipped.
void save_dataset(const FaceDataset& ds, const std::filesystem::path& dir);
/// Reads a directory written by save_dataset (images and landmarks only).
/// With require_both false, samples may lack the 112 rendition.
FaceDataset load_dataset(const std::filesystem::path& dir, bool require_both = true);

/// Landmarks of the mean face at `resolution`, used to align generated
/// samples whose pose is unknown.
Landmarks canonical_landmarks(int resolution);

// ---------------------------------------------------------------------------
// Identity encoders

enum class EncoderArch { shallow, deep, heldout };
std::string to_string(EncoderArch a);
EncoderArch encoder_arch_from_string(const std::string& s);

struct EncoderSpec {
    std::string id;
    EncoderArch arch = EncoderArch::shallow;
    int dim = 32;
    bool held_out = false;
};

/// Default family: two training encoders of differing depth and one held-out
/// encoder with a different pooling pyramid.
std::vector<EncoderSpec> default_encoder_specs();

struct EncoderWeights {
    EncoderSpec spec;
    std::map<std::string, Tensor> params;

    static EncoderWeights init(const EncoderSpec& spec, std::uint64_t seed);
    Checkpoint to_checkpoint() const;
    static EncoderWeights from_checkpoint(const Checkpoint& ck);
};

inline constexpr int kCropSize = 112;

struct EncoderGraph {
    ag::Var embedding;  // unit norm, [dim]
    ag::Var features;   // penultimate activations
};

/// Differentiable encoder pass on a [112,112,3] crop.
EncoderGraph encoder_forward(const EncoderWeights& w, const ag::Var& crop);
IdentityEmbedding encode(const EncoderWeights& w, const ImageTensor& crop);
Tensor encoder_features(const EncoderWeights& w, const ImageTensor& crop);

struct EncoderTrainConfig {
    int steps = 600;
    int batch_size = 16;
    double learning_rate = 2e-3;
    double margin = 0.2;
    double scale = 16.0;
    std::uint64_t seed = 0;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Margin-softmax (additive cosine margin) training on aligned crops of both
/// renditions. Needs at least two identities.
EncoderWeights train_encoder(const EncoderSpec& spec, const FaceDataset& ds, const EncoderTrainConfig& cfg);

/// Aligned 112 crops of a sample: [0] from the 112 rendition, [1] from the 32.
std::array<ImageTensor, 2> aligned_crops(const FaceSample& s);

/// Area under the ROC of same-vs-different identity cosine scores over all
/// pairs of the given crops.
double verification_auc(const EncoderWeights& w, const std::vector<ImageTensor>& crops, const std::vector<int>& labels);

}  // namespace dladiff
