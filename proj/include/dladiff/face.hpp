#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dladiff/autograd.hpp"
#include "dladiff/identity.hpp"
#include "dladiff/image.hpp"
#include "dladiff/perturbation.hpp"

namespace dladiff {

struct AlignmentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// 2x3 map from source-image coordinates to aligned-crop coordinates.
struct AffineMatrix {
    double m[2][3] = {{1, 0, 0}, {0, 1, 0}};

    static AffineMatrix identity() { return {}; }
    double det() const { return m[0][0] * m[1][1] - m[0][1] * m[1][0]; }
    bool invertible() const;
    AffineMatrix inverse() const;
    Point2 apply(Point2 p) const;
    ag::AffineSampler sampler() const;

    friend bool operator==(const AffineMatrix&, const AffineMatrix&) = default;
};

/// a after b: compose(a, b).apply(p) == a.apply(b.apply(p)).
AffineMatrix compose(const AffineMatrix& a, const AffineMatrix& b);

/// Standard five-point 112 x 112 face template.
const Landmarks& face_template();

/// Least-squares similarity transform mapping src onto dst (closed form).
/// Throws AlignmentError when src is collinear.
AffineMatrix estimate_similarity(const Landmarks& src, const Landmarks& dst);

struct AlignedFace {
    ImageTensor crop;
    AffineMatrix M;
};

/// Warps `x` so its landmarks land on the template; crop is size x size.
AlignedFace align_face(const ImageTensor& x, const Landmarks& landmarks, int size = kCropSize);
ImageTensor warp_to_crop(const ImageTensor& x, const AffineMatrix& M, int size = kCropSize);
ag::Var warp_to_crop(const ag::Var& x, const AffineMatrix& M, int size = kCropSize);

/// M + N(0, scale) per entry; redraws (max 10 tries) if the jitter breaks
/// invertibility.
AffineMatrix jitter_affine(const AffineMatrix& M, double scale, std::uint64_t seed);

struct ZSConfig {
    double eta_zs = 11.0 / 255.0;
    double sigma_zs = 8e-4;
    double ths = 0.1;
    int max_iters = 400;
    /// Per-entry jitter std, in multiples of the template width.
    double jitter_scale = 1e-3;
    GradientMode mode = GradientMode::sign;
    /// Per-encoder similarity weights; empty means uniform 1/N.
    std::vector<double> weights;
    std::uint64_t seed = 0;

    void validate(std::size_t n_encoders) const;
};

/// 1 - sum_i w_i * CosSim(IE_i(x_pert_f), IE_i(x_clean_f)). Weights must sum
/// to 1; empty means uniform.
double identity_loss(const ImageTensor& x_pert_f, const ImageTensor& x_clean_f,
                     std::span<const EncoderWeights* const> encoders, std::span<const double> weights = {});

/// Loss and gradient with respect to an additive crop perturbation.
struct IdentityLossGrad {
    double loss;
    Tensor grad;
};
IdentityLossGrad identity_loss_grad(const ImageTensor& x_crop, const Tensor& delta,
                                    std::span<const IdentityEmbedding> targets,
                                    std::span<const EncoderWeights* const> encoders, std::span<const double> weights);

struct Layer2Result {
    Perturbation delta;  // crop space, 112 x 112 x 3
    AffineMatrix M;      // alignment of the clean image
    ImageTensor protected_crop;
    bool converged = false;
    int iterations = 0;
    std::vector<double> final_similarity;  // per training encoder, un-jittered M
    std::vector<double> loss_history;
};

/// Layer-2 PGD on the aligned crop until every encoder's similarity to the
/// clean crop is <= ths, or max_iters. Each iteration re-jitters the clean
/// alignment and re-warps the layer-1 image before taking the step.
Layer2Result optimize_layer2(const ImageTensor& x_protected_l1, const ImageTensor& x_clean, const Landmarks& landmarks,
                             std::span<const EncoderWeights* const> encoders, const ZSConfig& cfg);

/// Maps the protected crop back into the source frame: the crop-space change
/// relative to warp(x_protected_l1, M) is back-projected through the bilinear
/// warp (normalised adjoint), feathered over 2 source pixels at the crop
/// border, and added to x_protected_l1. Pixels outside the crop support are
/// untouched.
ImageTensor composite_back(const ImageTensor& x_protected_l1, const ImageTensor& x_f_protected, const AffineMatrix& M);

}  // namespace dladiff
