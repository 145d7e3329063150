#include <gtest/gtest.h>

#include <cmath>

#include "dladiff/face.hpp"
#include "dladiff/rng.hpp"

using namespace dladiff;

namespace {

AffineMatrix similarity(double angle, double scale, double tx, double ty) {
    AffineMatrix a;
    const double c = std::cos(angle) * scale, s = std::sin(angle) * scale;
    a.m[0][0] = c;
    a.m[0][1] = -s;
    a.m[0][2] = tx;
    a.m[1][0] = s;
    a.m[1][1] = c;
    a.m[1][2] = ty;
    return a;
}

Landmarks transform(const AffineMatrix& a, const Landmarks& l) {
    Landmarks out;
    for (std::size_t i = 0; i < l.size(); ++i) out[i] = a.apply(l[i]);
    return out;
}

}  // namespace

TEST(Alignment, RecoversKnownSimilarity) {
    const AffineMatrix S = similarity(0.3, 0.27, 4.0, -2.5);
    const Landmarks src = transform(S, face_template());
    const AffineMatrix M = estimate_similarity(src, face_template());
    const AffineMatrix I = compose(M, S);
    EXPECT_NEAR(I.m[0][0], 1.0, 1e-9);
    EXPECT_NEAR(I.m[1][1], 1.0, 1e-9);
    EXPECT_NEAR(I.m[0][1], 0.0, 1e-9);
    EXPECT_NEAR(I.m[0][2], 0.0, 1e-8);
    EXPECT_NEAR(I.m[1][2], 0.0, 1e-8);
    const Landmarks back = transform(M, src);
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_NEAR(back[i].x, face_template()[i].x, 1e-8);
        EXPECT_NEAR(back[i].y, face_template()[i].y, 1e-8);
    }
}

TEST(Alignment, InverseRoundTrip) {
    const AffineMatrix A = similarity(-0.7, 3.1, 10.0, 2.0);
    const Point2 p{3.5, -8.25};
    const Point2 q = A.inverse().apply(A.apply(p));
    EXPECT_NEAR(q.x, p.x, 1e-12);
    EXPECT_NEAR(q.y, p.y, 1e-12);
}

TEST(Alignment, DegenerateLandmarksAreRejected) {
    Landmarks l;
    for (auto& p : l) p = {5.0, 5.0};
    EXPECT_THROW(estimate_similarity(l, face_template()), AlignmentError);
}

TEST(Alignment, IdentityWarpReproducesImage) {
    std::mt19937_64 rng(1);
    const ImageTensor x(Tensor::uniform({kCropSize, kCropSize, 3}, rng, 0.0, 1.0));
    EXPECT_LT(max_abs(warp_to_crop(x, AffineMatrix{}).tensor() - x.tensor()), 1e-12);
}

TEST(Alignment, AlignedCropPutsLandmarksOnTemplate) {
    // A smooth image whose value encodes position: after alignment the crop
    // value at each template point must equal the source value at the
    // landmark.
    const int n = 32;
    Tensor t({n, n, 3});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            t[(static_cast<std::size_t>(y) * n + x) * 3 + 0] = (x + 0.5) / n;
            t[(static_cast<std::size_t>(y) * n + x) * 3 + 1] = (y + 0.5) / n;
        }
    const ImageTensor img(t);
    const Landmarks lm = transform(similarity(0.1, 32.0 / 112.0 * 0.9, 2.0, 1.5), face_template());
    const AlignedFace a = align_face(img, lm);
    for (std::size_t i = 0; i < lm.size(); ++i) {
        const Point2 c = face_template()[i];
        const int cx = static_cast<int>(c.x), cy = static_cast<int>(c.y);
        const Point2 src = a.M.inverse().apply({cx + 0.5, cy + 0.5});
        EXPECT_NEAR(a.crop.at(cy, cx, 0), src.x / n, 2e-3);
        EXPECT_NEAR(a.crop.at(cy, cx, 1), src.y / n, 2e-3);
    }
}

TEST(Jitter, EntryStdMatchesScale) {
    const AffineMatrix M = similarity(0.2, 3.0, 5.0, 6.0);
    const double scale = 0.112;
    const int n = 4000;
    double sum[2][3] = {}, sq[2][3] = {};
    for (int k = 0; k < n; ++k) {
        const AffineMatrix J = jitter_affine(M, scale, derive_seed(7, "jitter-test", k));
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) {
                const double d = J.m[r][c] - M.m[r][c];
                sum[r][c] += d;
                sq[r][c] += d * d;
            }
    }
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) {
            const double mean = sum[r][c] / n;
            const double sd = std::sqrt(sq[r][c] / n - mean * mean);
            EXPECT_NEAR(mean, 0.0, 4.0 * scale / std::sqrt(n));
            EXPECT_NEAR(sd, scale, 0.05 * scale);
        }
    EXPECT_EQ(jitter_affine(M, 0.0, 3), M);
}

TEST(Composite, UnchangedCropIsANoOp) {
    std::mt19937_64 rng(2);
    const ImageTensor x(Tensor::uniform({32, 32, 3}, rng, 0.0, 1.0));
    const Landmarks lm = transform(similarity(-0.15, 0.25, 3.0, 2.0), face_template());
    const AlignedFace a = align_face(x, lm);
    EXPECT_LT(max_abs(composite_back(x, a.crop, a.M).tensor() - x.tensor()), 1e-12);
}

TEST(Composite, ChangeStaysInsideCropSupport) {
    std::mt19937_64 rng(3);
    const ImageTensor x(Tensor::uniform({32, 32, 3}, rng, 0.2, 0.8));
    // Small face in the upper-left so most of the frame is outside the crop.
    const Landmarks lm = transform(similarity(0.0, 0.1, 1.0, 1.0), face_template());
    const AlignedFace a = align_face(x, lm);
    const ImageTensor changed(a.crop.tensor() + Tensor(a.crop.tensor().shape(), 0.05));
    const ImageTensor y = composite_back(x, changed, a.M);
    EXPECT_GT(max_abs(y.tensor() - x.tensor()), 1e-3);
    for (int r = 20; r < 32; ++r)
        for (int c = 20; c < 32; ++c)
            for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(y.at(r, c, ch), x.at(r, c, ch));
}

TEST(ZSConfig, Validation) {
    ZSConfig z;
    EXPECT_NO_THROW(z.validate(2));
    z.ths = 1.0;
    EXPECT_NO_THROW(z.validate(2));
    z.ths = -1.0;
    EXPECT_ANY_THROW(z.validate(2));
    z = ZSConfig{};
    z.weights = {0.5, 0.4};
    EXPECT_ANY_THROW(z.validate(2));
    z.weights = {0.5, 0.5};
    EXPECT_NO_THROW(z.validate(2));
    EXPECT_ANY_THROW(z.validate(3));
}

TEST(Layer2, BoundHoldsAndThresholdOneStopsImmediately) {
    std::mt19937_64 rng(4);
    const ImageTensor x(Tensor::uniform({32, 32, 3}, rng, 0.2, 0.8));
    const Landmarks lm = transform(similarity(0.05, 0.27, 1.0, 0.5), face_template());
    std::vector<EncoderWeights> encs;
    for (const EncoderSpec& s : default_encoder_specs())
        if (!s.held_out) encs.push_back(EncoderWeights::init(s, 50 + encs.size()));
    const std::vector<const EncoderWeights*> ptr{&encs[0], &encs[1]};
    ZSConfig z;
    z.max_iters = 5;
    z.ths = -0.9;
    const Layer2Result r = optimize_layer2(x, x, lm, ptr, z);
    EXPECT_LE(r.delta.linf(), 11.0 / 255.0);
    EXPECT_EQ(r.iterations, 5);
    z.ths = 1.0;
    const Layer2Result s = optimize_layer2(x, x, lm, ptr, z);
    EXPECT_TRUE(s.converged);
    EXPECT_EQ(s.iterations, 0);
    EXPECT_EQ(s.delta.linf(), 0.0);
}
