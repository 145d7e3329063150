#include "dladiff/face.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "dladiff/rng.hpp"

namespace dladiff {

bool AffineMatrix::invertible() const { return std::abs(det()) > 1e-8 && std::isfinite(det()); }

AffineMatrix AffineMatrix::inverse() const {
    if (!invertible()) throw AlignmentError("affine matrix is not invertible");
    const double d = det();
    AffineMatrix r;
    r.m[0][0] = m[1][1] / d;
    r.m[0][1] = -m[0][1] / d;
    r.m[1][0] = -m[1][0] / d;
    r.m[1][1] = m[0][0] / d;
    r.m[0][2] = -(r.m[0][0] * m[0][2] + r.m[0][1] * m[1][2]);
    r.m[1][2] = -(r.m[1][0] * m[0][2] + r.m[1][1] * m[1][2]);
    return r;
}

Point2 AffineMatrix::apply(Point2 p) const {
    return {m[0][0] * p.x + m[0][1] * p.y + m[0][2], m[1][0] * p.x + m[1][1] * p.y + m[1][2]};
}

ag::AffineSampler AffineMatrix::sampler() const {
    ag::AffineSampler s{};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) s.m[r][c] = m[r][c];
    return s;
}

AffineMatrix compose(const AffineMatrix& a, const AffineMatrix& b) {
    AffineMatrix r;
    for (int i = 0; i < 2; ++i) {
        r.m[i][0] = a.m[i][0] * b.m[0][0] + a.m[i][1] * b.m[1][0];
        r.m[i][1] = a.m[i][0] * b.m[0][1] + a.m[i][1] * b.m[1][1];
        r.m[i][2] = a.m[i][0] * b.m[0][2] + a.m[i][1] * b.m[1][2] + a.m[i][2];
    }
    return r;
}

const Landmarks& face_template() {
    static const Landmarks t{Point2{38.2946, 51.6963}, Point2{73.5318, 51.5014}, Point2{56.0252, 71.7366},
                             Point2{41.5493, 92.3655}, Point2{70.7299, 92.2041}};
    return t;
}

AffineMatrix estimate_similarity(const Landmarks& src, const Landmarks& dst) {
    constexpr int n = 5;
    Eigen::Matrix<double, 2, n> S, D;
    for (int i = 0; i < n; ++i) {
        if (!std::isfinite(src[i].x) || !std::isfinite(src[i].y)) throw AlignmentError("non-finite landmark");
        S.col(i) << src[i].x, src[i].y;
        D.col(i) << dst[i].x, dst[i].y;
    }
    const Eigen::Vector2d ms = S.rowwise().mean(), md = D.rowwise().mean();
    const Eigen::Matrix<double, 2, n> Sc = S.colwise() - ms, Dc = D.colwise() - md;
    const Eigen::Matrix2d css = Sc * Sc.transpose() / n;
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(css);
    const double lo = es.eigenvalues()(0), hi = es.eigenvalues()(1);
    if (!(hi > 0) || lo <= 1e-9 * hi) throw AlignmentError("degenerate (collinear) landmarks");

    const Eigen::Matrix2d cov = Dc * Sc.transpose() / n;
    const Eigen::JacobiSVD<Eigen::Matrix2d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix2d sgn = Eigen::Matrix2d::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) sgn(1, 1) = -1;
    const Eigen::Matrix2d R = svd.matrixU() * sgn * svd.matrixV().transpose();
    const double var_s = css.trace();
    const double scale = (svd.singularValues().asDiagonal() * sgn).trace() / var_s;
    const Eigen::Vector2d t = md - scale * R * ms;

    AffineMatrix M;
    for (int r = 0; r < 2; ++r) {
        M.m[r][0] = scale * R(r, 0);
        M.m[r][1] = scale * R(r, 1);
        M.m[r][2] = t(r);
    }
    return M;
}

namespace {

Landmarks scaled_template(int size) {
    Landmarks t = face_template();
    const double k = size / static_cast<double>(kCropSize);
    for (auto& p : t) p = {p.x * k, p.y * k};
    return t;
}

}  // namespace

ImageTensor warp_to_crop(const ImageTensor& x, const AffineMatrix& M, int size) {
    return ImageTensor(warp_to_crop(ag::constant(x.tensor()), M, size).value());
}

ag::Var warp_to_crop(const ag::Var& x, const AffineMatrix& M, int size) {
    if (size < 1) throw ParameterError("crop size must be positive");
    return ag::warp_bilinear(x, M.inverse().sampler(), size, size);
}

AlignedFace align_face(const ImageTensor& x, const Landmarks& landmarks, int size) {
    const AffineMatrix M = estimate_similarity(landmarks, scaled_template(size));
    return {warp_to_crop(x, M, size), M};
}

AffineMatrix jitter_affine(const AffineMatrix& M, double scale, std::uint64_t seed) {
    if (!(scale >= 0.0) || !std::isfinite(scale)) throw ParameterError("jitter scale must be finite and >= 0");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int attempt = 0; attempt < 10; ++attempt) {
        AffineMatrix J = M;
        for (auto& row : J.m)
            for (double& v : row) v += scale * nd(rng);
        if (J.invertible()) return J;
    }
    throw AlignmentError("jitter_affine: no invertible draw in 10 tries");
}

// ---------------------------------------------------------------------------
// Layer 2

void ZSConfig::validate(std::size_t n_encoders) const {
    if (!(eta_zs > 0 && eta_zs < 1)) throw ParameterError("eta_zs must lie in (0,1)");
    if (!(sigma_zs >= 0) || !std::isfinite(sigma_zs)) throw ParameterError("sigma_zs must be finite and >= 0");
    if (!(ths > -1 && ths <= 1)) throw ParameterError("ths must lie in (-1,1]");
    if (max_iters < 1) throw ParameterError("max_iters must be >= 1");
    if (!(jitter_scale >= 0) || !std::isfinite(jitter_scale)) throw ParameterError("jitter_scale must be >= 0");
    if (n_encoders < 1) throw ConfigError("layer 2 needs at least one encoder");
    if (!weights.empty() && weights.size() != n_encoders)
        throw ConfigError("encoder weight count does not match encoder count");
    double total = 0;
    for (double w : weights) {
        if (!(w >= 0) || !std::isfinite(w)) throw ParameterError("encoder weights must be finite and >= 0");
        total += w;
    }
    if (!weights.empty() && std::abs(total - 1.0) > 1e-9) throw ParameterError("encoder weights must sum to 1");
}

namespace {

std::vector<double> resolve_weights(std::span<const double> w, std::size_t n) {
    if (n == 0) throw ConfigError("identity loss needs at least one encoder");
    if (w.empty()) return std::vector<double>(n, 1.0 / static_cast<double>(n));
    if (w.size() != n) throw ConfigError("encoder weight count does not match encoder count");
    double s = 0;
    for (double v : w) {
        if (!(v >= 0) || !std::isfinite(v)) throw ParameterError("encoder weights must be finite and >= 0");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ParameterError("encoder weights must sum to 1");
    return {w.begin(), w.end()};
}

// Normalised adjoint of the crop warp: source pixel s receives
// feather(s) * sum_o wt(o,s) d(o) / sum_o wt(o,s).
class BackProjector {
public:
    BackProjector(int h, int w, int size, const AffineMatrix& M) : h_(h), w_(w), size_(size) {
        taps_ = ag::bilinear_taps(M.inverse().sampler(), h, w, size, size);
        std::vector<double> den(static_cast<std::size_t>(h) * w, 0.0);
        for (const auto& t : taps_) den[static_cast<std::size_t>(t.src)] += t.wt;
        const double px = std::sqrt(std::abs(M.det()));
        coef_.assign(den.size(), 0.0);
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const std::size_t s = static_cast<std::size_t>(i) * w + j;
                if (den[s] <= 1e-12) continue;
                const Point2 q = M.apply({j + 0.5, i + 0.5});
                const double edge = std::min({q.x, size - q.x, q.y, size - q.y}) / px;
                const double feather = std::clamp(edge / 2.0, 0.0, 1.0);
                coef_[s] = feather / den[s];
            }
    }

    Tensor apply(const Tensor& d) const {
        const int c = d.dim(2);
        Tensor out({h_, w_, c});
        for (const auto& t : taps_)
            for (int k = 0; k < c; ++k)
                out[static_cast<std::size_t>(t.src) * c + k] += t.wt * d[static_cast<std::size_t>(t.out) * c + k];
        for (std::size_t s = 0; s < coef_.size(); ++s)
            for (int k = 0; k < c; ++k) out[s * c + k] *= coef_[s];
        return out;
    }

    ag::Var apply(const ag::Var& d) const {
        Tensor v = apply(d.value());
        return ag::make_node(std::move(v), {d}, [this](ag::Node& n) {
            ag::Node& p = *n.parents[0];
            Tensor& g = p.grad_buffer();
            const int c = g.dim(2);
            for (const auto& t : taps_)
                for (int k = 0; k < c; ++k)
                    g[static_cast<std::size_t>(t.out) * c + k] +=
                        t.wt * coef_[static_cast<std::size_t>(t.src)] * n.grad[static_cast<std::size_t>(t.src) * c + k];
        });
    }

    int size() const { return size_; }

private:
    int h_, w_, size_;
    std::vector<ag::WarpTap> taps_;
    std::vector<double> coef_;
};

std::vector<double> similarities(const ag::Var& crop, std::span<const IdentityEmbedding> targets,
                                 std::span<const EncoderWeights* const> encoders, std::vector<ag::Var>* nodes) {
    std::vector<double> out;
    for (std::size_t i = 0; i < encoders.size(); ++i) {
        ag::Var e = encoder_forward(*encoders[i], crop).embedding;
        ag::Var c = ag::cosine(e, ag::constant(targets[i].vector()));
        out.push_back(std::clamp(c.item(), -1.0, 1.0));
        if (nodes) nodes->push_back(c);
    }
    return out;
}

double weighted_loss(const std::vector<double>& sims, const std::vector<double>& w) {
    double s = 0;
    for (std::size_t i = 0; i < sims.size(); ++i) s += w[i] * sims[i];
    return 1.0 - s;
}

}  // namespace

double identity_loss(const ImageTensor& x_pert_f, const ImageTensor& x_clean_f,
                     std::span<const EncoderWeights* const> encoders, std::span<const double> weights) {
    const std::vector<double> w = resolve_weights(weights, encoders.size());
    std::vector<double> sims;
    for (const EncoderWeights* e : encoders)
        sims.push_back(std::clamp(cosine_similarity(encode(*e, x_pert_f), encode(*e, x_clean_f)), -1.0, 1.0));
    return weighted_loss(sims, w);
}

IdentityLossGrad identity_loss_grad(const ImageTensor& x_crop, const Tensor& delta,
                                    std::span<const IdentityEmbedding> targets,
                                    std::span<const EncoderWeights* const> encoders, std::span<const double> weights) {
    const std::vector<double> w = resolve_weights(weights, encoders.size());
    if (targets.size() != encoders.size()) throw ConfigError("one target embedding per encoder required");
    if (!delta.same_shape(x_crop.tensor())) throw ShapeError("identity_loss_grad: delta shape mismatch");
    ag::Var d = ag::param(delta);
    ag::Var crop = ag::clamp(ag::add(ag::constant(x_crop.tensor()), d), 0.0, 1.0);
    ag::Var loss;
    for (std::size_t i = 0; i < encoders.size(); ++i) {
        ag::Var c = ag::cosine(encoder_forward(*encoders[i], crop).embedding, ag::constant(targets[i].vector()));
        ag::Var term = ag::scale(c, -w[i]);
        loss = loss.defined() ? ag::add(loss, term) : term;
    }
    loss = ag::add_scalar(loss, 1.0);
    ag::backward(loss);
    return {loss.item(), d.grad()};
}

Layer2Result optimize_layer2(const ImageTensor& x_protected_l1, const ImageTensor& x_clean, const Landmarks& landmarks,
                             std::span<const EncoderWeights* const> encoders, const ZSConfig& cfg) {
    cfg.validate(encoders.size());
    for (const EncoderWeights* e : encoders)
        if (e->spec.held_out) throw ConfigError("held-out encoder " + e->spec.id + " cannot drive layer 2");
    if (x_protected_l1.tensor().shape() != x_clean.tensor().shape())
        throw ShapeError("optimize_layer2: protected and clean images differ in shape");
    const std::vector<double> w = resolve_weights(cfg.weights, encoders.size());

    const AlignedFace clean = align_face(x_clean, landmarks);
    const AffineMatrix& M = clean.M;
    std::vector<IdentityEmbedding> targets;
    for (const EncoderWeights* e : encoders) targets.push_back(encode(*e, clean.crop));

    const BackProjector back(x_protected_l1.height(), x_protected_l1.width(), kCropSize, M);
    const ag::Var x1 = ag::constant(x_protected_l1.tensor());
    const ag::Var base_crop = ag::constant(warp_to_crop(x_protected_l1, M).tensor());

    // Crop-space delta -> composited source image -> crop seen through `view`.
    auto view_crop = [&](const ag::Var& d, const AffineMatrix& view) {
        ag::Var d_eff = ag::sub(ag::clamp(ag::add(base_crop, d), 0.0, 1.0), base_crop);
        ag::Var img = ag::clamp(ag::add(x1, back.apply(d_eff)), 0.0, 1.0);
        return warp_to_crop(img, view);
    };

    Layer2Result res;
    res.M = M;
    Perturbation delta({kCropSize, kCropSize, 3}, cfg.eta_zs, PerturbationLayer::zs);
    Perturbation best = delta;
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<double> best_sims;
    const double jitter = cfg.jitter_scale * kCropSize;

    for (int iter = 0;; ++iter) {
        const std::vector<double> sims = similarities(view_crop(ag::constant(delta.delta()), M), targets, encoders, nullptr);
        const double worst = *std::max_element(sims.begin(), sims.end());
        if (worst < best_score) {
            best_score = worst;
            best = delta;
            best_sims = sims;
        }
        res.iterations = iter;
        if (worst <= cfg.ths) {
            res.converged = true;
            break;
        }
        if (iter == cfg.max_iters) break;

        const AffineMatrix Mj = jitter_affine(M, jitter, derive_seed(cfg.seed, "zs-jitter", static_cast<std::uint64_t>(iter)));
        ag::Var d = ag::param(delta.delta());
        std::vector<ag::Var> cos_nodes;
        similarities(view_crop(d, Mj), targets, encoders, &cos_nodes);
        // Encoders already at or below ths drop out of the ascent direction.
        const bool any_above = std::any_of(cos_nodes.begin(), cos_nodes.end(),
                                           [&](const ag::Var& c) { return c.item() > cfg.ths; });
        ag::Var loss;
        for (std::size_t i = 0; i < cos_nodes.size(); ++i) {
            ag::Var term = ag::scale(cos_nodes[i], -w[i]);
            if (any_above && cos_nodes[i].item() <= cfg.ths) term = ag::add_scalar(ag::scale(cos_nodes[i], 0.0), -w[i] * cfg.ths);
            loss = loss.defined() ? ag::add(loss, term) : term;
        }
        loss = ag::add_scalar(loss, 1.0);
        ag::backward(loss);
        res.loss_history.push_back(loss.item());
        delta = pgd_step(delta, d.grad(), cfg.sigma_zs, cfg.mode).delta;
    }

    res.delta = res.converged ? delta : best;
    res.final_similarity = res.converged ? similarities(view_crop(ag::constant(delta.delta()), M), targets, encoders, nullptr)
                                         : best_sims;
    res.protected_crop = ImageTensor(ag::clamp(ag::add(base_crop, ag::constant(res.delta.delta())), 0.0, 1.0).value());
    return res;
}

ImageTensor composite_back(const ImageTensor& x_protected_l1, const ImageTensor& x_f_protected, const AffineMatrix& M) {
    const int size = x_f_protected.height();
    if (x_f_protected.width() != size || x_f_protected.channels() != x_protected_l1.channels())
        throw ShapeError("composite_back: crop must be square with matching channels");
    const Tensor d = x_f_protected.tensor() - warp_to_crop(x_protected_l1, M, size).tensor();
    const BackProjector back(x_protected_l1.height(), x_protected_l1.width(), size, M);
    return ImageTensor(x_protected_l1.tensor() + back.apply(d));
}

}  // namespace dladiff
