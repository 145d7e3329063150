#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dladiff/metrics.hpp"

using namespace dladiff;

namespace {

std::vector<Tensor> gaussian(int n, int d, std::mt19937_64& rng, double shift, double stretch) {
    std::vector<Tensor> out;
    for (int i = 0; i < n; ++i) {
        Tensor t = Tensor::randn({d}, rng);
        t[0] = t[0] * stretch + shift;
        if (d > 1) t[1] += 0.5 * t[0];
        out.push_back(t);
    }
    return out;
}

// Direct formula with a general (non-symmetric) eigendecomposition of
// Ca * Cb for the trace of its square root.
double naive_frechet(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    const auto fit = [](const std::vector<Tensor>& f, Eigen::VectorXd& mu, Eigen::MatrixXd& c) {
        const int n = static_cast<int>(f.size()), d = static_cast<int>(f[0].size());
        mu = Eigen::VectorXd::Zero(d);
        for (const auto& t : f)
            for (int j = 0; j < d; ++j) mu(j) += t[j] / n;
        c = Eigen::MatrixXd::Zero(d, d);
        for (const auto& t : f)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) c(i, j) += (t[i] - mu(i)) * (t[j] - mu(j)) / (n - 1);
        c += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    };
    Eigen::VectorXd ma, mb;
    Eigen::MatrixXd ca, cb;
    fit(a, ma, ca);
    fit(b, mb, cb);
    const Eigen::EigenSolver<Eigen::MatrixXd> es(ca * cb);
    double tr = 0;
    for (int i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(es.eigenvalues()(i)).real();
    return (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2 * tr;
}

IdentityEmbedding emb(std::initializer_list<double> v) { return IdentityEmbedding(Tensor({static_cast<int>(v.size())}, v)); }

}  // namespace

TEST(Frechet, MatchesEigenOracleIn2D) {
    std::mt19937_64 rng(1);
    const auto a = gaussian(200, 2, rng, 0.0, 1.0);
    const auto b = gaussian(150, 2, rng, 0.7, 2.0);
    EXPECT_NEAR(frechet_distance(a, b), naive_frechet(a, b), 1e-6);
}

TEST(Frechet, OneDimensionalAnalyticCase) {
    // Two point sets with identical spread, means 1 apart.
    std::vector<Tensor> a, b;
    for (double v : {-1.0, 0.0, 1.0}) {
        a.push_back(Tensor({1}, std::vector<double>{v}));
        b.push_back(Tensor({1}, std::vector<double>{v + 1.0}));
    }
    EXPECT_NEAR(frechet_distance(a, b), 1.0, 1e-6);
}

TEST(Frechet, IdentitySymmetryAndSign) {
    std::mt19937_64 rng(2);
    const auto a = gaussian(60, 8, rng, 0.0, 1.0);
    const auto b = gaussian(80, 8, rng, 1.5, 0.5);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
    EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-9);
    EXPECT_GE(frechet_distance(a, b), 0.0);
}

TEST(Frechet, FewerThanTwoSamplesRejected) {
    std::mt19937_64 rng(3);
    const auto a = gaussian(1, 3, rng, 0, 1), b = gaussian(5, 3, rng, 0, 1);
    EXPECT_THROW(frechet_distance(a, b), ParameterError);
}

TEST(Psnr, SaturatedBudgetsGiveAnalyticFloor) {
    const ImageTensor a(8, 8, 3, 0.5);
    const ImageTensor b(8, 8, 3, 0.5 + 18.0 / 255.0);
    EXPECT_NEAR(psnr(a, b), 20.0 * std::log10(255.0 / 18.0), 1e-9);
    EXPECT_NEAR(psnr(a, b), 23.03, 5e-3);
    EXPECT_NEAR(psnr(a, b), psnr(b, a), 1e-12);
    EXPECT_TRUE(std::isinf(psnr(a, a)));
    EXPECT_ANY_THROW(psnr(a, ImageTensor(8, 4, 3)));
}

TEST(Ism, SingleReferenceItselfIsOne) {
    const auto e = emb({0.3, -0.2, 0.9});
    EXPECT_NEAR(ism(std::vector{e}, std::vector{e}), 1.0, 1e-12);
}

TEST(Ism, MatchesMeanReferenceOracleAndIgnoresOrder) {
    std::mt19937_64 rng(4);
    std::vector<IdentityEmbedding> c, r;
    for (int i = 0; i < 5; ++i) c.emplace_back(Tensor::randn({6}, rng));
    for (int i = 0; i < 3; ++i) r.emplace_back(Tensor::randn({6}, rng));
    Tensor m({6});
    for (const auto& x : r) m += x.vector();
    double oracle = 0;
    for (const auto& x : c) oracle += dot(x.vector(), m) / std::sqrt(sum_sq(m)) / 5.0;
    EXPECT_NEAR(ism(c, r), oracle, 1e-12);
    std::reverse(c.begin(), c.end());
    EXPECT_NEAR(ism(c, r), oracle, 1e-12);
}

TEST(Ism, SelfSetIsCloseToPairwiseMean) {
    // Tight cluster: the mean-reference score tracks the pairwise average.
    std::mt19937_64 rng(5);
    Tensor centre = Tensor::randn({16}, rng);
    std::vector<IdentityEmbedding> s;
    for (int i = 0; i < 20; ++i) s.emplace_back(centre + Tensor::randn({16}, rng, 0.1));
    double pair = 0;
    int n = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = i + 1; j < s.size(); ++j, ++n) pair += cosine_similarity(s[i], s[j]);
    EXPECT_NEAR(ism(s, s), pair / n, 0.02);
}

TEST(Ism, EmptyListsRejected) {
    EXPECT_THROW(ism(std::vector<IdentityEmbedding>{}, std::vector{emb({1, 0})}), ParameterError);
}

TEST(Report, TextRoundTripIsLossless) {
    MetricReport r;
    r.experiment = "finetune_defense";
    r.seeds = {0, 1, 2};
    r.metrics["ism_clean"] = 0.123456789012345678;
    r.metrics["fid_proxy_protected.seed2"] = 1234.5678e-7;
    r.metrics["psnr"] = std::numeric_limits<double>::infinity();
    r.counts["identities"] = 5;
    const MetricReport s = MetricReport::from_text(r.to_text());
    EXPECT_EQ(s.experiment, r.experiment);
    EXPECT_EQ(s.seeds, r.seeds);
    EXPECT_EQ(s.metrics, r.metrics);
    EXPECT_EQ(s.counts, r.counts);
    const auto path = std::filesystem::temp_directory_path() / "dladiff_report_test.txt";
    r.save(path);
    EXPECT_EQ(MetricReport::load(path).to_text(), r.to_text());
    std::filesystem::remove(path);
    EXPECT_NE(r.to_csv().find("finetune_defense,ism_clean,"), std::string::npos);
}

TEST(Report, NanIsRefusedAndUnknownKeysRejected) {
    MetricReport r;
    r.experiment = "x";
    r.metrics["bad"] = std::nan("");
    EXPECT_ANY_THROW(r.to_text());
    EXPECT_ANY_THROW(MetricReport::from_text("experiment = x\nseeds = 0\nbogus = 1\n"));
}
