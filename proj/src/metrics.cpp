#include "dladiff/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace dladiff {

double ism(std::span<const IdentityEmbedding> candidates, std::span<const IdentityEmbedding> references) {
    if (candidates.empty() || references.empty()) throw ParameterError("ism: empty candidate or reference list");
    Tensor mean({references.front().dim()});
    for (const auto& r : references) {
        if (r.dim() != mean.dim(0)) throw ShapeError("ism: embedding dims differ");
        mean += r.vector();
    }
    const IdentityEmbedding ref(mean);
    double s = 0;
    for (const auto& c : candidates) s += cosine_similarity(c, ref);
    return s / static_cast<double>(candidates.size());
}

double ism(std::span<const ImageTensor> candidate_crops, std::span<const ImageTensor> reference_crops,
           const EncoderWeights& encoder) {
    std::vector<IdentityEmbedding> c, r;
    for (const auto& x : candidate_crops) c.push_back(encode(encoder, x));
    for (const auto& x : reference_crops) r.push_back(encode(encoder, x));
    return ism(c, r);
}

namespace {

void moments(std::span<const Tensor> f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const int d = static_cast<int>(f.front().size());
    const int n = static_cast<int>(f.size());
    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(f[i].size()) != d) throw ShapeError("frechet_distance: feature dims differ");
        for (int j = 0; j < d; ++j) X(i, j) = f[i][j];
    }
    mu = X.colwise().mean();
    const Eigen::MatrixXd C = X.rowwise() - mu.transpose();
    cov = C.transpose() * C / (n - 1);
    cov += 1e-6 * Eigen::MatrixXd::Identity(d, d);
}

}  // namespace

double frechet_distance(std::span<const Tensor> feat_a, std::span<const Tensor> feat_b) {
    if (feat_a.size() < 2 || feat_b.size() < 2) throw ParameterError("frechet_distance: need >= 2 samples per side");
    if (feat_a.front().size() != feat_b.front().size()) throw ShapeError("frechet_distance: feature dims differ");
    Eigen::VectorXd ma, mb;
    Eigen::MatrixXd ca, cb;
    moments(feat_a, ma, ca);
    moments(feat_b, mb, cb);
    // tr((Ca Cb)^1/2) = tr((Ca^1/2 Cb Ca^1/2)^1/2); the inner product is
    // symmetric PSD, so both roots come from symmetric eigendecompositions.
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(ca);
    const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd ra = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
    Eigen::MatrixXd inner = ra * cb * ra;
    inner = 0.5 * (inner + inner.transpose());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
    const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double fd = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    return std::max(fd, 0.0);
}

double psnr(const ImageTensor& a, const ImageTensor& b) {
    if (a.tensor().shape() != b.tensor().shape()) throw ShapeError("psnr: image shapes differ");
    const double mse = sum_sq(a.tensor() - b.tensor()) / static_cast<double>(a.tensor().size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(1.0 / std::sqrt(mse));
}

std::string MetricReport::to_text() const {
    KeyValueText kv;
    kv.set("experiment", experiment);
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
    kv.set("seeds", s);
    for (const auto& [k, v] : counts) kv.set("count." + k, static_cast<long long>(v));
    for (const auto& [k, v] : metrics) {
        if (std::isnan(v)) throw ParameterError("metric " + k + " is NaN");
        kv.set("metric." + k, std::isinf(v) ? (v > 0 ? "inf" : "-inf") : format_double(v));
    }
    return "# dladiff metric report v1\n" + kv.str();
}

MetricReport MetricReport::from_text(const std::string& text) {
    const KeyValueText kv = KeyValueText::parse(text);
    MetricReport r;
    r.experiment = kv.get("experiment");
    std::istringstream ss(kv.get("seeds"));
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) r.seeds.push_back(std::stoull(tok));
    for (const auto& [k, v] : kv.entries()) {
        if (k.starts_with("metric.")) r.metrics[k.substr(7)] = kv.get_double(k);
        else if (k.starts_with("count.")) r.counts[k.substr(6)] = std::stoll(v);
        else if (k != "experiment" && k != "seeds") throw FormatError("unknown report key: " + k);
    }
    return r;
}

void MetricReport::save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << to_text();
}

MetricReport MetricReport::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str());
}

std::string MetricReport::to_csv() const {
    std::string out = "experiment,metric,value\n";
    for (const auto& [k, v] : metrics) {
        const std::string val = std::isinf(v) ? (v > 0 ? "inf" : "-inf") : format_double(v);
        out += experiment + "," + k + "," + val + "\n";
    }
    for (const auto& [k, v] : counts) out += experiment + ",count." + k + "," + std::to_string(v) + "\n";
    return out;
}

}  // namespace dladiff
