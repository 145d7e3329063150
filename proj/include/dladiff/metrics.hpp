#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dladiff/identity.hpp"

namespace dladiff {

/// Mean cosine similarity of each candidate embedding to the re-normalised
/// mean of the reference embeddings.
double ism(std::span<const IdentityEmbedding> candidates, std::span<const IdentityEmbedding> references);
/// Same, on aligned 112 crops through `encoder`.
double ism(std::span<const ImageTensor> candidate_crops, std::span<const ImageTensor> reference_crops,
           const EncoderWeights& encoder);

/// Frechet distance between Gaussian fits of two feature sets (rows are
/// samples); covariances get +1e-6 I. Needs at least two samples per side.
double frechet_distance(std::span<const Tensor> feat_a, std::span<const Tensor> feat_b);

/// Peak signal-to-noise ratio on the [0,1] scale; +inf for identical images.
double psnr(const ImageTensor& a, const ImageTensor& b);

/// Key/value experiment record. Scalars are finite except psnr-style
/// sentinels (+inf), which serialise as "inf".
struct MetricReport {
    std::string experiment;
    std::map<std::string, double> metrics;
    std::map<std::string, long long> counts;
    std::vector<std::uint64_t> seeds;

    std::string to_text() const;
    static MetricReport from_text(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static MetricReport load(const std::filesystem::path& path);
    /// metric,value rows.
    std::string to_csv() const;

    friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

}  // namespace dladiff
