#pragma once

#include <array>
#include <filesystem>
#include <string>

#include "dladiff/tensor.hpp"

namespace dladiff {

/// H x W x C image with finite values in [0,1]. Values are clamped (and
/// non-finite input rejected) on construction.
class ImageTensor {
public:
    ImageTensor() = default;
    explicit ImageTensor(Tensor hwc);
    ImageTensor(int h, int w, int c, double fill = 0.0);

    int height() const { return data_.dim(0); }
    int width() const { return data_.dim(1); }
    int channels() const { return data_.dim(2); }
    const Tensor& tensor() const { return data_; }
    double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

    /// x + delta clamped to [0,1].
    ImageTensor plus(const Tensor& delta) const;

    /// Round-half-up to the 8-bit grid, as a PNG write/read round trip would.
    ImageTensor quantized() const;

    friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

private:
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width() + x) * channels() + c;
    }
    Tensor data_;
};

/// 8-bit value for a [0,1] sample: floor(255*v + 0.5).
unsigned char to_byte(double v);

/// Writes an 8-bit RGB (C=3) or gray (C=1) PNG.
void write_png(const std::filesystem::path& path, const ImageTensor& img);
/// Reads an 8-bit PNG into [0,1] (value / 255). Alpha is dropped.
ImageTensor read_png(const std::filesystem::path& path);

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

/// Five facial landmarks: left eye, right eye, nose tip, left and right mouth
/// corners, in pixel coordinates (pixel (i,j) is centred at (j+0.5, i+0.5)).
using Landmarks = std::array<Point2, 5>;

}  // namespace dladiff
