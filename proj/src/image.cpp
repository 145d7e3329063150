#include "dladiff/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace dladiff {

ImageTensor::ImageTensor(Tensor hwc) : data_(std::move(hwc)) {
    if (data_.ndim() != 3) throw ShapeError("ImageTensor needs [h,w,c], got " + shape_str(data_.shape()));
    for (double& v : data_.values()) {
        if (!std::isfinite(v)) throw ParameterError("ImageTensor: non-finite pixel value");
        v = std::clamp(v, 0.0, 1.0);
    }
}

ImageTensor::ImageTensor(int h, int w, int c, double fill) : ImageTensor(Tensor({h, w, c}, fill)) {}

ImageTensor ImageTensor::plus(const Tensor& delta) const {
    if (delta.size() != data_.size())
        throw ShapeError("ImageTensor::plus " + shape_str(data_.shape()) + " vs " + shape_str(delta.shape()));
    Tensor t = data_;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += delta[i];
    return ImageTensor(std::move(t));
}

unsigned char to_byte(double v) {
    const double s = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
    return static_cast<unsigned char>(std::clamp(s, 0.0, 255.0));
}

ImageTensor ImageTensor::quantized() const {
    Tensor t = data_;
    for (double& v : t.values()) v = to_byte(v) / 255.0;
    return ImageTensor(std::move(t));
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const ImageTensor& img) {
    const int c = img.channels();
    if (c != 1 && c != 3) throw ShapeError("write_png supports 1 or 3 channels");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng write failure: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width(), img.height(), 8, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width()) * c);
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x)
            for (int k = 0; k < c; ++k) row[static_cast<std::size_t>(x) * c + k] = to_byte(img.at(y, x, k));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageTensor read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng read failure: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = png_get_channels(png, info);
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * c);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * c;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    Tensor t({h, w, c});
    for (std::size_t i = 0; i < buf.size(); ++i) t[i] = buf[i] / 255.0;
    return ImageTensor(std::move(t));
}

}  // namespace dladiff
