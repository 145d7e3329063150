#include "dladiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dladiff {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative dimension in " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
        throw ShapeError("data size " + std::to_string(data_.size()) + " does not match " + shape_str(shape_));
}

Tensor Tensor::reshaped(Shape s) const {
    Tensor t = *this;
    t.reshape(std::move(s));
    return t;
}

void Tensor::reshape(Shape s) {
    if (shape_numel(s) != data_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    shape_ = std::move(s);
}

Tensor& Tensor::operator+=(const Tensor& o) {
    if (o.size() != size()) throw ShapeError("+= " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& o) {
    if (o.size() != size()) throw ShapeError("-= " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

Tensor Tensor::randn(Shape s, std::mt19937_64& rng, double stddev) {
    Tensor t(std::move(s));
    std::normal_distribution<double> nd(0.0, stddev);
    for (double& v : t.data_) v = nd(rng);
    return t;
}

Tensor Tensor::uniform(Shape s, std::mt19937_64& rng, double lo, double hi) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> ud(lo, hi);
    for (double& v : t.data_) v = ud(rng);
    return t;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ShapeError("dot " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double sum_sq(const Tensor& a) { return dot(a, a); }

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

bool all_finite(const Tensor& a) {
    return std::all_of(a.values().begin(), a.values().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace dladiff
