#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dladiff {

/// Raised when tensor shapes are incompatible with an operation.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised for out-of-range or otherwise invalid parameters.
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

/// Dense row-major array of doubles. The last dimension is the "channel"
/// (column) axis; everything before it is flattened into rows for the 2-D
/// kernels in the autodiff layer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    const Shape& shape() const noexcept { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t ndim() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    int cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    int rows() const noexcept { return cols() == 0 ? 0 : static_cast<int>(data_.size()) / cols(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

    /// Same data, new shape; element count must match.
    Tensor reshaped(Shape s) const;
    void reshape(Shape s);

    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

    Tensor& operator+=(const Tensor& o);
    Tensor& operator-=(const Tensor& o);
    Tensor& operator*=(double s);

    static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
    static Tensor randn(Shape s, std::mt19937_64& rng, double stddev = 1.0);
    static Tensor uniform(Shape s, std::mt19937_64& rng, double lo, double hi);

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

std::size_t shape_numel(const Shape& s);

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

double dot(const Tensor& a, const Tensor& b);
double sum_sq(const Tensor& a);
double max_abs(const Tensor& a);
bool all_finite(const Tensor& a);

}  // namespace dladiff
