#pragma once

#include <string>

#include "dladiff/image.hpp"
#include "dladiff/tensor.hpp"

namespace dladiff {

enum class GradientMode { raw, sign };
std::string to_string(GradientMode m);
GradientMode gradient_mode_from_string(const std::string& s);

/// Which defense layer produced a perturbation.
enum class PerturbationLayer { ft, zs };
std::string to_string(PerturbationLayer l);

/// Additive delta with an L-infinity bound that holds after every update.
class Perturbation {
public:
    Perturbation() = default;
    /// Zero delta of the given shape.
    Perturbation(Shape shape, double eta, PerturbationLayer layer);
    /// Throws ParameterError if |delta| exceeds eta anywhere.
    Perturbation(Tensor delta, double eta, PerturbationLayer layer);

    const Tensor& delta() const { return delta_; }
    double eta() const { return eta_; }
    PerturbationLayer layer() const { return layer_; }
    double linf() const { return max_abs(delta_); }

    /// x + delta, clamped to [0,1].
    ImageTensor apply(const ImageTensor& x) const;

private:
    Tensor delta_;
    double eta_ = 0.0;
    PerturbationLayer layer_ = PerturbationLayer::ft;
};

struct PgdStep {
    Perturbation delta;
    bool accepted = true;  // false when grad had non-finite entries
};

/// clip(delta + sigma * g, -eta, eta) with g = grad (raw) or sign(grad).
/// A non-finite grad leaves delta unchanged and reports accepted = false.
PgdStep pgd_step(const Perturbation& delta, const Tensor& grad, double sigma, GradientMode mode);

}  // namespace dladiff
