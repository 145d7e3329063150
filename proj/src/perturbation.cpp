#include "dladiff/perturbation.hpp"

#include <algorithm>
#include <cmath>

namespace dladiff {

std::string to_string(GradientMode m) { return m == GradientMode::raw ? "raw" : "sign"; }

GradientMode gradient_mode_from_string(const std::string& s) {
    if (s == "raw") return GradientMode::raw;
    if (s == "sign") return GradientMode::sign;
    throw ParameterError("unknown gradient mode: " + s);
}

std::string to_string(PerturbationLayer l) { return l == PerturbationLayer::ft ? "ft" : "zs"; }

static void check_eta(double eta) {
    if (!(eta > 0.0 && eta < 1.0)) throw ParameterError("perturbation bound must lie in (0,1)");
}

Perturbation::Perturbation(Shape shape, double eta, PerturbationLayer layer)
    : delta_(std::move(shape)), eta_(eta), layer_(layer) {
    check_eta(eta);
}

Perturbation::Perturbation(Tensor delta, double eta, PerturbationLayer layer)
    : delta_(std::move(delta)), eta_(eta), layer_(layer) {
    check_eta(eta);
    if (!all_finite(delta_) || max_abs(delta_) > eta_) throw ParameterError("perturbation exceeds its bound");
}

ImageTensor Perturbation::apply(const ImageTensor& x) const { return x.plus(delta_); }

PgdStep pgd_step(const Perturbation& delta, const Tensor& grad, double sigma, GradientMode mode) {
    if (!grad.same_shape(delta.delta()))
        throw ShapeError("pgd_step: grad " + shape_str(grad.shape()) + " vs delta " + shape_str(delta.delta().shape()));
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ParameterError("pgd_step: sigma must be finite and >= 0");
    if (!all_finite(grad)) return {delta, false};
    Tensor d = delta.delta();
    const double eta = delta.eta();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double g = grad[i];
        const double step = mode == GradientMode::raw ? g : static_cast<double>((g > 0) - (g < 0));
        d[i] = std::clamp(d[i] + sigma * step, -eta, eta);
    }
    return {Perturbation(std::move(d), eta, delta.layer()), true};
}

}  // namespace dladiff
