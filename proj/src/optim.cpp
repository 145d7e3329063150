#include "dladiff/optim.hpp"

#include <cmath>

namespace dladiff {

void Adam::update(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads) {
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw ParameterError("adam: no parameter named " + name);
        Tensor& p = it->second;
        if (!g.same_shape(p)) throw ShapeError("adam: gradient shape mismatch for " + name);
        auto [mi, fresh_m] = m.try_emplace(name, Tensor::zeros(p.shape()));
        auto [vi, fresh_v] = v.try_emplace(name, Tensor::zeros(p.shape()));
        Tensor& mt = mi->second;
        Tensor& vt = vi->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            mt[i] = beta1 * mt[i] + (1.0 - beta1) * g[i];
            vt[i] = beta2 * vt[i] + (1.0 - beta2) * g[i] * g[i];
            p[i] -= lr * (mt[i] / c1) / (std::sqrt(vt[i] / c2) + eps);
        }
    }
}

}  // namespace dladiff
