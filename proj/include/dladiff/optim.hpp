#pragma once

#include <map>
#include <string>

#include "dladiff/tensor.hpp"

namespace dladiff {

/// Adam over a named parameter map. Moments are created lazily per name.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;

    /// One update of every parameter that has an entry in `grads`.
    void update(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads);
};

}  // namespace dladiff
