#pragma once

// Finite-difference gradient oracle. Central differences with step h on every
// element of every listed leaf, compared against reverse-mode gradients from
// one backward pass. Error metric is |ad - fd| / max(1, |fd|), reported as the
// max over all elements.

#include <cmath>
#include <functional>
#include <vector>

#include "cmtmae/tensor.hpp"

namespace fd {

struct Report {
    double max_rel_err = 0.0;
    double worst_ad = 0.0;
    double worst_fd = 0.0;
    long checked = 0;
};

inline Report check_gradients(const std::function<cmtmae::Tensor()>& forward,
                              std::vector<cmtmae::Tensor> leaves, double h = 1e-6) {
    using cmtmae::Tensor;

    Tensor loss = forward();
    cmtmae::backward(loss);

    std::vector<std::vector<double>> ad_grads;
    ad_grads.reserve(leaves.size());
    for (Tensor& leaf : leaves)
        ad_grads.push_back(leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.numel(), 0.0));

    Report rep;
    for (size_t l = 0; l < leaves.size(); ++l) {
        auto& vals = leaves[l].values_mut();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + h;
            const double up = forward().item();
            vals[i] = saved - h;
            const double down = forward().item();
            vals[i] = saved;
            const double fd_grad = (up - down) / (2.0 * h);
            const double ad_grad = ad_grads[l][i];
            const double err = std::fabs(ad_grad - fd_grad) / std::max(1.0, std::fabs(fd_grad));
            ++rep.checked;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_ad = ad_grad;
                rep.worst_fd = fd_grad;
            }
        }
    }
    for (Tensor& leaf : leaves) leaf.zero_grad();
    return rep;
}

}  // namespace fd
