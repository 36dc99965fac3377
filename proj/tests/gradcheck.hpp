#pragma once

#include <functional>

#include "avattr/autograd.hpp"

// Central finite-difference verification of analytic gradients, run in
// float64. `fn` rebuilds the graph from the leaf inputs on every call so
// perturbed evaluations are independent.
namespace gradcheck {

using avattr::Tensor;
using avattr::Var;

struct Result {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

inline Result check(const std::function<Var<double>(std::vector<Var<double>>&)>& fn,
                    std::vector<Tensor<double>> inputs, double step = 1e-5) {
    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        std::vector<Var<double>> vars;
        vars.reserve(xs.size());
        for (const auto& x : xs) vars.emplace_back(x, true);
        avattr::NoGrad ng;
        std::vector<Var<double>> leaf = vars;
        // grads disabled: just the value
        return fn(leaf).item();
    };

    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& x : inputs) vars.emplace_back(x, true);
    std::vector<Var<double>> leaf = vars;
    Var<double> out = fn(leaf);
    // a constant output (e.g. a loss with no eligible terms) has zero
    // gradient everywhere; the lazily allocated grads are already zero
    if (out.requires_grad()) avattr::backward(out);

    Result res;
    for (size_t k = 0; k < inputs.size(); ++k) {
        for (int64_t i = 0; i < inputs[k].numel(); ++i) {
            auto plus = inputs;
            auto minus = inputs;
            plus[k][i] += step;
            minus[k][i] -= step;
            double num = (eval(plus) - eval(minus)) / (2.0 * step);
            double ana = vars[k].grad()[i];
            double err = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            res.max_rel_err = std::max(res.max_rel_err, err);
            ++res.checked;
        }
    }
    return res;
}

inline Tensor<double> random_tensor(avattr::Rng& rng, avattr::Shape shape, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

}  // namespace gradcheck
