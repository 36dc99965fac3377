#pragma once

#include "avattr/nn.hpp"

namespace avattr {

// single-cycle cosine annealing from base to zero over total_epochs
inline double cosine_lr(double base_lr, int64_t epoch, int64_t total_epochs) {
    return 0.5 * base_lr * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
}

// Scales all gradients by clip_norm/norm when the global l2 norm exceeds
// clip_norm. Returns the pre-clip norm.
template <class S>
S clip_gradients(std::vector<Var<S>>& params, S clip_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        const Tensor<S>& g = p.grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            double v = static_cast<double>(g[i]);
            if (!std::isfinite(v)) throw std::runtime_error("clip_gradients: non-finite gradient");
            sq += v * v;
        }
    }
    S norm = static_cast<S>(std::sqrt(sq));
    if (norm > clip_norm) {
        S scale = clip_norm / norm;
        for (auto& p : params) {
            Tensor<S>& g = p.grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
        }
    }
    return norm;
}

template <class S>
S global_grad_norm(std::vector<Var<S>>& params) {
    double sq = 0.0;
    for (auto& p : params) {
        const Tensor<S>& g = p.grad();
        for (int64_t i = 0; i < g.numel(); ++i) sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
    }
    return static_cast<S>(std::sqrt(sq));
}

// Adam with decoupled weight decay: the decay term is applied directly to
// the parameter, independent of the adaptive update, so a parameter with a
// zero gradient still shrinks by lr*wd*value each step.
template <class S>
class AdamW {
public:
    AdamW() = default;
    AdamW(int64_t num_params, S weight_decay, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
        : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps), m_(num_params), v_(num_params) {}

    void step(std::vector<Var<S>>& params, S lr) {
        if (params.size() != m_.size()) throw std::logic_error("AdamW: parameter count mismatch");
        ++t_;
        S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
        S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
        for (size_t k = 0; k < params.size(); ++k) {
            Tensor<S>& w = params[k].val();
            Tensor<S>& g = params[k].grad();
            if (m_[k].numel() == 0) {
                m_[k] = Tensor<S>::zeros(w.shape);
                v_[k] = Tensor<S>::zeros(w.shape);
            }
            for (int64_t i = 0; i < w.numel(); ++i) {
                S gi = g[i];
                m_[k][i] = beta1_ * m_[k][i] + (S(1) - beta1_) * gi;
                v_[k][i] = beta2_ * v_[k][i] + (S(1) - beta2_) * gi * gi;
                S mhat = m_[k][i] / bc1;
                S vhat = v_[k][i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_));
                w[i] -= lr * wd_ * w[i];
            }
        }
    }

    void zero_grad(std::vector<Var<S>>& params) {
        for (auto& p : params) p.zero_grad();
    }

    int64_t steps() const { return t_; }
    void set_steps(int64_t t) { t_ = t; }
    std::vector<Tensor<S>>& first_moments() { return m_; }
    std::vector<Tensor<S>>& second_moments() { return v_; }
    S weight_decay() const { return wd_; }

private:
    S wd_ = S(0), beta1_ = S(0.9), beta2_ = S(0.999), eps_ = S(1e-8);
    int64_t t_ = 0;
    std::vector<Tensor<S>> m_, v_;
};

}  // namespace avattr
