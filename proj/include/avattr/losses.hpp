#pragma once

#include "avattr/autograd.hpp"

namespace avattr {

// probabilities are clamped away from {0,1} before any log
inline constexpr double kProbEps = 1e-7;

template <class S>
struct LossWeights {
    S lambda_attr = S(0.3);
    S lambda_cont = S(0.1);
    S lambda_fp = S(0.2);
    S lambda_cen = S(0.05);
    S alpha = S(0.75);
    S gamma = S(2.0);
    S tau = S(0.07);
    S centroid_momentum = S(0.9);
    bool alpha_on_fake = true;       // alpha weights the fake class; invertible
    bool cont_exclude_fakes = false; // restrict L_cont to real samples
    bool defer_centroid_loss = false;  // skip L_cen for classes never yet seen

    void validate() const {
        if (!(tau > S(0))) throw std::invalid_argument("LossWeights: tau must be > 0");
        if (!(centroid_momentum >= S(0) && centroid_momentum < S(1)))
            throw std::invalid_argument("LossWeights: momentum must be in [0,1)");
        if (!(gamma >= S(0))) throw std::invalid_argument("LossWeights: gamma must be >= 0");
        if (!(alpha > S(0) && alpha < S(1))) throw std::invalid_argument("LossWeights: alpha must be in (0,1)");
        if (lambda_attr < S(0) || lambda_cont < S(0) || lambda_fp < S(0) || lambda_cen < S(0))
            throw std::invalid_argument("LossWeights: loss weights must be nonnegative");
    }
};

template <class S>
struct LossBreakdown {
    S det = 0, attr = 0, cont = 0, fp = 0, cen = 0, total = 0;
};

template <class S>
struct LossBundle {
    Var<S> det, attr, cont, fp, cen, total;
    int fp_groups = 0;  // eligible generator groups that contributed to fp

    LossBreakdown<S> values() const {
        return {det.item(), attr.item(), cont.item(), fp.item(), cen.item(), total.item()};
    }
};

namespace detail {
template <class S>
Var<S> zero_scalar() {
    return constant(Tensor<S>({1}, std::vector<S>{S(0)}));
}
}  // namespace detail

// mean of -alpha_t (1-p_t)^gamma log(p_t) over the batch
template <class S>
Var<S> focal_loss(const Var<S>& detect_prob, const std::vector<int>& y, S alpha, S gamma,
                  bool alpha_on_fake = true) {
    int64_t B = static_cast<int64_t>(y.size());
    if (detect_prob.val().numel() != B) throw std::invalid_argument("focal_loss: batch size mismatch");
    Var<S> p = clamp(detect_prob, static_cast<S>(kProbEps), S(1) - static_cast<S>(kProbEps));

    Tensor<S> m_fake(p.val().shape), m_real(p.val().shape), alpha_t(p.val().shape);
    S a_fake = alpha_on_fake ? alpha : S(1) - alpha;
    for (int64_t i = 0; i < B; ++i) {
        m_fake[i] = y[static_cast<size_t>(i)] == 1 ? S(1) : S(0);
        m_real[i] = S(1) - m_fake[i];
        alpha_t[i] = y[static_cast<size_t>(i)] == 1 ? a_fake : S(1) - a_fake;
    }
    Var<S> pt = add(mul(p, constant(std::move(m_fake))), mul(rsub_scalar(S(1), p), constant(std::move(m_real))));
    Var<S> term = mul(mul(pow_const(rsub_scalar(S(1), pt), gamma), log_op(pt)), constant(std::move(alpha_t)));
    return mul_scalar(mean_all(term), S(-1));
}

// mean negative log-probability of the true class; takes probabilities
template <class S>
Var<S> attribution_ce(const Var<S>& attr_probs, const std::vector<int>& g) {
    int64_t B = attr_probs.val().dim(0);
    if (static_cast<int64_t>(g.size()) != B) throw std::invalid_argument("attribution_ce: batch size mismatch");
    std::vector<int64_t> rows(g.size()), cols(g.size());
    for (size_t i = 0; i < g.size(); ++i) {
        if (g[i] < 0 || g[i] >= attr_probs.val().dim(1))
            throw std::invalid_argument("attribution_ce: label out of range");
        rows[i] = static_cast<int64_t>(i);
        cols[i] = g[i];
    }
    Var<S> p = clamp(attr_probs, static_cast<S>(kProbEps), S(1) - static_cast<S>(kProbEps));
    return mul_scalar(mean_all(log_op(take_rc(p, std::move(rows), std::move(cols)))), S(-1));
}

// Symmetric InfoNCE over matched rows of two unit-normalized projection
// matrices. A single-sample batch has only its positive candidate, so the
// loss is identically zero there.
template <class S>
Var<S> info_nce(const Var<S>& p_v, const Var<S>& p_a, S tau) {
    if (p_v.val().shape != p_a.val().shape) throw std::invalid_argument("info_nce: shape mismatch");
    int64_t B = p_v.val().dim(0);
    if (B == 0) throw std::invalid_argument("info_nce: empty batch");
    if (B == 1) return detail::zero_scalar<S>();
    std::vector<int64_t> diag(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) diag[static_cast<size_t>(i)] = i;

    Var<S> sims = mul_scalar(matmul_nt(p_v, p_a), S(1) / tau);
    Var<S> l_va = mean_all(sub(logsumexp_rows(sims), take_rc(sims, diag, diag)));
    Var<S> sims_t = transpose(sims);
    Var<S> l_av = mean_all(sub(logsumexp_rows(sims_t), take_rc(sims_t, diag, diag)));
    return mul_scalar(add(l_va, l_av), S(0.5));
}

// Within-generator cross-modal consistency: info_nce restricted to each
// fake generator group with at least two samples, averaged over the groups
// actually computed. Real samples never participate.
template <class S>
Var<S> cmffc_loss(const Var<S>& p_v, const Var<S>& p_a, const std::vector<int>& g, S tau,
                  int* groups_used = nullptr) {
    if (p_v.val().dim(0) != static_cast<int64_t>(g.size()))
        throw std::invalid_argument("cmffc_loss: batch size mismatch");
    std::map<int, std::vector<int64_t>> groups;
    for (size_t i = 0; i < g.size(); ++i)
        if (g[i] >= 1) groups[g[i]].push_back(static_cast<int64_t>(i));

    Var<S> acc;
    int used = 0;
    for (const auto& [cls, idx] : groups) {
        if (idx.size() < 2) continue;
        Var<S> term = info_nce(gather_rows(p_v, idx), gather_rows(p_a, idx), tau);
        acc = used == 0 ? term : add(acc, term);
        ++used;
    }
    if (groups_used) *groups_used = used;
    if (used == 0) return detail::zero_scalar<S>();
    return mul_scalar(acc, S(1) / static_cast<S>(used));
}

// EMA prototype table over fused embeddings, one row per class (0 = real)
template <class S>
class CentroidTable {
public:
    CentroidTable() = default;
    CentroidTable(int64_t num_classes, int64_t dim)
        : C_(Tensor<S>({num_classes, dim})), updated_(static_cast<size_t>(num_classes), 0) {}

    int64_t num_classes() const { return C_.dim(0); }
    int64_t dim() const { return C_.dim(1); }
    const Tensor<S>& table() const { return C_; }
    Tensor<S>& table() { return C_; }
    bool updated(int64_t cls) const { return updated_[static_cast<size_t>(cls)] != 0; }
    std::vector<uint8_t>& flags() { return updated_; }
    const std::vector<uint8_t>& flags() const { return updated_; }

    // C[k] <- m C[k] + (1-m) mean(z_f rows of class k); absent classes untouched
    void update(const Tensor<S>& z_f, const std::vector<int>& g, S momentum) {
        if (z_f.dim(1) != dim()) throw std::invalid_argument("CentroidTable::update: dim mismatch");
        std::map<int, std::vector<int64_t>> groups;
        for (size_t i = 0; i < g.size(); ++i) {
            if (g[i] < 0 || g[i] >= num_classes())
                throw std::invalid_argument("CentroidTable::update: label out of range");
            groups[g[i]].push_back(static_cast<int64_t>(i));
        }
        int64_t d = dim();
        for (const auto& [cls, idx] : groups) {
            std::vector<S> mean(static_cast<size_t>(d), S(0));
            for (int64_t r : idx)
                for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += z_f.at(r, j);
            S inv = S(1) / static_cast<S>(idx.size());
            for (int64_t j = 0; j < d; ++j) {
                S& c = C_.at(cls, j);
                c = momentum * c + (S(1) - momentum) * mean[static_cast<size_t>(j)] * inv;
            }
            updated_[static_cast<size_t>(cls)] = 1;
        }
    }

private:
    Tensor<S> C_;
    std::vector<uint8_t> updated_;
};

// mean squared distance to the (gradient-stopped) class centroid
template <class S>
Var<S> centroid_loss(const Var<S>& z_f, const std::vector<int>& g, const CentroidTable<S>& table,
                     bool defer_until_updated = false) {
    int64_t B = z_f.val().dim(0), d = z_f.val().dim(1);
    if (static_cast<int64_t>(g.size()) != B) throw std::invalid_argument("centroid_loss: batch size mismatch");
    if (d != table.dim()) throw std::invalid_argument("centroid_loss: dim mismatch");

    std::vector<int64_t> rows;
    for (size_t i = 0; i < g.size(); ++i)
        if (!defer_until_updated || table.updated(g[i])) rows.push_back(static_cast<int64_t>(i));
    if (rows.empty()) return detail::zero_scalar<S>();

    Tensor<S> targets({static_cast<int64_t>(rows.size()), d});
    for (size_t k = 0; k < rows.size(); ++k)
        for (int64_t j = 0; j < d; ++j)
            targets.at(static_cast<int64_t>(k), j) = table.table().at(g[static_cast<size_t>(rows[k])], j);

    Var<S> z = rows.size() == static_cast<size_t>(B) ? z_f : gather_rows(z_f, rows);
    Var<S> diff = sub(z, constant(std::move(targets)));
    return mul_scalar(sum_all(mul(diff, diff)), S(1) / static_cast<S>(rows.size()));
}

// weighted combination; throws if any component is non-finite
template <class S>
LossBundle<S> total_loss(Var<S> det, Var<S> attr, Var<S> cont, Var<S> fp, Var<S> cen,
                         const LossWeights<S>& w, int fp_groups = 0) {
    const char* names[] = {"det", "attr", "cont", "fp", "cen"};
    const Var<S>* comps[] = {&det, &attr, &cont, &fp, &cen};
    for (int i = 0; i < 5; ++i)
        if (!std::isfinite(static_cast<double>(comps[i]->item())))
            throw std::runtime_error(std::string("total_loss: non-finite component ") + names[i]);

    LossBundle<S> out;
    out.det = det;
    out.attr = attr;
    out.cont = cont;
    out.fp = fp;
    out.cen = cen;
    out.fp_groups = fp_groups;
    out.total = add(det, add(mul_scalar(attr, w.lambda_attr),
                             add(mul_scalar(cont, w.lambda_cont),
                                 add(mul_scalar(fp, w.lambda_fp), mul_scalar(cen, w.lambda_cen)))));
    return out;
}

}  // namespace avattr
