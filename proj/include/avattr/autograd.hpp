#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>

#include "avattr/rng.hpp"
#include "avattr/tensor.hpp"

namespace avattr {

// Reverse-mode autodiff over Tensor<S>. Each op builds a Node holding the
// output value plus a closure that scatters the output gradient into the
// parents. Graphs are built per forward pass and freed when the Vars go
// out of scope; parameters are leaf nodes that persist across steps.

template <class S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward;

    void ensure_grad() {
        if (grad.numel() == 0) grad = Tensor<S>::zeros(value.shape);
    }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

struct NoGrad {
    NoGrad() { ++detail::no_grad_depth; }
    ~NoGrad() { --detail::no_grad_depth; }
    NoGrad(const NoGrad&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class S>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<S> v, bool requires_grad = false) : n_(std::make_shared<Node<S>>()) {
        n_->value = std::move(v);
        n_->requires_grad = requires_grad;
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor<S>& val() const { return n_->value; }
    Tensor<S>& val() { return n_->value; }
    Tensor<S>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void zero_grad() {
        if (n_ && n_->grad.numel() > 0) n_->grad.fill(S(0));
    }
    std::shared_ptr<Node<S>> node() const { return n_; }

    const Shape& shape() const { return n_->value.shape; }
    S item() const {
        if (n_->value.numel() != 1) throw std::logic_error("Var::item on non-scalar " + shape_str(shape()));
        return n_->value.data[0];
    }

private:
    std::shared_ptr<Node<S>> n_;
};

template <class S>
Var<S> constant(Tensor<S> v) {
    return Var<S>(std::move(v), false);
}

template <class S>
Var<S> make_op(Tensor<S> out, std::vector<Var<S>> parents, std::function<void(Node<S>&)> bw) {
    bool need = grad_enabled() &&
                std::any_of(parents.begin(), parents.end(), [](const Var<S>& p) { return p.requires_grad(); });
    Var<S> r(std::move(out), need);
    if (need) {
        auto n = r.node();
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(bw);
    }
    return r;
}

template <class S>
void backward(const Var<S>& root) {
    if (!root.requires_grad()) throw std::logic_error("backward: root does not require grad");
    if (root.val().numel() != 1) throw std::logic_error("backward: root must be scalar");

    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<S>* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad();
    root.node()->grad.data[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------- helpers

namespace detail {

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<EMat<S>>;
template <class S>
using CMapM = Eigen::Map<const EMat<S>>;

template <class S>
MapM<S> as_mat(Tensor<S>& t, int64_t rows, int64_t cols) {
    return MapM<S>(t.ptr(), rows, cols);
}
template <class S>
CMapM<S> as_mat(const Tensor<S>& t, int64_t rows, int64_t cols) {
    return CMapM<S>(t.ptr(), rows, cols);
}

template <class S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.val().shape != b.val().shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.val().shape) + " vs " +
                                    shape_str(b.val().shape));
}

}  // namespace detail

// ------------------------------------------------------------ elementwise

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<S> out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.val()[i];
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {a, b}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i];
        }
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<S> out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {a, b}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<S> out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {a, b}, [pa, pb](Node<S>& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
        }
    });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S c) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v += c;
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
    });
}

template <class S>
Var<S> mul_scalar(const Var<S>& a, S c) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v *= c;
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa, c](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * c;
    });
}

// c - a, elementwise
template <class S>
Var<S> rsub_scalar(S c, const Var<S>& a) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v = c - v;
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] -= self.grad[i];
    });
}

template <class S>
Var<S> neg(const Var<S>& a) {
    return mul_scalar(a, S(-1));
}

template <class S>
Var<S> relu(const Var<S>& a) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v = v > S(0) ? v : S(0);
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            if (pa->value[i] > S(0)) pa->grad[i] += self.grad[i];
    });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) {
        if (v >= S(0)) {
            v = S(1) / (S(1) + std::exp(-v));
        } else {
            S e = std::exp(v);
            v = e / (S(1) + e);
        }
    }
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            S y = self.value[i];
            pa->grad[i] += self.grad[i] * y * (S(1) - y);
        }
    });
}

template <class S>
Var<S> exp_op(const Var<S>& a) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v = std::exp(v);
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * self.value[i];
    });
}

template <class S>
Var<S> log_op(const Var<S>& a) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v = std::log(v);
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] / pa->value[i];
    });
}

template <class S>
Var<S> sqrt_op(const Var<S>& a) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v = std::sqrt(v);
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] / (S(2) * self.value[i]);
    });
}

template <class S>
Var<S> pow_const(const Var<S>& a, S e) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v = std::pow(v, e);
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa, e](Node<S>& self) {
        pa->ensure_grad();
        if (e == S(0)) return;  // derivative is identically zero
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            pa->grad[i] += self.grad[i] * e * std::pow(pa->value[i], e - S(1));
    });
}

// gradient passes only through the un-clamped interior
template <class S>
Var<S> clamp(const Var<S>& a, S lo, S hi) {
    Tensor<S> out = a.val();
    for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa, lo, hi](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            if (pa->value[i] > lo && pa->value[i] < hi) pa->grad[i] += self.grad[i];
    });
}

// ------------------------------------------------------------- linear ops

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    int64_t n = a.val().dim(0), k = a.val().dim(1), m = b.val().dim(1);
    if (b.val().dim(0) != k)
        throw std::invalid_argument("matmul: inner dim mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<S> out({n, m});
    detail::as_mat(out, n, m).noalias() = detail::as_mat(a.val(), n, k) * detail::as_mat(b.val(), k, m);
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {a, b}, [pa, pb, n, k, m](Node<S>& self) {
        auto dy = detail::as_mat(self.grad, n, m);
        if (pa->requires_grad) {
            pa->ensure_grad();
            detail::as_mat(pa->grad, n, k).noalias() += dy * detail::as_mat(pb->value, k, m).transpose();
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            detail::as_mat(pb->grad, k, m).noalias() += detail::as_mat(pa->value, n, k).transpose() * dy;
        }
    });
}

// A [n,k] * B^T where B is [m,k]
template <class S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
    int64_t n = a.val().dim(0), k = a.val().dim(1), m = b.val().dim(0);
    if (b.val().dim(1) != k)
        throw std::invalid_argument("matmul_nt: inner dim mismatch " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    Tensor<S> out({n, m});
    detail::as_mat(out, n, m).noalias() = detail::as_mat(a.val(), n, k) * detail::as_mat(b.val(), m, k).transpose();
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {a, b}, [pa, pb, n, k, m](Node<S>& self) {
        auto dy = detail::as_mat(self.grad, n, m);
        if (pa->requires_grad) {
            pa->ensure_grad();
            detail::as_mat(pa->grad, n, k).noalias() += dy * detail::as_mat(pb->value, m, k);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            detail::as_mat(pb->grad, m, k).noalias() += dy.transpose() * detail::as_mat(pa->value, n, k);
        }
    });
}

template <class S>
Var<S> transpose(const Var<S>& a) {
    int64_t n = a.val().dim(0), m = a.val().dim(1);
    Tensor<S> out({m, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) out.at(j, i) = a.val().at(i, j);
    auto pa = a.node();
    return make_op<S>(std::move(out), {a}, [pa, n, m](Node<S>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) pa->grad.at(i, j) += self.grad.at(j, i);
    });
}

// X [n,m] + row vector b [m]
template <class S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& b) {
    int64_t n = x.val().dim(0), m = x.val().dim(1);
    if (b.val().numel() != m) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor<S> out = x.val();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) out.at(i, j) += b.val()[j];
    auto px = x.node(), pb = b.node();
    return make_op<S>(std::move(out), {x, b}, [px, pb, n, m](Node<S>& self) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) px->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < m; ++j) pb->grad[j] += self.grad.at(i, j);
        }
    });
}

// ------------------------------------------------------------- reductions

template <class S>
Var<S> sum_all(const Var<S>& a) {
    S s = S(0);
    for (const auto& v : a.val().data) s += v;
    auto pa = a.node();
    return make_op<S>(Tensor<S>({1}, std::vector<S>{s}), {a}, [pa](Node<S>& self) {
        pa->ensure_grad();
        S g = self.grad[0];
        for (int64_t i = 0; i < pa->grad.numel(); ++i) pa->grad[i] += g;
    });
}

template <class S>
Var<S> mean_all(const Var<S>& a) {
    int64_t n = a.val().numel();
    S s = S(0);
    for (const auto& v : a.val().data) s += v;
    s /= static_cast<S>(n);
    auto pa = a.node();
    return make_op<S>(Tensor<S>({1}, std::vector<S>{s}), {a}, [pa, n](Node<S>& self) {
        pa->ensure_grad();
        S g = self.grad[0] / static_cast<S>(n);
        for (int64_t i = 0; i < pa->grad.numel(); ++i) pa->grad[i] += g;
    });
}

// column means of X [n,m] -> [1,m]
template <class S>
Var<S> mean_axis0(const Var<S>& x) {
    int64_t n = x.val().dim(0), m = x.val().dim(1);
    Tensor<S> out({1, m});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) out[j] += x.val().at(i, j);
    for (int64_t j = 0; j < m; ++j) out[j] /= static_cast<S>(n);
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, n, m](Node<S>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) px->grad.at(i, j) += self.grad[j] / static_cast<S>(n);
    });
}

template <class S>
Var<S> softmax_rows(const Var<S>& x) {
    int64_t n = x.val().dim(0), m = x.val().dim(1);
    Tensor<S> out = x.val();
    for (int64_t i = 0; i < n; ++i) {
        S mx = out.at(i, 0);
        for (int64_t j = 1; j < m; ++j) mx = std::max(mx, out.at(i, j));
        S sum = S(0);
        for (int64_t j = 0; j < m; ++j) {
            S e = std::exp(out.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int64_t j = 0; j < m; ++j) out.at(i, j) /= sum;
    }
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, n, m](Node<S>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            S dot = S(0);
            for (int64_t j = 0; j < m; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
            for (int64_t j = 0; j < m; ++j)
                px->grad.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
        }
    });
}

// log(sum(exp(row))) -> [n]
template <class S>
Var<S> logsumexp_rows(const Var<S>& x) {
    int64_t n = x.val().dim(0), m = x.val().dim(1);
    Tensor<S> out({n});
    for (int64_t i = 0; i < n; ++i) {
        S mx = x.val().at(i, 0);
        for (int64_t j = 1; j < m; ++j) mx = std::max(mx, x.val().at(i, j));
        S sum = S(0);
        for (int64_t j = 0; j < m; ++j) sum += std::exp(x.val().at(i, j) - mx);
        out[i] = mx + std::log(sum);
    }
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, n, m](Node<S>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            S l = self.value[i], g = self.grad[i];
            for (int64_t j = 0; j < m; ++j) px->grad.at(i, j) += g * std::exp(px->value.at(i, j) - l);
        }
    });
}

// -------------------------------------------------------------- indexing

template <class S>
Var<S> take_rc(const Var<S>& x, std::vector<int64_t> rows, std::vector<int64_t> cols) {
    if (rows.size() != cols.size()) throw std::invalid_argument("take_rc: index size mismatch");
    int64_t k = static_cast<int64_t>(rows.size());
    Tensor<S> out({k});
    for (int64_t i = 0; i < k; ++i) out[i] = x.val().at(rows[static_cast<size_t>(i)], cols[static_cast<size_t>(i)]);
    auto px = x.node();
    return make_op<S>(std::move(out), {x},
                      [px, rows = std::move(rows), cols = std::move(cols)](Node<S>& self) {
                          px->ensure_grad();
                          for (size_t i = 0; i < rows.size(); ++i)
                              px->grad.at(rows[i], cols[i]) += self.grad[static_cast<int64_t>(i)];
                      });
}

template <class S>
Var<S> gather_rows(const Var<S>& x, std::vector<int64_t> idx) {
    int64_t m = x.val().dim(1), k = static_cast<int64_t>(idx.size());
    Tensor<S> out({k, m});
    for (int64_t i = 0; i < k; ++i)
        for (int64_t j = 0; j < m; ++j) out.at(i, j) = x.val().at(idx[static_cast<size_t>(i)], j);
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, idx = std::move(idx), m](Node<S>& self) {
        px->ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i)
            for (int64_t j = 0; j < m; ++j) px->grad.at(idx[i], j) += self.grad.at(static_cast<int64_t>(i), j);
    });
}

template <class S>
Var<S> slice_rows(const Var<S>& x, int64_t r0, int64_t r1) {
    int64_t m = x.val().dim(1), k = r1 - r0;
    Tensor<S> out({k, m});
    std::copy_n(x.val().ptr() + r0 * m, k * m, out.ptr());
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, r0, m, k](Node<S>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < k * m; ++i) px->grad[r0 * m + i] += self.grad[i];
    });
}

template <class S>
Var<S> slice_cols(const Var<S>& x, int64_t c0, int64_t c1) {
    int64_t n = x.val().dim(0), m = x.val().dim(1), w = c1 - c0;
    Tensor<S> out({n, w});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j) out.at(i, j) = x.val().at(i, c0 + j);
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, n, w, c0](Node<S>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < w; ++j) px->grad.at(i, c0 + j) += self.grad.at(i, j);
    });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int64_t m = parts[0].val().dim(1), n = 0;
    for (const auto& p : parts) n += p.val().dim(0);
    Tensor<S> out({n, m});
    int64_t r = 0;
    std::vector<int64_t> offs;
    for (const auto& p : parts) {
        offs.push_back(r);
        std::copy_n(p.val().ptr(), p.val().numel(), out.ptr() + r * m);
        r += p.val().dim(0);
    }
    std::vector<std::shared_ptr<Node<S>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return make_op<S>(std::move(out), parts, [nodes, offs, m](Node<S>& self) {
        for (size_t k = 0; k < nodes.size(); ++k) {
            if (!nodes[k]->requires_grad) continue;
            nodes[k]->ensure_grad();
            int64_t cnt = nodes[k]->value.numel();
            for (int64_t i = 0; i < cnt; ++i) nodes[k]->grad[i] += self.grad[offs[k] * m + i];
        }
    });
}

template <class S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
    int64_t n = a.val().dim(0), ma = a.val().dim(1), mb = b.val().dim(1);
    if (b.val().dim(0) != n) throw std::invalid_argument("concat_cols: row mismatch");
    Tensor<S> out({n, ma + mb});
    for (int64_t i = 0; i < n; ++i) {
        std::copy_n(a.val().ptr() + i * ma, ma, out.ptr() + i * (ma + mb));
        std::copy_n(b.val().ptr() + i * mb, mb, out.ptr() + i * (ma + mb) + ma);
    }
    auto pa = a.node(), pb = b.node();
    return make_op<S>(std::move(out), {a, b}, [pa, pb, n, ma, mb](Node<S>& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < ma; ++j) pa->grad.at(i, j) += self.grad.at(i, j);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < mb; ++j) pb->grad.at(i, j) += self.grad.at(i, ma + j);
        }
    });
}

// ------------------------------------------------------- normalization ops

template <class S>
Var<S> layer_norm_rows(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps) {
    int64_t n = x.val().dim(0), m = x.val().dim(1);
    Tensor<S> out({n, m});
    Tensor<S> inv_sigma({n}), xhat({n, m});
    for (int64_t i = 0; i < n; ++i) {
        S mean = S(0);
        for (int64_t j = 0; j < m; ++j) mean += x.val().at(i, j);
        mean /= static_cast<S>(m);
        S var = S(0);
        for (int64_t j = 0; j < m; ++j) {
            S d = x.val().at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<S>(m);
        S is = S(1) / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (int64_t j = 0; j < m; ++j) {
            S h = (x.val().at(i, j) - mean) * is;
            xhat.at(i, j) = h;
            out.at(i, j) = gamma.val()[j] * h + beta.val()[j];
        }
    }
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return make_op<S>(std::move(out), {x, gamma, beta},
                      [px, pg, pb, n, m, inv_sigma = std::move(inv_sigma), xhat = std::move(xhat)](Node<S>& self) {
                          if (pg->requires_grad) {
                              pg->ensure_grad();
                              for (int64_t i = 0; i < n; ++i)
                                  for (int64_t j = 0; j < m; ++j) pg->grad[j] += self.grad.at(i, j) * xhat.at(i, j);
                          }
                          if (pb->requires_grad) {
                              pb->ensure_grad();
                              for (int64_t i = 0; i < n; ++i)
                                  for (int64_t j = 0; j < m; ++j) pb->grad[j] += self.grad.at(i, j);
                          }
                          if (px->requires_grad) {
                              px->ensure_grad();
                              for (int64_t i = 0; i < n; ++i) {
                                  S mean_g = S(0), mean_gx = S(0);
                                  for (int64_t j = 0; j < m; ++j) {
                                      S gj = self.grad.at(i, j) * pg->value[j];
                                      mean_g += gj;
                                      mean_gx += gj * xhat.at(i, j);
                                  }
                                  mean_g /= static_cast<S>(m);
                                  mean_gx /= static_cast<S>(m);
                                  for (int64_t j = 0; j < m; ++j) {
                                      S gj = self.grad.at(i, j) * pg->value[j];
                                      px->grad.at(i, j) += inv_sigma[i] * (gj - mean_g - xhat.at(i, j) * mean_gx);
                                  }
                              }
                          }
                      });
}

// X [n,c,h,w] normalized per (sample, group); gamma/beta per channel
template <class S>
Var<S> group_norm(const Var<S>& x, int64_t groups, const Var<S>& gamma, const Var<S>& beta, S eps) {
    int64_t n = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    int64_t cg = c / groups, hw = h * w, glen = cg * hw;
    Tensor<S> out({n, c, h, w});
    Tensor<S> inv_sigma({n, groups}), xhat({n, c, h, w});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t g = 0; g < groups; ++g) {
            const S* xs = x.val().ptr() + (i * c + g * cg) * hw;
            S mean = S(0);
            for (int64_t t = 0; t < glen; ++t) mean += xs[t];
            mean /= static_cast<S>(glen);
            S var = S(0);
            for (int64_t t = 0; t < glen; ++t) {
                S d = xs[t] - mean;
                var += d * d;
            }
            var /= static_cast<S>(glen);
            S is = S(1) / std::sqrt(var + eps);
            inv_sigma.at(i, g) = is;
            S* hs = xhat.ptr() + (i * c + g * cg) * hw;
            S* os = out.ptr() + (i * c + g * cg) * hw;
            for (int64_t ch = 0; ch < cg; ++ch) {
                S gm = gamma.val()[g * cg + ch], bt = beta.val()[g * cg + ch];
                for (int64_t t = 0; t < hw; ++t) {
                    S v = (xs[ch * hw + t] - mean) * is;
                    hs[ch * hw + t] = v;
                    os[ch * hw + t] = gm * v + bt;
                }
            }
        }
    }
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return make_op<S>(
        std::move(out), {x, gamma, beta},
        [px, pg, pb, n, c, hw, groups, cg, glen, inv_sigma = std::move(inv_sigma),
         xhat = std::move(xhat)](Node<S>& self) {
            if (pg->requires_grad || pb->requires_grad) {
                if (pg->requires_grad) pg->ensure_grad();
                if (pb->requires_grad) pb->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t ch = 0; ch < c; ++ch) {
                        const S* gs = self.grad.ptr() + (i * c + ch) * hw;
                        const S* hs = xhat.ptr() + (i * c + ch) * hw;
                        S sg = S(0), sb = S(0);
                        for (int64_t t = 0; t < hw; ++t) {
                            sg += gs[t] * hs[t];
                            sb += gs[t];
                        }
                        if (pg->requires_grad) pg->grad[ch] += sg;
                        if (pb->requires_grad) pb->grad[ch] += sb;
                    }
            }
            if (px->requires_grad) {
                px->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t g = 0; g < groups; ++g) {
                        const S* gs = self.grad.ptr() + (i * c + g * cg) * hw;
                        const S* hs = xhat.ptr() + (i * c + g * cg) * hw;
                        S mean_g = S(0), mean_gx = S(0);
                        for (int64_t ch = 0; ch < cg; ++ch) {
                            S gm = pg->value[g * cg + ch];
                            for (int64_t t = 0; t < hw; ++t) {
                                S gj = gs[ch * hw + t] * gm;
                                mean_g += gj;
                                mean_gx += gj * hs[ch * hw + t];
                            }
                        }
                        mean_g /= static_cast<S>(glen);
                        mean_gx /= static_cast<S>(glen);
                        S is = inv_sigma.at(i, g);
                        S* dxs = px->grad.ptr() + (i * c + g * cg) * hw;
                        for (int64_t ch = 0; ch < cg; ++ch) {
                            S gm = pg->value[g * cg + ch];
                            for (int64_t t = 0; t < hw; ++t) {
                                S gj = gs[ch * hw + t] * gm;
                                dxs[ch * hw + t] += is * (gj - mean_g - hs[ch * hw + t] * mean_gx);
                            }
                        }
                    }
            }
        });
}

// rows scaled to unit length; denominator is norm + eps so the zero row is defined
template <class S>
Var<S> normalize_rows(const Var<S>& x, S eps = S(1e-12)) {
    int64_t n = x.val().dim(0), m = x.val().dim(1);
    Tensor<S> out({n, m});
    Tensor<S> norms({n});
    for (int64_t i = 0; i < n; ++i) {
        S s = S(0);
        for (int64_t j = 0; j < m; ++j) s += x.val().at(i, j) * x.val().at(i, j);
        S nv = std::sqrt(s);
        norms[i] = nv;
        S r = nv + eps;
        for (int64_t j = 0; j < m; ++j) out.at(i, j) = x.val().at(i, j) / r;
    }
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, n, m, eps, norms = std::move(norms)](Node<S>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            S nv = norms[i], r = nv + eps;
            S dot = S(0);
            for (int64_t j = 0; j < m; ++j) dot += self.grad.at(i, j) * px->value.at(i, j);
            for (int64_t j = 0; j < m; ++j) {
                S g = self.grad.at(i, j) / r;
                if (nv > S(0)) g -= px->value.at(i, j) * dot / (nv * r * r);
                px->grad.at(i, j) += g;
            }
        }
    });
}

// ---------------------------------------------------------------- dropout

template <class S>
Var<S> dropout(const Var<S>& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    Tensor<S> mask(x.val().shape);
    S keep = static_cast<S>(1.0 / (1.0 - p));
    for (auto& v : mask.data) v = rng.bernoulli(p) ? S(0) : keep;
    Tensor<S> out = x.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, mask = std::move(mask)](Node<S>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) px->grad[i] += self.grad[i] * mask[i];
    });
}

// ------------------------------------------------------------ convolution

namespace detail {

template <class S>
void im2col(const S* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t ho, int64_t wo, S* cols) {
    // cols layout: [c*kh*kw, ho*wo]
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                S* row = cols + ((ch * kh + ki) * kw + kj) * ho * wo;
                for (int64_t oi = 0; oi < ho; ++oi) {
                    int64_t ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) {
                        std::fill_n(row + oi * wo, wo, S(0));
                        continue;
                    }
                    const S* src = x + (ch * h + ii) * w;
                    for (int64_t oj = 0; oj < wo; ++oj) {
                        int64_t jj = oj * stride + kj - pad;
                        row[oi * wo + oj] = (jj >= 0 && jj < w) ? src[jj] : S(0);
                    }
                }
            }
}

template <class S>
void col2im_add(const S* cols, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                int64_t ho, int64_t wo, S* dx) {
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                const S* row = cols + ((ch * kh + ki) * kw + kj) * ho * wo;
                for (int64_t oi = 0; oi < ho; ++oi) {
                    int64_t ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) continue;
                    S* dst = dx + (ch * h + ii) * w;
                    for (int64_t oj = 0; oj < wo; ++oj) {
                        int64_t jj = oj * stride + kj - pad;
                        if (jj >= 0 && jj < w) dst[jj] += row[oi * wo + oj];
                    }
                }
            }
}

}  // namespace detail

template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, int64_t stride, int64_t pad) {
    int64_t n = x.val().dim(0), ci = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    int64_t co = weight.val().dim(0), kh = weight.val().dim(2), kw = weight.val().dim(3);
    if (weight.val().dim(1) != ci)
        throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(weight.shape()));
    int64_t ho = (h + 2 * pad - kh) / stride + 1;
    int64_t wo = (w + 2 * pad - kw) / stride + 1;
    int64_t ck = ci * kh * kw, ow = ho * wo;

    Tensor<S> out({n, co, ho, wo});
    // im2col buffers are kept for the backward pass
    auto cols = std::make_shared<Tensor<S>>(Shape{n, ck, ow});
    for (int64_t i = 0; i < n; ++i) {
        S* col_i = cols->ptr() + i * ck * ow;
        detail::im2col(x.val().ptr() + i * ci * h * w, ci, h, w, kh, kw, stride, pad, ho, wo, col_i);
        detail::MapM<S> y(out.ptr() + i * co * ow, co, ow);
        y.noalias() = detail::CMapM<S>(weight.val().ptr(), co, ck) * detail::CMapM<S>(col_i, ck, ow);
        for (int64_t ch = 0; ch < co; ++ch) {
            S b = bias.val()[ch];
            S* dst = out.ptr() + (i * co + ch) * ow;
            for (int64_t t = 0; t < ow; ++t) dst[t] += b;
        }
    }
    auto px = x.node(), pw = weight.node(), pb = bias.node();
    return make_op<S>(std::move(out), {x, weight, bias},
                      [px, pw, pb, cols, n, ci, h, w, co, kh, kw, stride, pad, ho, wo, ck, ow](Node<S>& self) {
                          if (pb->requires_grad) {
                              pb->ensure_grad();
                              for (int64_t i = 0; i < n; ++i)
                                  for (int64_t ch = 0; ch < co; ++ch) {
                                      const S* g = self.grad.ptr() + (i * co + ch) * ow;
                                      S s = S(0);
                                      for (int64_t t = 0; t < ow; ++t) s += g[t];
                                      pb->grad[ch] += s;
                                  }
                          }
                          if (pw->requires_grad) {
                              pw->ensure_grad();
                              detail::MapM<S> dw(pw->grad.ptr(), co, ck);
                              for (int64_t i = 0; i < n; ++i)
                                  dw.noalias() += detail::CMapM<S>(self.grad.ptr() + i * co * ow, co, ow) *
                                                  detail::CMapM<S>(cols->ptr() + i * ck * ow, ck, ow).transpose();
                          }
                          if (px->requires_grad) {
                              px->ensure_grad();
                              Tensor<S> dcol({ck, ow});
                              for (int64_t i = 0; i < n; ++i) {
                                  detail::MapM<S>(dcol.ptr(), ck, ow).noalias() =
                                      detail::CMapM<S>(pw->value.ptr(), co, ck).transpose() *
                                      detail::CMapM<S>(self.grad.ptr() + i * co * ow, co, ow);
                                  detail::col2im_add(dcol.ptr(), ci, h, w, kh, kw, stride, pad, ho, wo,
                                                     px->grad.ptr() + i * ci * h * w);
                              }
                          }
                      });
}

template <class S>
Var<S> maxpool2d(const Var<S>& x, int64_t k, int64_t stride, int64_t pad) {
    int64_t n = x.val().dim(0), c = x.val().dim(1), h = x.val().dim(2), w = x.val().dim(3);
    int64_t ho = (h + 2 * pad - k) / stride + 1;
    int64_t wo = (w + 2 * pad - k) / stride + 1;
    Tensor<S> out({n, c, ho, wo});
    std::vector<int64_t> argmax(static_cast<size_t>(n * c * ho * wo));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const S* xs = x.val().ptr() + (i * c + ch) * h * w;
            for (int64_t oi = 0; oi < ho; ++oi)
                for (int64_t oj = 0; oj < wo; ++oj) {
                    S best = -std::numeric_limits<S>::infinity();
                    int64_t bidx = -1;
                    for (int64_t ki = 0; ki < k; ++ki) {
                        int64_t ii = oi * stride + ki - pad;
                        if (ii < 0 || ii >= h) continue;
                        for (int64_t kj = 0; kj < k; ++kj) {
                            int64_t jj = oj * stride + kj - pad;
                            if (jj < 0 || jj >= w) continue;
                            S v = xs[ii * w + jj];
                            if (v > best) {
                                best = v;
                                bidx = ii * w + jj;
                            }
                        }
                    }
                    int64_t o = ((i * c + ch) * ho + oi) * wo + oj;
                    out[o] = best;
                    argmax[static_cast<size_t>(o)] = (i * c + ch) * h * w + bidx;
                }
        }
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, argmax = std::move(argmax)](Node<S>& self) {
        px->ensure_grad();
        for (int64_t o = 0; o < self.grad.numel(); ++o) px->grad[argmax[static_cast<size_t>(o)]] += self.grad[o];
    });
}

template <class S>
Var<S> global_avg_pool(const Var<S>& x) {
    int64_t n = x.val().dim(0), c = x.val().dim(1), hw = x.val().dim(2) * x.val().dim(3);
    Tensor<S> out({n, c});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const S* xs = x.val().ptr() + (i * c + ch) * hw;
            S s = S(0);
            for (int64_t t = 0; t < hw; ++t) s += xs[t];
            out.at(i, ch) = s / static_cast<S>(hw);
        }
    auto px = x.node();
    return make_op<S>(std::move(out), {x}, [px, n, c, hw](Node<S>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                S g = self.grad.at(i, ch) / static_cast<S>(hw);
                S* dst = px->grad.ptr() + (i * c + ch) * hw;
                for (int64_t t = 0; t < hw; ++t) dst[t] += g;
            }
    });
}

}  // namespace avattr
