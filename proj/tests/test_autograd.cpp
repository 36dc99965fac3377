#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avattr/autograd.hpp"
#include "gradcheck.hpp"

using namespace avattr;
using gradcheck::check;
using gradcheck::random_tensor;

namespace {
Rng rng_for(const char* tag) { return Rng::stream(7, tag); }
}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    Rng rng = rng_for("ew");
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {3, 4});

    auto r = check([](std::vector<Var<double>>& v) { return sum_all(mul(add(v[0], v[1]), sub(v[0], v[1]))); }, {a, b});
    CHECK(r.max_rel_err < 1e-7);

    r = check([](std::vector<Var<double>>& v) { return mean_all(relu(v[0])); }, {a});
    CHECK(r.max_rel_err < 1e-6);

    r = check([](std::vector<Var<double>>& v) { return sum_all(sigmoid(mul_scalar(v[0], 0.7))); }, {a});
    CHECK(r.max_rel_err < 1e-7);

    r = check([](std::vector<Var<double>>& v) { return sum_all(exp_op(mul_scalar(v[0], 0.3))); }, {a});
    CHECK(r.max_rel_err < 1e-7);

    Tensor<double> pos({3, 4});
    Rng prng = rng_for("pos");
    for (auto& x : pos.data) x = prng.uniform(0.3, 2.0);
    r = check([](std::vector<Var<double>>& v) { return sum_all(log_op(v[0])); }, {pos});
    CHECK(r.max_rel_err < 1e-7);
    r = check([](std::vector<Var<double>>& v) { return sum_all(sqrt_op(v[0])); }, {pos});
    CHECK(r.max_rel_err < 1e-7);
    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(v[0], 2.5)); }, {pos});
    CHECK(r.max_rel_err < 1e-7);
    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(v[0], 0.0)); }, {pos});
    CHECK(r.max_rel_err < 1e-9);  // constant output, zero grad

    // clamp: keep samples away from the boundaries so FD is valid
    r = check([](std::vector<Var<double>>& v) { return sum_all(clamp(v[0], -0.25, 0.25)); }, {a});
    CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("matmul family") {
    Rng rng = rng_for("mm");
    auto a = random_tensor(rng, {3, 5});
    auto b = random_tensor(rng, {5, 2});
    auto c = random_tensor(rng, {4, 5});

    auto r = check([](std::vector<Var<double>>& v) { return sum_all(matmul(v[0], v[1])); }, {a, b});
    CHECK(r.max_rel_err < 1e-7);

    r = check([](std::vector<Var<double>>& v) { return sum_all(matmul_nt(v[0], v[1])); }, {a, c});
    CHECK(r.max_rel_err < 1e-7);

    r = check([](std::vector<Var<double>>& v) { return sum_all(mul(transpose(v[0]), transpose(v[0]))); }, {a});
    CHECK(r.max_rel_err < 1e-7);

    auto bias = random_tensor(rng, {5});
    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(add_rowvec(v[0], v[1]), 2.0)); }, {a, bias});
    CHECK(r.max_rel_err < 1e-7);
}

TEST_CASE("reductions, softmax, indexing") {
    Rng rng = rng_for("red");
    auto x = random_tensor(rng, {4, 6});

    auto r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(mean_axis0(v[0]), 2.0)); }, {x});
    CHECK(r.max_rel_err < 1e-7);

    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(softmax_rows(v[0]), 2.0)); }, {x});
    CHECK(r.max_rel_err < 1e-6);

    r = check([](std::vector<Var<double>>& v) { return sum_all(logsumexp_rows(v[0])); }, {x});
    CHECK(r.max_rel_err < 1e-7);

    r = check([](std::vector<Var<double>>& v) { return sum_all(take_rc(v[0], {0, 1, 3}, {5, 0, 2})); }, {x});
    CHECK(r.max_rel_err < 1e-9);

    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(gather_rows(v[0], {3, 1, 1}), 2.0)); }, {x});
    CHECK(r.max_rel_err < 1e-7);

    r = check(
        [](std::vector<Var<double>>& v) {
            auto top = slice_rows(v[0], 0, 2);
            auto cols = slice_cols(v[0], 1, 4);
            return add(sum_all(pow_const(top, 2.0)), sum_all(pow_const(cols, 3.0)));
        },
        {x});
    CHECK(r.max_rel_err < 1e-6);

    auto y = random_tensor(rng, {2, 6});
    r = check(
        [](std::vector<Var<double>>& v) {
            return sum_all(pow_const(concat_rows<double>({v[0], v[1]}), 2.0));
        },
        {x, y});
    CHECK(r.max_rel_err < 1e-7);

    auto z = random_tensor(rng, {4, 3});
    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(concat_cols(v[0], v[1]), 2.0)); }, {x, z});
    CHECK(r.max_rel_err < 1e-7);
}

TEST_CASE("normalization layers") {
    Rng rng = rng_for("norm");
    auto x = random_tensor(rng, {3, 8});
    auto gamma = random_tensor(rng, {8}, 0.5);
    for (auto& v : gamma.data) v += 1.0;
    auto beta = random_tensor(rng, {8}, 0.1);

    auto r = check(
        [](std::vector<Var<double>>& v) {
            return sum_all(pow_const(layer_norm_rows(v[0], v[1], v[2], 1e-5), 2.0));
        },
        {x, gamma, beta});
    CHECK(r.max_rel_err < 1e-6);

    auto xi = random_tensor(rng, {2, 4, 3, 3});
    auto g4 = random_tensor(rng, {4}, 0.3);
    for (auto& v : g4.data) v += 1.0;
    auto b4 = random_tensor(rng, {4}, 0.1);
    r = check(
        [](std::vector<Var<double>>& v) {
            return sum_all(pow_const(group_norm(v[0], 2, v[1], v[2], 1e-5), 2.0));
        },
        {xi, g4, b4});
    CHECK(r.max_rel_err < 1e-6);

    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(normalize_rows(v[0]), 3.0)); }, {x});
    CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("normalize_rows produces unit rows and handles the zero row") {
    Tensor<double> x({2, 3}, std::vector<double>{3.0, 4.0, 0.0, 0.0, 0.0, 0.0});
    Var<double> v(x, false);
    auto y = normalize_rows(v);
    CHECK(y.val().at(0, 0) == doctest::Approx(0.6));
    CHECK(y.val().at(0, 1) == doctest::Approx(0.8));
    CHECK(y.val().at(1, 0) == 0.0);  // zero row stays zero, no NaN
    double n0 = std::hypot(y.val().at(0, 0), y.val().at(0, 1));
    CHECK(std::abs(n0 - 1.0) < 1e-9);
}

TEST_CASE("conv2d and pooling match finite differences") {
    Rng rng = rng_for("conv");
    auto x = random_tensor(rng, {2, 3, 5, 5});
    auto w = random_tensor(rng, {4, 3, 3, 3}, 0.5);
    auto b = random_tensor(rng, {4}, 0.1);

    auto r = check(
        [](std::vector<Var<double>>& v) { return sum_all(pow_const(conv2d(v[0], v[1], v[2], 1, 1), 2.0)); },
        {x, w, b});
    CHECK(r.max_rel_err < 1e-6);

    r = check(
        [](std::vector<Var<double>>& v) { return sum_all(pow_const(conv2d(v[0], v[1], v[2], 2, 1), 2.0)); },
        {x, w, b});
    CHECK(r.max_rel_err < 1e-6);

    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(global_avg_pool(v[0]), 2.0)); }, {x});
    CHECK(r.max_rel_err < 1e-7);

    // maxpool argmax must be stable under the FD perturbation: use well
    // separated values
    Tensor<double> xm({1, 1, 4, 4});
    Rng prng = rng_for("pool");
    std::vector<int64_t> perm = prng.permutation(16);
    for (int i = 0; i < 16; ++i) xm[i] = static_cast<double>(perm[static_cast<size_t>(i)]);
    r = check([](std::vector<Var<double>>& v) { return sum_all(pow_const(maxpool2d(v[0], 2, 2, 0), 2.0)); }, {xm});
    CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("conv2d agrees with direct convolution") {
    Rng rng = rng_for("convref");
    auto x = random_tensor(rng, {1, 2, 4, 4});
    auto w = random_tensor(rng, {3, 2, 3, 3});
    auto b = random_tensor(rng, {3});
    Var<double> vx(x), vw(w), vb(b);
    auto y = conv2d(vx, vw, vb, 1, 1);
    // direct sliding-window evaluation
    for (int64_t o = 0; o < 3; ++o)
        for (int64_t oi = 0; oi < 4; ++oi)
            for (int64_t oj = 0; oj < 4; ++oj) {
                double acc = b[o];
                for (int64_t c = 0; c < 2; ++c)
                    for (int64_t ki = 0; ki < 3; ++ki)
                        for (int64_t kj = 0; kj < 3; ++kj) {
                            int64_t ii = oi + ki - 1, jj = oj + kj - 1;
                            if (ii < 0 || ii >= 4 || jj < 0 || jj >= 4) continue;
                            acc += w[((o * 2 + c) * 3 + ki) * 3 + kj] * x[(c * 4 + ii) * 4 + jj];
                        }
                CHECK(y.val()[(o * 4 + oi) * 4 + oj] == doctest::Approx(acc).epsilon(1e-10));
            }
}

TEST_CASE("dropout scales kept entries and zeroes dropped ones") {
    Rng rng = rng_for("drop");
    Tensor<double> x({1, 1000}, 1.0);
    Var<double> v(x, true);
    auto y = dropout(v, 0.3, rng);
    int64_t kept = 0;
    for (int64_t i = 0; i < y.val().numel(); ++i) {
        if (y.val()[i] != 0.0) {
            CHECK(y.val()[i] == doctest::Approx(1.0 / 0.7));
            ++kept;
        }
    }
    CHECK(kept > 600);
    CHECK(kept < 800);
    auto loss = sum_all(y);
    backward(loss);
    // gradient mirrors the mask
    int64_t gkept = 0;
    for (int64_t i = 0; i < v.grad().numel(); ++i)
        if (v.grad()[i] != 0.0) ++gkept;
    CHECK(gkept == kept);
}

TEST_CASE("graph reuse accumulates gradients") {
    Tensor<double> x({1}, std::vector<double>{2.0});
    Var<double> v(x, true);
    auto y = mul(v, v);  // x^2, both parents are the same node
    backward(y);
    CHECK(v.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("no-grad mode builds leaf results") {
    Tensor<double> x({2, 2}, 1.0);
    Var<double> v(x, true);
    NoGrad ng;
    auto y = mul(v, v);
    CHECK_FALSE(y.requires_grad());
}
