#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avattr/losses.hpp"
#include "gradcheck.hpp"

using namespace avattr;
using gradcheck::check;
using gradcheck::random_tensor;

namespace {

Tensor<double> unit_rows(Rng& rng, int64_t n, int64_t d) {
    Tensor<double> t({n, d});
    for (int64_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            t.at(i, j) = rng.normal();
            sq += t.at(i, j) * t.at(i, j);
        }
        double inv = 1.0 / std::sqrt(sq);
        for (int64_t j = 0; j < d; ++j) t.at(i, j) *= inv;
    }
    return t;
}

Tensor<double> simplex_rows(Rng& rng, int64_t n, int64_t k) {
    Tensor<double> t({n, k});
    for (int64_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            t.at(i, j) = rng.uniform(0.05, 1.0);
            sum += t.at(i, j);
        }
        for (int64_t j = 0; j < k; ++j) t.at(i, j) /= sum;
    }
    return t;
}

// test-side restatement of the symmetric InfoNCE formula over a similarity
// matrix (rows: one modality, cols: the other)
double nce_from_sims(const std::vector<std::vector<double>>& s, double tau) {
    const size_t n = s.size();
    double total = 0.0;
    for (int dir = 0; dir < 2; ++dir) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double denom = 0.0;
            for (size_t j = 0; j < n; ++j) denom += std::exp((dir == 0 ? s[i][j] : s[j][i]) / tau);
            acc += -std::log(std::exp(s[i][i] / tau) / denom);
        }
        total += acc / static_cast<double>(n);
    }
    return 0.5 * total;
}

}  // namespace

TEST_CASE("focal loss oracle values") {
    // y=1, p=0.5: 0.75 * 0.25 * ln 2
    Var<double> p1(Tensor<double>({1}, std::vector<double>{0.5}));
    CHECK(focal_loss(p1, {1}, 0.75, 2.0).item() == doctest::Approx(0.129965).epsilon(1e-5));
    // y=0, p=0.5: (1-0.75) * 0.25 * ln 2
    CHECK(focal_loss(p1, {0}, 0.75, 2.0).item() == doctest::Approx(0.043322).epsilon(1e-4));
    // y=1, p -> 1: loss -> 0
    Var<double> phi(Tensor<double>({1}, std::vector<double>{1.0 - 1e-9}));
    CHECK(focal_loss(phi, {1}, 0.75, 2.0).item() < 1e-12);
    // batch mean of the two cases
    Var<double> pb(Tensor<double>({2}, std::vector<double>{0.5, 0.5}));
    CHECK(focal_loss(pb, {1, 0}, 0.75, 2.0).item() ==
          doctest::Approx(0.5 * (0.129965 + 0.043322)).epsilon(1e-4));
}

TEST_CASE("focal loss with gamma=0, alpha=0.5 is exactly half of BCE") {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        int64_t B = 1 + rng.randint(6);
        Tensor<double> p({B});
        std::vector<int> y(static_cast<size_t>(B));
        for (int64_t i = 0; i < B; ++i) {
            p[i] = rng.uniform(0.05, 0.95);
            y[static_cast<size_t>(i)] = rng.bernoulli(0.5) ? 1 : 0;
        }
        double focal = focal_loss(Var<double>(p), y, 0.5, 0.0).item();
        double bce = 0.0;
        for (int64_t i = 0; i < B; ++i) {
            double yi = y[static_cast<size_t>(i)];
            bce += -(yi * std::log(p[i]) + (1.0 - yi) * std::log(1.0 - p[i]));
        }
        bce /= static_cast<double>(B);
        CHECK(focal == 0.5 * bce);  // exact, both paths reduce to -0.5 log(p_t)
    }
}

TEST_CASE("attribution cross-entropy oracle values") {
    Var<double> uniform4(Tensor<double>({1, 4}, std::vector<double>{0.25, 0.25, 0.25, 0.25}));
    CHECK(attribution_ce(uniform4, {2}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-9));

    Var<double> onehot(Tensor<double>({1, 3}, std::vector<double>{1.0, 0.0, 0.0}));
    CHECK(attribution_ce(onehot, {0}).item() == doctest::Approx(0.0).epsilon(1e-6));

    Var<double> p75(
        Tensor<double>({1, 4}, std::vector<double>{0.75, 0.75 / 9, 0.75 / 9, 0.75 / 9 + (0.25 - 0.25)}));
    // probs (0.75, ...) with true class 0
    Tensor<double> row({1, 4}, std::vector<double>{0.75, 0.1, 0.1, 0.05});
    CHECK(attribution_ce(Var<double>(row), {0}).item() == doctest::Approx(-std::log(0.75)).epsilon(1e-9));

    CHECK_THROWS(attribution_ce(uniform4, {7}));
}

TEST_CASE("info_nce oracle values") {
    CHECK_THROWS(info_nce(Var<double>(Tensor<double>({0, 2})), Var<double>(Tensor<double>({0, 2})), 1.0));

    // single sample: sole candidate is the positive
    Var<double> one(Tensor<double>({1, 3}, std::vector<double>{1.0, 0.0, 0.0}));
    CHECK(info_nce(one, one, 0.07).item() == 0.0);

    // two orthonormal pairs, identical across modalities
    Tensor<double> e({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    Var<double> pv(e), pa(e);
    CHECK(info_nce(pv, pa, 1.0).item() == doctest::Approx(0.313262).epsilon(1e-5));
    CHECK(info_nce(pv, pa, 0.07).item() == doctest::Approx(6.2e-7).epsilon(0.05));
}

TEST_CASE("info_nce equals the similarity-matrix formula and is row-permutation invariant") {
    Rng rng(31);
    for (int trial = 0; trial < 8; ++trial) {
        int64_t B = 2 + rng.randint(5), P = 3 + rng.randint(5);
        auto x = unit_rows(rng, B, P);
        auto y = unit_rows(rng, B, P);
        double tau = rng.uniform(0.1, 1.5);

        std::vector<std::vector<double>> sims(static_cast<size_t>(B), std::vector<double>(static_cast<size_t>(B)));
        for (int64_t i = 0; i < B; ++i)
            for (int64_t j = 0; j < B; ++j) {
                double d = 0.0;
                for (int64_t k = 0; k < P; ++k) d += x.at(i, k) * y.at(j, k);
                sims[static_cast<size_t>(i)][static_cast<size_t>(j)] = d;
            }
        double impl = info_nce(Var<double>(x), Var<double>(y), tau).item();
        CHECK(impl == doctest::Approx(nce_from_sims(sims, tau)).epsilon(1e-12));

        // simultaneous row permutation leaves the loss unchanged
        auto perm = rng.permutation(B);
        Tensor<double> xp({B, P}), yp({B, P});
        for (int64_t i = 0; i < B; ++i)
            for (int64_t k = 0; k < P; ++k) {
                xp.at(i, k) = x.at(perm[static_cast<size_t>(i)], k);
                yp.at(i, k) = y.at(perm[static_cast<size_t>(i)], k);
            }
        double permuted = info_nce(Var<double>(xp), Var<double>(yp), tau).item();
        CHECK(permuted == doctest::Approx(impl).epsilon(1e-12));
    }
}

TEST_CASE("raising a positive-pair similarity strictly lowers the loss") {
    Rng rng(32);
    std::vector<std::vector<double>> sims(3, std::vector<double>(3));
    for (auto& row : sims)
        for (auto& v : row) v = rng.uniform(-0.5, 0.5);
    double base = nce_from_sims(sims, 0.3);
    for (size_t i = 0; i < 3; ++i) {
        auto bumped = sims;
        bumped[i][i] += 0.05;  // negatives held fixed
        CHECK(nce_from_sims(bumped, 0.3) < base);
    }
}

TEST_CASE("cmffc grouping rules") {
    Rng rng(41);
    auto pv = unit_rows(rng, 3, 4);
    auto pa = unit_rows(rng, 3, 4);
    Var<double> v(pv), a(pa);

    // generators (1,1,2): the singleton group 2 is skipped
    int groups = -1;
    double got = cmffc_loss(v, a, {1, 1, 2}, 0.5, &groups).item();
    CHECK(groups == 1);
    auto v01 = gather_rows(v, {0, 1});
    auto a01 = gather_rows(a, {0, 1});
    CHECK(got == info_nce(v01, a01, 0.5).item());

    // all-real batch contributes nothing
    CHECK(cmffc_loss(v, a, {0, 0, 0}, 0.5, &groups).item() == 0.0);
    CHECK(groups == 0);

    // exactly one eligible group spanning the batch: equals plain info_nce
    CHECK(cmffc_loss(v, a, {2, 2, 2}, 0.5, &groups).item() == info_nce(v, a, 0.5).item());
    CHECK(groups == 1);

    // two-sample orthonormal group reproduces the info_nce oracle
    Tensor<double> e({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    CHECK(cmffc_loss(Var<double>(e), Var<double>(e), {1, 1}, 1.0, &groups).item() ==
          doctest::Approx(0.313262).epsilon(1e-5));
}

TEST_CASE("centroid loss oracle values and gradient stopping") {
    CentroidTable<double> table(3, 4);
    // exact match -> zero
    Tensor<double> z({2, 4});
    Var<double> vz(z, true);
    CHECK(centroid_loss(vz, {0, 1}, table).item() == 0.0);

    // one sample at unit distance
    Tensor<double> z1({1, 4}, std::vector<double>{1.0, 0.0, 0.0, 0.0});
    CHECK(centroid_loss(Var<double>(z1), {0}, table).item() == doctest::Approx(1.0));

    // distances 1 and 2 -> (1 + 4) / 2
    Tensor<double> z2({2, 4}, std::vector<double>{1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0});
    CHECK(centroid_loss(Var<double>(z2), {0, 2}, table).item() == doctest::Approx(2.5));

    // the table is a constant: only z_f receives gradient
    Var<double> vz2(z2, true);
    auto loss = centroid_loss(vz2, {0, 2}, table);
    backward(loss);
    CHECK(vz2.grad().at(0, 0) == doctest::Approx(1.0));  // d/dz mean ||z-c||^2 = 2(z-c)/B
    CHECK(vz2.grad().at(1, 1) == doctest::Approx(2.0));

    // defer flag drops classes that have never been updated
    CHECK(centroid_loss(vz2, {0, 2}, table, true).item() == 0.0);
    table.update(z2, {0, 2}, 0.9);
    CHECK(centroid_loss(vz2, {0, 2}, table, true).item() > 0.0);
}

TEST_CASE("centroid EMA updates") {
    CentroidTable<float> t(4, 3);
    // C = 0, batch mean = ones, m = 0.9 -> 0.1
    Tensor<float> z({2, 3}, std::vector<float>{1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f});
    t.update(z, {1, 1}, 0.9f);
    for (int j = 0; j < 3; ++j) CHECK(t.table().at(1, j) == doctest::Approx(0.1f));
    CHECK(t.updated(1));
    CHECK_FALSE(t.updated(0));

    // C = 0.5, batch mean = 1.5 -> 0.6
    CentroidTable<float> t2(2, 2);
    t2.table().fill(0.5f);
    Tensor<float> z2({1, 2}, std::vector<float>{1.5f, 1.5f});
    Tensor<float> before_row0 = t2.table();
    t2.update(z2, {1}, 0.9f);
    CHECK(t2.table().at(1, 0) == doctest::Approx(0.6f));
    // absent class row is bitwise unchanged
    CHECK(t2.table().at(0, 0) == before_row0.at(0, 0));
    CHECK(t2.table().at(0, 1) == before_row0.at(0, 1));

    // idempotent at the fixed point C[g] == batch mean
    CentroidTable<float> t3(2, 2);
    Tensor<float> zm({2, 2}, std::vector<float>{0.3f, -0.7f, 0.3f, -0.7f});
    t3.table().at(0, 0) = 0.3f;
    t3.table().at(0, 1) = -0.7f;
    t3.update(zm, {0, 0}, 0.9f);
    CHECK(t3.table().at(0, 0) == doctest::Approx(0.3f).epsilon(1e-6));
    CHECK(t3.table().at(0, 1) == doctest::Approx(-0.7f).epsilon(1e-6));
}

TEST_CASE("total loss composition") {
    LossWeights<double> w;  // defaults: 0.3 / 0.1 / 0.2 / 0.05
    w.validate();
    auto unit = [] { return Var<double>(Tensor<double>({1}, std::vector<double>{1.0})); };
    auto bundle = total_loss(unit(), unit(), unit(), unit(), unit(), w);
    CHECK(bundle.total.item() == doctest::Approx(1.65).epsilon(1e-9));

    // degenerate weighting: only det survives
    LossWeights<double> w0 = w;
    w0.lambda_attr = w0.lambda_cont = w0.lambda_fp = w0.lambda_cen = 0.0;
    auto det_only = total_loss(unit(), unit(), unit(), unit(), unit(), w0);
    CHECK(det_only.total.item() == doctest::Approx(1.0));

    // Table II echo
    CHECK(w.lambda_attr == doctest::Approx(0.3));
    CHECK(w.lambda_cont == doctest::Approx(0.1));
    CHECK(w.lambda_fp == doctest::Approx(0.2));
    CHECK(w.lambda_cen == doctest::Approx(0.05));
    CHECK(w.alpha == doctest::Approx(0.75));
    CHECK(w.gamma == doctest::Approx(2.0));
    CHECK(w.tau == doctest::Approx(0.07));
    CHECK(w.centroid_momentum == doctest::Approx(0.9));

    // non-finite components are identified by name
    auto nan_var = Var<double>(Tensor<double>({1}, std::vector<double>{std::nan("")}));
    try {
        total_loss(unit(), unit(), nan_var, unit(), unit(), w);
        FAIL("expected throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("cont") != std::string::npos);
    }
}

TEST_CASE("loss components are nonnegative on random instances") {
    Rng rng(55);
    for (int trial = 0; trial < 12; ++trial) {
        int64_t B = 2 + rng.randint(4);
        Tensor<double> p({B});
        std::vector<int> y(static_cast<size_t>(B)), g(static_cast<size_t>(B));
        for (int64_t i = 0; i < B; ++i) {
            p[i] = rng.uniform(0.02, 0.98);
            g[static_cast<size_t>(i)] = static_cast<int>(rng.randint(4));
            y[static_cast<size_t>(i)] = g[static_cast<size_t>(i)] >= 1 ? 1 : 0;
        }
        auto probs = simplex_rows(rng, B, 4);
        auto pv = unit_rows(rng, B, 6);
        auto pa = unit_rows(rng, B, 6);
        auto zf = random_tensor(rng, {B, 6});
        CentroidTable<double> table(4, 6);

        CHECK(focal_loss(Var<double>(p), y, 0.75, 2.0).item() >= 0.0);
        CHECK(attribution_ce(Var<double>(probs), g).item() >= 0.0);
        CHECK(info_nce(Var<double>(pv), Var<double>(pa), 0.07).item() >= 0.0);
        CHECK(cmffc_loss(Var<double>(pv), Var<double>(pa), g, 0.07).item() >= 0.0);
        CHECK(centroid_loss(Var<double>(zf), g, table).item() >= 0.0);
    }
}

TEST_CASE("analytic gradients of every loss match finite differences") {
    Rng rng(66);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        int64_t B = 2 + rng.randint(3), K = 3 + rng.randint(3), P = 4 + rng.randint(4);
        std::vector<int> y(static_cast<size_t>(B)), g(static_cast<size_t>(B));
        for (int64_t i = 0; i < B; ++i) {
            g[static_cast<size_t>(i)] = static_cast<int>(rng.randint(K));
            y[static_cast<size_t>(i)] = g[static_cast<size_t>(i)] >= 1 ? 1 : 0;
        }

        Tensor<double> p({B});
        for (int64_t i = 0; i < B; ++i) p[i] = rng.uniform(0.1, 0.9);
        auto r1 = check([&](std::vector<Var<double>>& v) { return focal_loss(v[0], y, 0.75, 2.0); }, {p});
        worst = std::max(worst, r1.max_rel_err);

        auto probs = simplex_rows(rng, B, K);
        auto r2 = check([&](std::vector<Var<double>>& v) { return attribution_ce(v[0], g); }, {probs});
        worst = std::max(worst, r2.max_rel_err);

        auto pv = unit_rows(rng, B, P);
        auto pa = unit_rows(rng, B, P);
        auto r3 = check([&](std::vector<Var<double>>& v) { return info_nce(v[0], v[1], 0.07); }, {pv, pa});
        worst = std::max(worst, r3.max_rel_err);

        auto r4 = check([&](std::vector<Var<double>>& v) { return cmffc_loss(v[0], v[1], g, 0.07); }, {pv, pa});
        worst = std::max(worst, r4.max_rel_err);

        CentroidTable<double> table(K, P);
        Tensor<double> ct = random_tensor(rng, {K, P});
        table.table() = ct;
        auto zf = random_tensor(rng, {B, P});
        auto r5 = check([&](std::vector<Var<double>>& v) { return centroid_loss(v[0], g, table); }, {zf});
        worst = std::max(worst, r5.max_rel_err);
    }
    CHECK(worst < 1e-4);
    MESSAGE("max relative gradient error over all losses: ", worst);
}

TEST_CASE("loss weight validation") {
    LossWeights<double> w;
    w.tau = 0.0;
    CHECK_THROWS(w.validate());
    w = {};
    w.centroid_momentum = 1.0;
    CHECK_THROWS(w.validate());
    w = {};
    w.alpha = 1.0;
    CHECK_THROWS(w.validate());
    w = {};
    w.lambda_fp = -0.1;
    CHECK_THROWS(w.validate());
}
