#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avattr/nn.hpp"
#include "gradcheck.hpp"

using namespace avattr;
using gradcheck::check;
using gradcheck::random_tensor;

TEST_CASE("param store: named deterministic init, no duplicates") {
    ParamStore<float> a(42), b(42), c(43);
    auto p1 = a.create("w", {4, 4}, ParamStore<float>::Init::HeNormal, 4);
    auto p2 = b.create("w", {4, 4}, ParamStore<float>::Init::HeNormal, 4);
    auto p3 = c.create("w", {4, 4}, ParamStore<float>::Init::HeNormal, 4);
    CHECK(p1.val().data == p2.val().data);   // same seed, same name
    CHECK(p1.val().data != p3.val().data);   // different seed
    CHECK_THROWS(a.create("w", {2}, ParamStore<float>::Init::Zero));
    auto q = a.create("v", {4, 4}, ParamStore<float>::Init::HeNormal, 4);
    CHECK(q.val().data != p1.val().data);    // different name, different stream
}

TEST_CASE("multi-head attention matches finite differences") {
    ParamStore<double> ps(3);
    MultiHeadAttention<double> mha(ps, "mha", 8, 2);
    Rng rng(9);
    auto q = random_tensor(rng, {3, 8});
    auto kv = random_tensor(rng, {5, 8});
    auto r = check(
        [&](std::vector<Var<double>>& v) {
            return sum_all(pow_const(mha.forward(v[0], v[1], v[1]), 2.0));
        },
        {q, kv});
    CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("single-token attention equals the general path") {
    ParamStore<double> ps(4);
    MultiHeadAttention<double> mha(ps, "mha", 8, 4);
    Rng rng(10);
    auto kv = random_tensor(rng, {6, 8});
    Var<double> kvv(kv);
    auto fast = mha.forward_single_token(kvv);
    for (int64_t i = 0; i < 6; ++i) {
        // run each sample as its own length-1 sequence through full MHA;
        // the query only enters through softmax, which is 1 over one key
        auto qi = slice_rows(kvv, i, i + 1);  // arbitrary query
        auto general = mha.forward(qi, slice_rows(kvv, i, i + 1), slice_rows(kvv, i, i + 1));
        for (int64_t j = 0; j < 8; ++j)
            CHECK(fast.val().at(i, j) == doctest::Approx(general.val().at(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("backbone: shapes, per-sample independence, finite differences") {
    BackboneSpec spec = BackboneSpec::desk(3);
    ParamStore<double> ps(5);
    Backbone<double> net(ps, "bb", spec);
    Rng rng(11);
    auto x = random_tensor(rng, {2, 3, 16, 16}, 0.5);
    Var<double> vx(x);
    auto f = net.forward(vx);
    CHECK(f.val().shape == Shape{2, 64});
    CHECK(f.val().all_finite());

    // duplicating a sample duplicates its feature row exactly
    Tensor<double> x2 = x;
    std::copy_n(x.ptr(), 3 * 16 * 16, x2.ptr() + 3 * 16 * 16);
    auto f2 = net.forward(Var<double>(x2));
    for (int64_t j = 0; j < 64; ++j) CHECK(f2.val().at(0, j) == f2.val().at(1, j));

    // input gradient through the whole stack
    auto small = random_tensor(rng, {1, 3, 8, 8}, 0.5);
    BackboneSpec tiny;
    tiny.preset = "tiny";
    tiny.in_channels = 3;
    tiny.stem_channels = 4;
    tiny.stages = {{8, 1, 2}};
    tiny.gn_groups = 2;
    tiny.feature_dim = 8;
    ParamStore<double> ps2(6);
    Backbone<double> tiny_net(ps2, "tiny", tiny);
    auto r = check(
        [&](std::vector<Var<double>>& v) { return sum_all(pow_const(tiny_net.forward(v[0]), 2.0)); }, {small});
    CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("resnet presets expose their documented feature widths") {
    CHECK(BackboneSpec::resnet18(1).feature_dim == 512);
    CHECK(BackboneSpec::resnet50(3).feature_dim == 2048);
    CHECK_THROWS(BackboneSpec::from_preset("vgg", 3));
}

TEST_CASE("adapt_first_layer averages input channels") {
    Tensor<float> ones({4, 3, 3, 3}, 1.0f);
    auto mono = adapt_first_layer(ones);
    CHECK(mono.shape == Shape{4, 1, 3, 3});
    for (float v : mono.data) CHECK(v == 1.0f);

    Tensor<float> consts({1, 3, 2, 2});
    for (int c = 0; c < 3; ++c)
        for (int t = 0; t < 4; ++t) consts[c * 4 + t] = 0.3f * static_cast<float>(c + 1);
    auto m2 = adapt_first_layer(consts);
    for (float v : m2.data) CHECK(v == doctest::Approx(0.6f));

    Tensor<float> bad({2, 4, 3, 3});
    CHECK_THROWS_AS(adapt_first_layer(bad), std::invalid_argument);
}

TEST_CASE("adapted stem equals a third of the RGB response on gray input") {
    // adapted(x) == original(x,x,x) / 3 elementwise, bias excluded
    Rng rng(13);
    Tensor<double> w = random_tensor(rng, {5, 3, 3, 3});
    Tensor<double> zero_bias({5});
    Tensor<double> gray = random_tensor(rng, {1, 1, 8, 8});
    Tensor<double> rgb({1, 3, 8, 8});
    for (int c = 0; c < 3; ++c) std::copy_n(gray.ptr(), 64, rgb.ptr() + c * 64);

    auto mono = adapt_first_layer(w);
    auto adapted = conv2d(Var<double>(gray), Var<double>(mono), Var<double>(zero_bias), 1, 1);
    auto original = conv2d(Var<double>(rgb), Var<double>(w), Var<double>(zero_bias), 1, 1);
    for (int64_t i = 0; i < adapted.val().numel(); ++i)
        CHECK(adapted.val()[i] == doctest::Approx(original.val()[i] / 3.0).epsilon(1e-6));
}

TEST_CASE("dropout in Mlp2 is train-only") {
    ParamStore<float> ps(20);
    Mlp2<float> head(ps, "head", 8, 16, 2, 0.5);
    Tensor<float> x({4, 8});
    Rng fill(2);
    for (auto& v : x.data) v = static_cast<float>(fill.normal());
    Var<float> vx(x);

    auto eval1 = head.forward(vx, false, nullptr);
    auto eval2 = head.forward(vx, false, nullptr);
    CHECK(eval1.val().data == eval2.val().data);

    Rng d1 = Rng::stream(1, "drop", 0);
    Rng d2 = Rng::stream(1, "drop", 1);
    auto t1 = head.forward(vx, true, &d1);
    auto t2 = head.forward(vx, true, &d2);
    CHECK(t1.val().data != t2.val().data);  // different streams, different masks
}
