#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support/gradcheck.hpp"
#include "tora2/nn.hpp"

using namespace tora2;

TEST_CASE("param store: names, lookup, duplicates") {
    ParamStore ps;
    Rng rng(1);
    int a = ps.add("enc.w", rng.randn({2, 3}, 1.0));
    int b = ps.add("enc.b", Tensor::zeros({1, 3}));
    CHECK(ps.count() == 2);
    CHECK(ps.find("enc.w") == a);
    CHECK(ps.find("missing") == -1);
    CHECK(ps.require("enc.b") == b);
    CHECK_THROWS_AS(ps.require("missing"), ValueError);
    CHECK_THROWS_AS(ps.add("enc.w", Tensor::zeros({1, 1})), ValueError);
    CHECK(ps.names() == std::vector<std::string>{"enc.w", "enc.b"});
}

TEST_CASE("param store: freezing by predicate") {
    ParamStore ps;
    Rng rng(2);
    ps.add("prior.a", rng.randn({1, 1}, 1.0));
    ps.add("prior.b", rng.randn({1, 1}, 1.0));
    ps.add("adapter.a", rng.randn({1, 1}, 1.0));
    ps.set_frozen([](const std::string& n) { return n.rfind("prior.", 0) == 0; }, true);
    CHECK(ps.frozen_count() == 2);
    CHECK(ps.frozen(0));
    CHECK_FALSE(ps.frozen(2));
}

TEST_CASE("adamw: decays toward zero on zero-gradient loss with weight decay") {
    ParamStore ps;
    int p = ps.add("w", Tensor::full({1, 1}, 1.0));
    AdamW opt(AdamWConfig{.lr = 0.1, .weight_decay = 0.5});
    ps.zero_grads();
    double before = ps.value(p).data[0];
    opt.step(ps);
    CHECK(ps.value(p).data[0] == doctest::Approx(before * (1.0 - 0.1 * 0.5)));
}

TEST_CASE("adamw: first step moves by ~lr against the gradient sign") {
    ParamStore ps;
    int p = ps.add("w", Tensor::scalar(0.0));
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    ps.grad(p).data[0] = 3.0;
    opt.step(ps);
    // bias-corrected first step is -lr * g/|g| up to eps
    CHECK(ps.value(p).data[0] == doctest::Approx(-0.01).epsilon(1e-3));
}

TEST_CASE("adamw: frozen parameters do not move") {
    ParamStore ps;
    int p = ps.add("frozen.w", Tensor::scalar(2.0));
    ps.set_frozen([](const std::string&) { return true; }, true);
    ps.grad(p).data[0] = 5.0;
    AdamW opt(AdamWConfig{});
    opt.step(ps);
    CHECK(ps.value(p).data[0] == 2.0);
}

TEST_CASE("adamw: drives a quadratic to its minimum") {
    ParamStore ps;
    Rng rng(3);
    int p = ps.add("w", rng.randn({1, 4}, 2.0));
    AdamWConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    Tensor target({1, 4}, {1.0, -2.0, 0.5, 3.0});
    for (int i = 0; i < 800; ++i) {
        ps.zero_grads();
        Tape t;
        Var loss = mse(t.param(ps, p), t.leaf(target));
        t.backward(loss);
        opt.step(ps);
    }
    CHECK(ps.value(p).max_abs_diff(target) < 1e-3);
}

TEST_CASE("linear: shapes, zero-init option and gradients") {
    ParamStore ps;
    Rng rng(4);
    Linear lin = Linear::create(ps, "lin", 3, 5, rng, 0.2);
    Tape t;
    Var x = t.leaf(rng.randn({2, 3}, 1.0));
    const Tensor& y = t.val(lin.forward(t, ps, x));
    CHECK(y.shape == std::vector<int64_t>{2, 5});

    Linear z = Linear::create(ps, "zlin", 3, 5, rng, 0.2, /*zero_init=*/true);
    Tape t2;
    const Tensor& y2 = t2.val(z.forward(t2, ps, t2.leaf(rng.randn({2, 3}, 1.0))));
    CHECK(y2.max_abs_diff(Tensor::zeros({2, 5})) == 0.0);

    Tensor target = rng.randn({2, 5}, 1.0);
    auto res = tora2::testing::grad_check(ps, [&](Tape& tp, ParamStore& s) {
        return mse(lin.forward(tp, s, tp.leaf(Tensor::full({2, 3}, 0.4))), tp.leaf(target));
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("layer norm params: unit gain zero bias at init") {
    ParamStore ps;
    LayerNormParams ln = LayerNormParams::create(ps, "ln", 4);
    Tape t;
    Var x = t.leaf(Tensor({2, 4}, {1, 2, 3, 4, -1, 0, 1, 2}));
    const Tensor& y = t.val(ln.forward(t, ps, x));
    for (int64_t r = 0; r < 2; ++r) {
        double mean = 0.0, var = 0.0;
        for (int64_t c = 0; c < 4; ++c) mean += y.at(r, c);
        mean /= 4.0;
        for (int64_t c = 0; c < 4; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
        CHECK(std::fabs(mean) < 1e-12);
        CHECK(var / 4.0 == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("multi-head attention: self and cross shapes, gradcheck") {
    ParamStore ps;
    Rng rng(5);
    MultiHeadAttention mha = MultiHeadAttention::create(ps, "attn", 8, 2, rng, 0.3);
    Tape t;
    Var x = t.leaf(rng.randn({6, 8}, 1.0));
    Var ctx = t.leaf(rng.randn({3, 8}, 1.0));
    CHECK(t.val(mha.forward(t, ps, x, x)).shape == std::vector<int64_t>{6, 8});
    CHECK(t.val(mha.forward(t, ps, x, ctx)).shape == std::vector<int64_t>{6, 8});
    CHECK_THROWS_AS(MultiHeadAttention::create(ps, "bad", 6, 4, rng, 0.3), ConfigError);

    Tensor xin = rng.randn({4, 8}, 0.8);
    Tensor target = rng.randn({4, 8}, 1.0);
    auto res = tora2::testing::grad_check(ps, [&](Tape& tp, ParamStore& s) {
        return mse(mha.forward(tp, s, tp.leaf(xin), tp.leaf(xin)), tp.leaf(target));
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("multi-head attention: zero-init output projection gives zero output") {
    ParamStore ps;
    Rng rng(6);
    MultiHeadAttention mha =
        MultiHeadAttention::create(ps, "attn", 8, 2, rng, 0.3, /*zero_init_out=*/true);
    Tape t;
    Var x = t.leaf(rng.randn({5, 8}, 1.0));
    CHECK(t.val(mha.forward(t, ps, x, x)).max_abs_diff(Tensor::zeros({5, 8})) == 0.0);
}

TEST_CASE("mlp: gradcheck through gelu") {
    ParamStore ps;
    Rng rng(7);
    Mlp mlp = Mlp::create(ps, "ff", 4, 8, 4, rng, 0.4);
    Tensor xin = rng.randn({3, 4}, 1.0);
    Tensor target = rng.randn({3, 4}, 1.0);
    auto res = tora2::testing::grad_check(ps, [&](Tape& tp, ParamStore& s) {
        return mse(mlp.forward(tp, s, tp.leaf(xin)), tp.leaf(target));
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("sinusoidal embedding: bounded, distinct, deterministic") {
    Tensor a = sinusoidal_embedding(10.0, 16);
    Tensor b = sinusoidal_embedding(11.0, 16);
    Tensor a2 = sinusoidal_embedding(10.0, 16);
    CHECK(a.max_abs_diff(a2) == 0.0);
    CHECK(a.max_abs_diff(b) > 1e-3);
    for (double v : a.data) CHECK(std::fabs(v) <= 1.0);
    CHECK_THROWS_AS(sinusoidal_embedding(1.0, 15), ConfigError);
}
