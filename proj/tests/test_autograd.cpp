#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support/gradcheck.hpp"
#include "tora2/autograd.hpp"
#include "tora2/nn.hpp"

using namespace tora2;
using tora2::testing::grad_check_input;

namespace {
Tensor rand_t(std::vector<int64_t> shape, uint64_t seed, double std = 1.0) {
    Rng r(seed);
    return r.randn(std::move(shape), std);
}
}  // namespace

TEST_CASE("forward values: basic arithmetic") {
    Tape t;
    Var a = t.leaf(Tensor({1, 3}, {1.0, 2.0, 3.0}));
    Var b = t.leaf(Tensor({1, 3}, {4.0, 5.0, 6.0}));
    CHECK(t.val(add(a, b)).data[1] == 7.0);
    CHECK(t.val(sub(a, b)).data[0] == -3.0);
    CHECK(t.val(mul(a, b)).data[2] == 18.0);
    CHECK(t.val(scale(a, 2.0)).data[0] == 2.0);
    CHECK(t.val(sum_all(a)).data[0] == 6.0);
    CHECK(t.val(mean_all(a)).data[0] == 2.0);
}

TEST_CASE("forward values: matmul against hand computation") {
    Tape t;
    Var a = t.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    Var b = t.leaf(Tensor({2, 2}, {5, 6, 7, 8}));
    const Tensor& c = t.val(matmul(a, b));
    CHECK(c.at(0, 0) == 19.0);
    CHECK(c.at(0, 1) == 22.0);
    CHECK(c.at(1, 0) == 43.0);
    CHECK(c.at(1, 1) == 50.0);
    CHECK_THROWS_AS(matmul(a, t.leaf(Tensor({3, 2}))), ShapeError);
}

TEST_CASE("forward values: softmax rows sum to one and are shift invariant") {
    Tape t;
    Var a = t.leaf(Tensor({1, 3}, {1.0, 2.0, 3.0}));
    Var b = t.leaf(Tensor({1, 3}, {1001.0, 1002.0, 1003.0}));
    const Tensor& sa = t.val(softmax_rows(a));
    const Tensor& sb = t.val(softmax_rows(b));
    double sum = sa.data[0] + sa.data[1] + sa.data[2];
    CHECK(sum == doctest::Approx(1.0));
    CHECK(sa.max_abs_diff(sb) < 1e-12);
}

TEST_CASE("forward values: logsumexp is max-stable") {
    Tape t;
    Var a = t.leaf(Tensor({1, 2}, {1000.0, 1000.0}));
    CHECK(t.val(logsumexp_rows(a)).data[0] == doctest::Approx(1000.0 + std::log(2.0)));
}

TEST_CASE("backward: simple chain") {
    Tape t;
    Var x = t.leaf(Tensor::scalar(3.0), true);
    Var y = mul(x, x);  // x^2, dy/dx = 6
    t.backward(y);
    CHECK(t.grad(x).data[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: value reused twice accumulates") {
    Tape t;
    Var x = t.leaf(Tensor::scalar(2.0), true);
    Var y = add(mul(x, x), x);  // x^2 + x, dy/dx = 2x + 1 = 5
    t.backward(y);
    CHECK(t.grad(x).data[0] == doctest::Approx(5.0));
}

TEST_CASE("gradcheck: elementwise ops") {
    for (auto fn : {&tanh_op, &silu, &gelu, &exp_op}) {
        double err = grad_check_input(rand_t({3, 4}, 1), [fn](Tape& t, Var x) {
            return sum_all(mul((*fn)(x), (*fn)(x)));
        });
        CHECK(err < 1e-4);
    }
    // log needs positive input
    Tensor pos = rand_t({3, 4}, 2);
    for (double& v : pos.data) v = 1.0 + std::fabs(v);
    CHECK(grad_check_input(pos, [](Tape& t, Var x) { return sum_all(log_op(x)); }) < 1e-4);
    // relu away from the kink
    Tensor off = rand_t({3, 4}, 3);
    for (double& v : off.data) v += (v >= 0 ? 0.5 : -0.5);
    CHECK(grad_check_input(off, [](Tape& t, Var x) { return sum_all(relu(x)); }) < 1e-4);
}

TEST_CASE("gradcheck: matmul, transpose, reshape") {
    Tensor b = rand_t({4, 5}, 10);
    double err = grad_check_input(rand_t({3, 4}, 11), [&b](Tape& t, Var x) {
        Var bv = t.leaf(b);
        return mse(matmul(x, bv), t.leaf(Tensor::zeros({3, 5})));
    });
    CHECK(err < 1e-4);
    CHECK(grad_check_input(rand_t({3, 4}, 12), [](Tape& t, Var x) {
              return sum_all(mul(transpose(x), transpose(x)));
          }) < 1e-4);
    CHECK(grad_check_input(rand_t({3, 4}, 13), [](Tape& t, Var x) {
              Var r = reshape(x, {2, 6});
              return mse(r, t.leaf(Tensor::full({2, 6}, 0.3)));
          }) < 1e-4);
}

TEST_CASE("gradcheck: concat and slice") {
    CHECK(grad_check_input(rand_t({4, 3}, 20), [](Tape& t, Var x) {
              Var top = slice_rows(x, 0, 2);
              Var bot = slice_rows(x, 2, 2);
              Var cat = concat_rows({bot, top});
              return sum_all(mul(cat, cat));
          }) < 1e-4);
    CHECK(grad_check_input(rand_t({3, 6}, 21), [](Tape& t, Var x) {
              Var l = slice_cols(x, 0, 2);
              Var r = slice_cols(x, 2, 4);
              Var cat = concat_cols({r, l});
              return sum_all(mul(cat, cat));
          }) < 1e-4);
}

TEST_CASE("gradcheck: broadcasts") {
    Tensor row = rand_t({1, 4}, 30);
    CHECK(grad_check_input(rand_t({3, 4}, 31), [&row](Tape& t, Var x) {
              return sum_all(mul(row_broadcast_add(x, t.leaf(row)),
                                 row_broadcast_mul(x, t.leaf(row))));
          }) < 1e-4);
    // gradient w.r.t. the row operand
    Tensor x = rand_t({3, 4}, 32);
    CHECK(grad_check_input(rand_t({1, 4}, 33), [&x](Tape& t, Var r) {
              return sum_all(mul(row_broadcast_add(t.leaf(x), r),
                                 row_broadcast_mul(t.leaf(x), r)));
          }) < 1e-4);
}

TEST_CASE("gradcheck: reductions and normalizations") {
    CHECK(grad_check_input(rand_t({3, 4}, 40), [](Tape& t, Var x) {
              return sum_all(mul(mean_rows(x), mean_rows(x)));
          }) < 1e-4);
    CHECK(grad_check_input(rand_t({3, 4}, 41), [](Tape& t, Var x) {
              Var s = softmax_rows(x);
              return sum_all(mul(s, t.leaf(rand_t({3, 4}, 42))));
          }) < 1e-4);
    CHECK(grad_check_input(rand_t({3, 4}, 43), [](Tape& t, Var x) {
              return sum_all(logsumexp_rows(x));
          }) < 1e-4);
    CHECK(grad_check_input(rand_t({3, 4}, 44), [](Tape& t, Var x) {
              Var n = l2_normalize_rows(x);
              return sum_all(mul(n, t.leaf(rand_t({3, 4}, 45))));
          }) < 1e-4);
    CHECK(grad_check_input(rand_t({3, 3}, 46), [](Tape& t, Var x) {
              return sum_all(mul(diag_of(x), diag_of(x)));
          }) < 1e-4);
}

TEST_CASE("gradcheck: layer norm w.r.t. input, gain and bias") {
    ParamStore ps;
    Rng rng(50);
    int gain = ps.add("ln.gain", rng.randn({1, 5}, 1.0));
    int bias = ps.add("ln.bias", rng.randn({1, 5}, 1.0));
    int x = ps.add("x", rng.randn({4, 5}, 1.0));
    auto res = tora2::testing::grad_check(ps, [&](Tape& t, ParamStore& s) {
        Var y = layer_norm_rows(t.param(s, x), t.param(s, gain), t.param(s, bias));
        return sum_all(mul(y, t.leaf(rand_t({4, 5}, 51))));
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: fused attention head matches explicit softmax graph") {
    Tensor q = rand_t({5, 4}, 60, 0.7);
    Tensor k = rand_t({6, 4}, 61, 0.7);
    Tensor v = rand_t({6, 3}, 62, 0.7);
    double scl = 0.5;

    // values identical to the composed version
    Tape t;
    Var qv = t.leaf(q), kv = t.leaf(k), vv = t.leaf(v);
    Var fused = attention_head(qv, kv, vv, scl);
    Var composed = matmul(softmax_rows(scale(matmul(qv, transpose(kv)), scl)), vv);
    CHECK(t.val(fused).max_abs_diff(t.val(composed)) < 1e-12);

    // gradients w.r.t. each operand
    Tensor target = rand_t({5, 3}, 63);
    for (int which = 0; which < 3; ++which) {
        Tensor& in = which == 0 ? q : which == 1 ? k : v;
        double err = grad_check_input(in, [&, which](Tape& tp, Var x) {
            Var qq = which == 0 ? x : tp.leaf(q);
            Var kk = which == 1 ? x : tp.leaf(k);
            Var vv2 = which == 2 ? x : tp.leaf(v);
            return mse(attention_head(qq, kk, vv2, scl), tp.leaf(target));
        });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("gradcheck: gather and scatter") {
    CHECK(grad_check_input(rand_t({5, 3}, 70), [](Tape& t, Var x) {
              Var g = gather_rows(x, {4, 0, 0, 2});
              return sum_all(mul(g, g));
          }) < 1e-4);
    CHECK(grad_check_input(rand_t({2, 3, 3, 4}, 71), [](Tape& t, Var x) {
              Var g = gather_cells(x, {0, 5, 17, 5});
              return sum_all(mul(g, g));
          }) < 1e-4);
    Tensor rows = rand_t({3, 4}, 72);
    CHECK(grad_check_input(rand_t({2, 3, 3, 4}, 73), [&rows](Tape& t, Var x) {
              Var s = scatter_add_cells(x, t.leaf(rows), {1, 7, 7});
              return sum_all(mul(s, s));
          }) < 1e-4);
    CHECK(grad_check_input(rows, [](Tape& t, Var r) {
              Var vol = t.leaf(rand_t({2, 3, 3, 4}, 74));
              Var s = scatter_add_cells(vol, r, {1, 7, 7});
              return sum_all(mul(s, s));
          }) < 1e-4);
}

TEST_CASE("scatter_add_cells: duplicate cells accumulate") {
    Tape t;
    Var vol = t.leaf(Tensor::zeros({1, 2, 2, 1}));
    Var rows = t.leaf(Tensor({2, 1}, {1.0, 2.0}));
    const Tensor& out = t.val(scatter_add_cells(vol, rows, {3, 3}));
    CHECK(out.data[3] == doctest::Approx(3.0));
}

TEST_CASE("gradcheck: conv3d strided, padded, and w.r.t. every operand") {
    Tensor x = rand_t({4, 6, 6, 2}, 80, 0.5);
    Tensor w = rand_t({3, 3, 3, 2, 3}, 81, 0.3);
    Tensor b = rand_t({1, 3}, 82, 0.1);
    Conv3dSpec spec;
    spec.stride_t = 1;
    spec.stride_h = 2;
    spec.stride_w = 2;
    spec.pad_t = 1;
    spec.pad_h = 1;
    spec.pad_w = 1;
    // output dims: t (4+2-3)/1+1 = 4, h/w (6+2-3)/2+1 not integral -> use pad 0 stride 1 for h
    spec.stride_h = 1;
    spec.stride_w = 1;

    auto run = [&](Tape& t, Var xv, Var wv, Var bv) {
        Var y = conv3d(xv, wv, bv, spec);
        return sum_all(mul(y, y));
    };
    CHECK(grad_check_input(x, [&](Tape& t, Var xv) {
              return run(t, xv, t.leaf(w), t.leaf(b));
          }) < 1e-4);
    CHECK(grad_check_input(w, [&](Tape& t, Var wv) {
              return run(t, t.leaf(x), wv, t.leaf(b));
          }) < 1e-4);
    CHECK(grad_check_input(b, [&](Tape& t, Var bv) {
              return run(t, t.leaf(x), t.leaf(w), bv);
          }) < 1e-4);
}

TEST_CASE("conv3d: downsampling output shape") {
    Tape t;
    Var x = t.leaf(Tensor::zeros({8, 16, 16, 2}));
    Var w = t.leaf(Tensor::zeros({1, 4, 4, 2, 5}));
    Var b = t.leaf(Tensor::zeros({1, 5}));
    Conv3dSpec spec;
    spec.stride_h = 4;
    spec.stride_w = 4;
    const Tensor& y = t.val(conv3d(x, w, b, spec));
    CHECK(y.shape == std::vector<int64_t>{8, 4, 4, 5});
    // incompatible stride is rejected rather than silently truncated
    Conv3dSpec bad;
    bad.stride_h = 5;
    CHECK_THROWS_AS(conv3d(x, w, b, bad), ConfigError);
}

TEST_CASE("tape: frozen parameters receive no gradient") {
    ParamStore ps;
    Rng rng(90);
    int a = ps.add("train.w", rng.randn({2, 2}, 1.0));
    int f = ps.add("frozen.w", rng.randn({2, 2}, 1.0));
    ps.set_frozen([](const std::string& n) { return n.rfind("frozen.", 0) == 0; }, true);
    Tape t;
    Var loss = sum_all(mul(t.param(ps, a), t.param(ps, f)));
    t.backward(loss);
    double frozen_grad = 0.0, train_grad = 0.0;
    for (double v : ps.grad(f).data) frozen_grad += std::fabs(v);
    for (double v : ps.grad(a).data) train_grad += std::fabs(v);
    CHECK(frozen_grad == 0.0);
    CHECK(train_grad > 0.0);
}

TEST_CASE("tape: mse scalar and gradient for both sides") {
    Tensor a = rand_t({3, 4}, 91);
    Tensor b = rand_t({3, 4}, 92);
    CHECK(grad_check_input(a, [&b](Tape& t, Var x) { return mse(x, t.leaf(b)); }) < 1e-4);
    CHECK(grad_check_input(b, [&a](Tape& t, Var x) { return mse(t.leaf(a), x); }) < 1e-4);
    Tape t;
    CHECK(t.val(mse(t.leaf(a), t.leaf(a))).data[0] == 0.0);
}

TEST_CASE("tape: mul_scalar_var routes gradient to both operands") {
    ParamStore ps;
    Rng rng(93);
    int s = ps.add("alpha", Tensor::scalar(0.7));
    int x = ps.add("x", rng.randn({3, 3}, 1.0));
    auto res = tora2::testing::grad_check(ps, [&](Tape& t, ParamStore& st) {
        Var y = mul_scalar_var(t.param(st, x), tanh_op(t.param(st, s)));
        return sum_all(mul(y, y));
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("tape: backward rejects non-scalar roots and foreign vars") {
    Tape t;
    Var x = t.leaf(Tensor::zeros({2, 2}), true);
    CHECK_THROWS_AS(t.backward(x), ShapeError);
    Tape other;
    CHECK_THROWS_AS(other.val(x), ValueError);
}
