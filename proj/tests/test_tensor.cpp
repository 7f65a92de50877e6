#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tora2/tensor.hpp"

using namespace tora2;

TEST_CASE("tensor construction and accessors") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.ndim() == 2);
    t.at(1, 2) = 5.0;
    CHECK(t.data[5] == 5.0);
    CHECK(t.shape_str() == "(2,3)");

    Tensor v({2, 2, 2, 3});
    v.at4(1, 1, 1, 2) = 7.0;
    CHECK(v.data[v.numel() - 1] == 7.0);

    CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), ShapeError);
    CHECK(Tensor::full({2, 2}, 3.0).data[3] == 3.0);
    CHECK(Tensor::scalar(4.0).numel() == 1);
}

TEST_CASE("finite checks and diffs") {
    Tensor a = Tensor::full({2, 2}, 1.0);
    Tensor b = Tensor::full({2, 2}, 1.5);
    CHECK(a.max_abs_diff(b) == doctest::Approx(0.5));
    CHECK(a.all_finite());
    a.data[0] = std::nan("");
    CHECK_FALSE(a.all_finite());
}

TEST_CASE("rng determinism and stream independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());

    Rng c(42);
    Rng c1 = c.fork("weights");
    Rng d(42);
    Rng d1 = d.fork("weights");
    CHECK(c1.normal() == d1.normal());

    // Different streams from the same parent diverge.
    Rng e(42);
    Rng noise = e.fork("noise");
    Rng f(42);
    Rng weights = f.fork("weights");
    CHECK(noise.normal() != weights.normal());
}

TEST_CASE("rng normal moments") {
    Rng r(7);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        sum += x;
        sq += x * x;
    }
    double mean = sum / n;
    double var = sq / n - mean * mean;
    CHECK(std::fabs(mean) < 0.01);
    CHECK(std::fabs(var - 1.0) < 0.02);
}

TEST_CASE("rng randint bounds") {
    Rng r(11);
    for (int i = 0; i < 1000; ++i) {
        int64_t v = r.randint(7);
        CHECK(v >= 0);
        CHECK(v < 7);
    }
    CHECK_THROWS_AS(r.randint(0), ValueError);
}

TEST_CASE("fnv1a64 is stable") {
    // Reference value for "abc" from the published FNV-1a test vectors.
    CHECK(fnv1a64(std::string("abc")) == 0xe71fa2190541574bull);
    CHECK(fnv1a64(std::string("")) == 0xcbf29ce484222325ull);
}
