#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "tora2/checkpoint.hpp"
#include "tora2/nn.hpp"
#include "tora2/tensor.hpp"

using namespace tora2;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(std::string p) : path(std::move(p)) {}
    ~TempFile() { std::remove(path.c_str()); }
};

ParamStore toy_store(uint64_t seed) {
    ParamStore ps;
    Rng rng(seed);
    ps.add("enc.w", rng.randn({4, 3}, 0.3));
    ps.add("enc.b", rng.randn({1, 3}, 0.1));
    ps.add("head.w", rng.randn({3, 2}, 0.5));
    return ps;
}

// Deterministic toy objective: loss = 0.5*||w||^2, so grad = value.
void toy_grad_step(ParamStore& ps, AdamW& opt) {
    ps.zero_grads();
    for (int i = 0; i < ps.count(); ++i) ps.accumulate_grad(i, ps.value(i));
    opt.step(ps);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("save/load round trip is bit-exact and restores meta") {
    TempFile f("ckpt_roundtrip.bin");
    ParamStore ps = toy_store(1);
    CheckpointMeta meta;
    meta.step = 42;
    meta.config_hash = 0xabcdef0123456789ull;
    CheckpointIO::save(f.path, ps, meta);

    ParamStore fresh = toy_store(2);  // same names/shapes, different values
    bool differs = false;
    for (int i = 0; i < ps.count(); ++i)
        differs = differs || fresh.value(i).max_abs_diff(ps.value(i)) > 0.0;
    CHECK(differs);

    CheckpointMeta back = CheckpointIO::load(f.path, fresh);
    CHECK(back.step == 42);
    CHECK(back.config_hash == 0xabcdef0123456789ull);
    for (int i = 0; i < ps.count(); ++i)
        CHECK(fresh.value(i).max_abs_diff(ps.value(i)) == 0.0);

    CheckpointMeta peeked = CheckpointIO::peek(f.path);
    CHECK(peeked.step == 42);
    CHECK(peeked.config_hash == meta.config_hash);
}

TEST_CASE("optimizer state restore makes resumed runs identical") {
    TempFile f("ckpt_resume.bin");
    AdamWConfig ocfg;
    ocfg.lr = 0.05;

    // straight run: 5 steps
    ParamStore straight = toy_store(7);
    AdamW opt_straight(ocfg);
    for (int s = 0; s < 3; ++s) toy_grad_step(straight, opt_straight);

    // checkpoint after 3 steps, then keep going
    CheckpointIO::save(f.path, straight, {3, 99}, &opt_straight);
    for (int s = 0; s < 2; ++s) toy_grad_step(straight, opt_straight);

    // resume from the checkpoint in a fresh store/optimizer
    ParamStore resumed = toy_store(8);
    AdamW opt_resumed(ocfg);
    CheckpointMeta meta = CheckpointIO::load(f.path, resumed, &opt_resumed);
    CHECK(meta.step == 3);
    CHECK(opt_resumed.steps_taken() == opt_straight.steps_taken() - 2);
    for (int s = 0; s < 2; ++s) toy_grad_step(resumed, opt_resumed);

    for (int i = 0; i < straight.count(); ++i)
        CHECK(resumed.value(i).max_abs_diff(straight.value(i)) == 0.0);

    // loading without an optimizer still restores the values
    ParamStore vals_only = toy_store(9);
    CheckpointIO::load(f.path, vals_only);
    CHECK(vals_only.value(0).max_abs_diff(resumed.value(0)) > 0.0);  // resumed moved on
}

TEST_CASE("frozen flags are recorded but not applied on load") {
    TempFile f("ckpt_frozen.bin");
    ParamStore ps = toy_store(3);
    ps.set_frozen([](const std::string& n) { return n.rfind("enc.", 0) == 0; }, true);
    CHECK(ps.frozen_count() == 2);
    CheckpointIO::save(f.path, ps, {1, 0});

    ParamStore fresh = toy_store(4);
    CheckpointIO::load(f.path, fresh);
    CHECK(fresh.frozen_count() == 0);
}

TEST_CASE("mismatches and corrupt files are rejected with names") {
    TempFile f("ckpt_mismatch.bin");
    ParamStore ps = toy_store(5);
    CheckpointIO::save(f.path, ps, {0, 0});

    ParamStore wrong_count;
    Rng rng(6);
    wrong_count.add("enc.w", rng.randn({4, 3}, 0.3));
    CHECK_THROWS_WITH_AS(CheckpointIO::load(f.path, wrong_count), doctest::Contains("parameters"),
                         ValueError);

    ParamStore wrong_name;
    wrong_name.add("enc.w", rng.randn({4, 3}, 0.3));
    wrong_name.add("enc.bias", rng.randn({1, 3}, 0.1));
    wrong_name.add("head.w", rng.randn({3, 2}, 0.5));
    CHECK_THROWS_WITH_AS(CheckpointIO::load(f.path, wrong_name), doctest::Contains("enc.b"),
                         ValueError);

    ParamStore wrong_shape;
    wrong_shape.add("enc.w", rng.randn({4, 3}, 0.3));
    wrong_shape.add("enc.b", rng.randn({1, 4}, 0.1));
    wrong_shape.add("head.w", rng.randn({3, 2}, 0.5));
    CHECK_THROWS_WITH_AS(CheckpointIO::load(f.path, wrong_shape), doctest::Contains("enc.b"),
                         ValueError);

    std::string bytes = slurp(f.path);
    TempFile trunc("ckpt_trunc.bin");
    spit(trunc.path, bytes.substr(0, bytes.size() - 10));
    ParamStore ok = toy_store(5);
    CHECK_THROWS_WITH_AS(CheckpointIO::load(trunc.path, ok), doctest::Contains("truncated"),
                         ValueError);

    TempFile magic("ckpt_magic.bin");
    spit(magic.path, "NOTACKPT" + bytes.substr(8));
    CHECK_THROWS_WITH_AS(CheckpointIO::load(magic.path, ok), doctest::Contains("magic"),
                         ValueError);

    CHECK_THROWS_AS(CheckpointIO::load("missing_dir/nope.bin", ok), ValueError);
    CHECK_THROWS_AS(CheckpointIO::peek("missing_dir/nope.bin"), ValueError);
}
