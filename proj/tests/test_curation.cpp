#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "doctest.h"
#include "tora2/curation.hpp"
#include "tora2/synth.hpp"
#include "tora2/tensor.hpp"

using namespace tora2;

namespace {

// A record that passes every rule; individual tests perturb one field.
VideoRecord passing_record() {
    VideoRecord r;
    r.id = "clip-0";
    r.width = 1280;
    r.height = 720;
    r.duration = 5.0;
    r.caption = "a red cube drifts";
    r.aesthetic = 6.0;
    r.flow = 3.0;
    r.zoom = 0.5;
    r.camera_angle = 0.0;
    r.decoded_ok = true;
    r.word_count = 4;
    return r;
}

std::vector<std::string> reasons(const VideoRecord& r) {
    return filter_video(r).rejection_reasons;
}

bool rejected_only_for(const VideoRecord& r, const std::string& rule) {
    FilterDecision d = filter_video(r);
    return !d.accepted && d.rejection_reasons == std::vector<std::string>{rule};
}

Tensor mask_with_block(int64_t h, int64_t w, int64_t y0, int64_t x0, int64_t bh, int64_t bw) {
    Tensor m = Tensor::zeros({h, w});
    for (int64_t y = y0; y < y0 + bh; ++y)
        for (int64_t x = x0; x < x0 + bw; ++x) m.data[size_t(y * w + x)] = 1.0;
    return m;
}

// Two-sprite test scene with linear paths, so ground-truth centers are exact.
SceneSpec two_sprite_scene() {
    SceneSpec s;
    s.frames = 8;
    s.height = 64;
    s.width = 64;
    s.ref_res = 32;
    SpriteSpec a;
    a.noun = "cube";
    a.color = "red";
    a.texture = 1;
    a.radius = 6.0;
    a.control = {{12.0, 12.0}, {40.0, 20.0}};
    SpriteSpec b;
    b.noun = "ball";
    b.color = "blue";
    b.texture = 2;
    b.radius = 6.0;
    b.control = {{50.0, 50.0}, {20.0, 48.0}};
    s.sprites = {a, b};
    return s;
}

std::vector<std::array<double, 2>> gt_track(const SceneSpec& s, size_t sprite) {
    std::vector<std::array<double, 2>> out;
    for (int64_t f = 0; f < s.frames; ++f) {
        double u = s.frames > 1 ? double(f) / double(s.frames - 1) : 0.0;
        out.push_back(path_point(s.sprites[sprite].control, u));
    }
    return out;
}

// Segmentation oracle: paints the sprite's exact footprint at its ground-truth
// center. Unknown words report a detector miss.
struct OracleSegmenter : Segmenter {
    SceneSpec scene;
    explicit OracleSegmenter(SceneSpec s) : scene(std::move(s)) {}
    std::optional<Tensor> segment(const Tensor& video, int64_t frame,
                                  const std::string& word) override {
        for (size_t i = 0; i < scene.sprites.size(); ++i) {
            const SpriteSpec& sp = scene.sprites[i];
            if (sp.noun != word) continue;
            std::array<double, 2> c = gt_track(scene, i)[size_t(frame)];
            int64_t h = video.shape[1], w = video.shape[2];
            Tensor m = Tensor::zeros({h, w});
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    double dx = double(x) + 0.5 - c[0], dy = double(y) + 0.5 - c[1];
                    // squares and circles both fit inside this box; the gate
                    // and centroid only need a symmetric footprint
                    if (std::fabs(dx) <= sp.radius && std::fabs(dy) <= sp.radius)
                        m.data[size_t(y * w + x)] = 1.0;
                }
            return m;
        }
        return std::nullopt;
    }
};

// Tracking oracle: snaps the query point to the nearest sprite's ground-truth
// track and returns that track exactly; far-away queries fail.
struct OracleTracker : PointTracker {
    SceneSpec scene;
    explicit OracleTracker(SceneSpec s) : scene(std::move(s)) {}
    std::vector<std::array<double, 2>> track(const Tensor&, int64_t anchor,
                                             const std::array<double, 2>& point) override {
        for (size_t i = 0; i < scene.sprites.size(); ++i) {
            std::vector<std::array<double, 2>> gt = gt_track(scene, i);
            double dx = gt[size_t(anchor)][0] - point[0], dy = gt[size_t(anchor)][1] - point[1];
            if (dx * dx + dy * dy <= 9.0) return gt;
        }
        return {};
    }
};

struct NullSegmenter : Segmenter {
    std::optional<Tensor> segment(const Tensor&, int64_t, const std::string&) override {
        return std::nullopt;
    }
};

struct FullFrameSegmenter : Segmenter {
    std::optional<Tensor> segment(const Tensor& video, int64_t, const std::string&) override {
        return Tensor::full({video.shape[1], video.shape[2]}, 1.0);
    }
};

}  // namespace

TEST_CASE("filter examples: one failing score yields exactly that reason") {
    VideoRecord r = passing_record();
    CHECK(filter_video(r).accepted);
    CHECK(filter_video(r).rejection_reasons.empty());

    r.aesthetic = 4.9;
    CHECK(rejected_only_for(r, "aesthetic"));

    r = passing_record();
    r.camera_angle = 45.0;
    CHECK(rejected_only_for(r, "camera-angle"));
}

TEST_CASE("rule boundaries on both sides") {
    VideoRecord r = passing_record();

    r.decoded_ok = false;
    CHECK(rejected_only_for(r, "decode"));

    r = passing_record();
    r.height = 719;
    CHECK(rejected_only_for(r, "resolution"));
    r.height = 720;
    CHECK(filter_video(r).accepted);
    r.height = 2000;
    r.width = 719;  // the smaller dimension decides
    CHECK(rejected_only_for(r, "resolution"));

    r = passing_record();
    r.aesthetic = 5.0;  // must strictly exceed 5
    CHECK(rejected_only_for(r, "aesthetic"));
    r.aesthetic = 5.0001;
    CHECK(filter_video(r).accepted);

    r = passing_record();
    r.flow = 2.0;  // must strictly exceed 2
    CHECK(rejected_only_for(r, "flow"));
    r.flow = 2.0001;
    CHECK(filter_video(r).accepted);

    r = passing_record();
    r.zoom = 0.4;
    CHECK(filter_video(r).accepted);
    r.zoom = 0.6;
    CHECK(filter_video(r).accepted);
    r.zoom = 0.3999;
    CHECK(rejected_only_for(r, "zoom"));
    r.zoom = 0.6001;
    CHECK(rejected_only_for(r, "zoom"));

    r = passing_record();
    for (double ok : {0.0, 30.0, 150.0, 200.0, 330.0, 359.9}) {
        r.camera_angle = ok;
        CHECK(filter_video(r).accepted);
    }
    for (double bad : {30.1, 149.9, 200.1, 329.9}) {
        r.camera_angle = bad;
        CHECK(rejected_only_for(r, "camera-angle"));
    }

    r = passing_record();
    r.word_count = 120;
    CHECK(filter_video(r).accepted);
    r.word_count = 121;
    CHECK(rejected_only_for(r, "caption-length"));

    r = passing_record();
    r.caption = "nothing to see here";
    CHECK(rejected_only_for(r, "entity-words"));
    r.caption = "three cats sit";  // plural entity
    CHECK(rejected_only_for(r, "entity-words"));
    r.caption = "a cat watches two cats";  // singular present but plural too
    CHECK(rejected_only_for(r, "entity-words"));
    r.caption = "a cat watches";
    CHECK(filter_video(r).accepted);
}

TEST_CASE("filtering is a pure conjunction of independent rules") {
    // Value pools per rule; the chosen pass/fail flags are the oracle.
    Rng rng(4242);
    const std::vector<double> aes_pass = {5.1, 6.0, 9.5}, aes_fail = {5.0, 4.9, 1.0};
    const std::vector<double> flow_pass = {2.1, 3.0, 8.0}, flow_fail = {2.0, 1.9, 0.0};
    const std::vector<double> zoom_pass = {0.4, 0.5, 0.6}, zoom_fail = {0.0, 0.39, 0.61, 1.0};
    const std::vector<double> ang_pass = {0.0, 15.0, 30.0, 150.0, 175.0, 200.0, 330.0, 359.0};
    const std::vector<double> ang_fail = {30.5, 45.0, 100.0, 149.0, 201.0, 300.0, 329.0};
    const std::vector<std::array<int64_t, 2>> res_pass = {{1280, 720}, {720, 1280}, {1920, 1080}};
    const std::vector<std::array<int64_t, 2>> res_fail = {{640, 480}, {1280, 719}, {100, 3000}};
    const std::vector<int64_t> words_pass = {1, 50, 120}, words_fail = {121, 200};
    const std::vector<std::string> cap_pass = {"a red cube drifts", "the blue ball and a star"};
    const std::vector<std::string> cap_fail = {"nothing here", "", "two cats and a dog"};

    auto pick_d = [&](const std::vector<double>& v) { return v[size_t(rng.randint(int64_t(v.size())))]; };
    auto pick_s = [&](const std::vector<std::string>& v) { return v[size_t(rng.randint(int64_t(v.size())))]; };

    for (int it = 0; it < 1000; ++it) {
        VideoRecord r;
        r.id = "case-" + std::to_string(it);
        r.duration = 5.0;
        std::vector<std::string> expect;
        bool ok;

        ok = rng.randint(2) == 0;
        r.decoded_ok = ok;
        if (!ok) expect.push_back("decode");

        ok = rng.randint(2) == 0;
        auto res = ok ? res_pass[size_t(rng.randint(int64_t(res_pass.size())))]
                      : res_fail[size_t(rng.randint(int64_t(res_fail.size())))];
        r.width = res[0];
        r.height = res[1];
        if (!ok) expect.push_back("resolution");

        ok = rng.randint(2) == 0;
        r.aesthetic = ok ? pick_d(aes_pass) : pick_d(aes_fail);
        if (!ok) expect.push_back("aesthetic");

        ok = rng.randint(2) == 0;
        r.flow = ok ? pick_d(flow_pass) : pick_d(flow_fail);
        if (!ok) expect.push_back("flow");

        ok = rng.randint(2) == 0;
        r.zoom = ok ? pick_d(zoom_pass) : pick_d(zoom_fail);
        if (!ok) expect.push_back("zoom");

        ok = rng.randint(2) == 0;
        r.camera_angle = ok ? pick_d(ang_pass) : pick_d(ang_fail);
        if (!ok) expect.push_back("camera-angle");

        ok = rng.randint(2) == 0;
        r.word_count = ok ? words_pass[size_t(rng.randint(3))] : words_fail[size_t(rng.randint(2))];
        if (!ok) expect.push_back("caption-length");

        ok = rng.randint(2) == 0;
        r.caption = ok ? pick_s(cap_pass) : pick_s(cap_fail);
        if (!ok) expect.push_back("entity-words");

        FilterDecision d = filter_video(r);
        CHECK(d.rejection_reasons == expect);
        CHECK(d.accepted == expect.empty());
    }
}

TEST_CASE("fixing one failing rule removes exactly that reason") {
    VideoRecord all_fail;
    all_fail.id = "worst";
    all_fail.decoded_ok = false;
    all_fail.width = 640;
    all_fail.height = 480;
    all_fail.aesthetic = 1.0;
    all_fail.flow = 0.5;
    all_fail.zoom = 0.9;
    all_fail.camera_angle = 90.0;
    all_fail.word_count = 500;
    all_fail.caption = "two cats";
    CHECK(reasons(all_fail) == filter_rule_ids());

    auto fixed_removes = [&](void (*fix)(VideoRecord&), const std::string& rule) {
        VideoRecord r = all_fail;
        fix(r);
        std::vector<std::string> want = filter_rule_ids();
        want.erase(std::find(want.begin(), want.end(), rule));
        return reasons(r) == want;
    };
    CHECK(fixed_removes([](VideoRecord& r) { r.decoded_ok = true; }, "decode"));
    CHECK(fixed_removes([](VideoRecord& r) { r.width = r.height = 1080; }, "resolution"));
    CHECK(fixed_removes([](VideoRecord& r) { r.aesthetic = 7.0; }, "aesthetic"));
    CHECK(fixed_removes([](VideoRecord& r) { r.flow = 4.0; }, "flow"));
    CHECK(fixed_removes([](VideoRecord& r) { r.zoom = 0.5; }, "zoom"));
    CHECK(fixed_removes([](VideoRecord& r) { r.camera_angle = 180.0; }, "camera-angle"));
    CHECK(fixed_removes([](VideoRecord& r) { r.word_count = 2; }, "caption-length"));
    CHECK(fixed_removes([](VideoRecord& r) { r.caption = "a cat"; }, "entity-words"));
}

TEST_CASE("entity word extraction over the lexicon") {
    CHECK(extract_entity_words("a red cube and a blue ball") ==
          std::vector<std::string>{"cube", "ball"});
    CHECK(extract_entity_words("") == std::vector<std::string>{});
    CHECK(extract_entity_words("The CUBE, a ball.") == std::vector<std::string>{"cube", "ball"});
    CHECK(extract_entity_words("ball ball ball") == std::vector<std::string>{"ball"});
    CHECK(extract_entity_words("nothing matches") == std::vector<std::string>{});

    CHECK(plural_entity_words("cats") == std::vector<std::string>{"cat"});
    CHECK(plural_entity_words("the cubes and stars drift") ==
          std::vector<std::string>{"cube", "star"});
    CHECK(plural_entity_words("a cat and a cube") == std::vector<std::string>{});
    // a bare "s" or a non-lexicon plural is not an entity
    CHECK(plural_entity_words("s las") == std::vector<std::string>{});
}

TEST_CASE("mask sanity gate: area band and fragmentation") {
    RulesConfig rules;

    EntityMask full{Tensor::full({24, 24}, 1.0), 0, "cube"};
    CHECK_FALSE(mask_ok(full, 24 * 24, rules));  // whole frame is too large

    EntityMask speck{mask_with_block(10, 10, 4, 4, 1, 1), 0, "cube"};
    CHECK_FALSE(mask_ok(speck, 1280 * 720, rules));  // one pixel on 720p is too small

    EntityMask blob{mask_with_block(100, 100, 10, 10, 10, 100 / 10), 0, "cube"};
    // 10x10 block = 100 px of 10000 = 1% — inside the band, one component
    CHECK(mask_ok(blob, 100 * 100, rules));

    // area boundaries, inclusive: 0.5% and 60% of a 1000-px frame
    EntityMask five{mask_with_block(10, 100, 0, 0, 1, 5), 0, "cube"};
    CHECK(mask_ok(five, 1000, rules));
    EntityMask four{mask_with_block(10, 100, 0, 0, 1, 4), 0, "cube"};
    CHECK_FALSE(mask_ok(four, 1000, rules));
    EntityMask sixh{mask_with_block(10, 100, 0, 0, 6, 100), 0, "cube"};
    CHECK(mask_ok(sixh, 1000, rules));
    EntityMask sixh1{mask_with_block(10, 100, 0, 0, 6, 100), 0, "cube"};
    sixh1.mask.data[999] = 1.0;  // 601 px
    CHECK_FALSE(mask_ok(sixh1, 1000, rules));

    // fragmentation: two 4-connected components split 80/20 passes, 79/21 fails
    Tensor m = Tensor::zeros({100, 100});
    for (int64_t x = 0; x < 80; ++x) m.data[size_t(0 * 100 + x)] = 1.0;
    for (int64_t x = 0; x < 20; ++x) m.data[size_t(50 * 100 + x)] = 1.0;
    CHECK(mask_ok({m, 0, "cube"}, 100 * 100, rules));
    m.data[79] = 0.0;
    m.data[size_t(50 * 100 + 20)] = 1.0;  // now 79/21
    CHECK_FALSE(mask_ok({m, 0, "cube"}, 100 * 100, rules));

    // diagonal touch is not 4-connected
    Tensor d = Tensor::zeros({100, 100});
    for (int64_t x = 0; x < 50; ++x) d.data[size_t(x * 100 + x)] = 1.0;
    CHECK_FALSE(mask_ok({d, 0, "cube"}, 100 * 100, rules));
}

TEST_CASE("triplets from an oracle detector match ground truth exactly") {
    SceneSpec scene = two_sprite_scene();
    TrainSample sample = synthesize_scene(scene, 11);
    OracleSegmenter seg(scene);
    OracleTracker tracker(scene);

    TripletResult res =
        build_triplets(sample.video, "the red cube glides and the blue ball drifts", seg, tracker);
    REQUIRE(res.rows.size() == 2);
    CHECK(res.skipped.empty());
    CHECK(res.rows[0].word == "cube");
    CHECK(res.rows[1].word == "ball");
    for (size_t i = 0; i < 2; ++i) {
        std::vector<std::array<double, 2>> gt = gt_track(scene, i);
        REQUIRE(res.rows[i].tracklet.points.size() == size_t(scene.frames));
        for (int64_t f = 0; f < scene.frames; ++f) {
            const TrajPoint& p = res.rows[i].tracklet.points[size_t(f)];
            CHECK(p.frame == f);
            CHECK(p.x == doctest::Approx(gt[size_t(f)][0]).epsilon(1e-12));
            CHECK(p.y == doctest::Approx(gt[size_t(f)][1]).epsilon(1e-12));
        }
        // the crop covers the sprite footprint, nothing more
        CHECK(res.rows[i].crop.shape[0] == 12);
        CHECK(res.rows[i].crop.shape[1] == 12);
    }
}

TEST_CASE("triplet construction skips and logs failing entities") {
    SceneSpec scene = two_sprite_scene();
    TrainSample sample = synthesize_scene(scene, 11);

    // unknown word: segmentation misses, others still emitted
    OracleSegmenter seg(scene);
    OracleTracker tracker(scene);
    TripletResult res = build_triplets(sample.video, "a cube and a ball near a star", seg, tracker);
    CHECK(res.rows.size() == 2);
    REQUIRE(res.skipped.size() == 1);
    CHECK(res.skipped[0] == "star: segmentation failed at frame 0");

    // detector that never fires: everything is skipped, nothing thrown
    NullSegmenter none;
    res = build_triplets(sample.video, "a cube and a ball", none, tracker);
    CHECK(res.rows.empty());
    CHECK(res.skipped.size() == 2);

    // full-frame masks fail the sanity gate
    FullFrameSegmenter full;
    res = build_triplets(sample.video, "a cube", full, tracker);
    CHECK(res.rows.empty());
    REQUIRE(res.skipped.size() == 1);
    CHECK(res.skipped[0] == "cube: mask rejected at frame 0");

    // tracker that cannot follow the point
    struct LostTracker : PointTracker {
        std::vector<std::array<double, 2>> track(const Tensor&, int64_t,
                                                 const std::array<double, 2>&) override {
            return {};
        }
    } lost;
    res = build_triplets(sample.video, "a cube", seg, lost);
    CHECK(res.rows.empty());
    REQUIRE(res.skipped.size() == 1);
    CHECK(res.skipped[0].find("tracker pass 1") != std::string::npos);

    CHECK_THROWS_AS(build_triplets(Tensor::zeros({4, 4}), "a cube", seg, tracker), ValueError);
}

TEST_CASE("video record JSONL round trip and validation") {
    VideoRecord r = passing_record();
    VideoRecord back = parse_video_record(video_record_json(r));
    CHECK(back.id == r.id);
    CHECK(back.width == r.width);
    CHECK(back.height == r.height);
    CHECK(back.duration == r.duration);
    CHECK(back.caption == r.caption);
    CHECK(back.aesthetic == r.aesthetic);
    CHECK(back.flow == r.flow);
    CHECK(back.zoom == r.zoom);
    CHECK(back.camera_angle == r.camera_angle);
    CHECK(back.decoded_ok == r.decoded_ok);
    CHECK(back.word_count == r.word_count);

    // word_count is derived from the caption when absent
    VideoRecord derived = parse_video_record(
        R"({"id":"x","width":1280,"height":720,"duration":1.0,"caption":"a red  cube drifts",)"
        R"("aesthetic":6,"flow":3,"zoom":0.5,"camera_angle":0,"decoded_ok":true})");
    CHECK(derived.word_count == 4);

    // unknown keys are upstream metadata, not errors
    CHECK_NOTHROW(parse_video_record(
        R"({"id":"x","width":1280,"height":720,"duration":1.0,"caption":"a cube",)"
        R"("aesthetic":6,"flow":3,"zoom":0.5,"camera_angle":0,"decoded_ok":true,"source":"web"})"));

    CHECK_THROWS_WITH_AS(parse_video_record("{}"), doctest::Contains("'id'"), ValueError);
    CHECK_THROWS_WITH_AS(
        parse_video_record(
            R"({"id":"x","width":1280,"height":720,"duration":1.0,"caption":"a cube",)"
            R"("flow":3,"zoom":0.5,"camera_angle":0,"decoded_ok":true})"),
        doctest::Contains("'aesthetic'"), ValueError);
    CHECK_THROWS_WITH_AS(
        parse_video_record(
            R"({"id":"x","width":1280,"height":720,"duration":1.0,"caption":"a cube",)"
            R"("aesthetic":6,"flow":3,"zoom":0.5,"camera_angle":360,"decoded_ok":true})"),
        doctest::Contains("camera_angle"), ValueError);
    CHECK_THROWS_AS(parse_video_record("not json"), ValueError);
    CHECK_THROWS_AS(parse_video_record("[1,2]"), ValueError);

    std::string dec = filter_decision_json(r, filter_video(r));
    CHECK(dec.find("\"accepted\":true") != std::string::npos);
    CHECK(dec.find("\"id\":\"clip-0\"") != std::string::npos);
}

TEST_CASE("rules config: defaults, overrides, unknown keys") {
    RulesConfig def = parse_rules_config("{}");
    CHECK(def.min_dim == 720);
    CHECK(def.min_aesthetic == 5.0);
    CHECK(def.min_flow == 2.0);
    CHECK(def.zoom_lo == 0.4);
    CHECK(def.zoom_hi == 0.6);
    CHECK(def.max_caption_words == 120);
    REQUIRE(def.angle_windows.size() == 3);
    CHECK(def.angle_windows[1] == std::array<double, 2>{150.0, 200.0});

    RulesConfig over = parse_rules_config(
        R"({"min_dim":480,"max_caption_words":40,"angle_windows":[[0,360]]})");
    CHECK(over.min_dim == 480);
    CHECK(over.max_caption_words == 40);
    REQUIRE(over.angle_windows.size() == 1);
    VideoRecord r = passing_record();
    r.camera_angle = 90.0;
    CHECK(filter_video(r, over).accepted);

    CHECK_THROWS_WITH_AS(parse_rules_config(R"({"min_dims":480})"), doctest::Contains("min_dims"),
                         ConfigError);
    CHECK_THROWS_AS(parse_rules_config(R"({"angle_windows":[[10]]})"), ConfigError);
    CHECK_THROWS_AS(parse_rules_config(R"({"zoom_lo":0.7})"), ConfigError);
    CHECK_THROWS_AS(parse_rules_config(R"({"angle_windows":[[30,10]]})"), ConfigError);
}
