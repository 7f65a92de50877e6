#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "tora2/checkpoint.hpp"
#include "tora2/objectives.hpp"
#include "tora2/training.hpp"

using namespace tora2;

namespace {

// Desk-scale run: 32x32 scenes on a patch-8 grid, width-8 single-block model.
RunConfig smoke_config() {
    RunConfig c = parse_run_config(R"({
        "data": {"frames": 4, "height": 32, "width": 32, "ref_res": 32,
                 "max_entities": 2, "train_scenes": 6, "seed": 21},
        "model": {"patch": 8, "d": 8, "depth": 1, "heads": 2, "vocab": 32,
                  "c_m": 4, "m_hidden": 6, "d_prior": 6, "k_prior": 4,
                  "d_global": 6, "k_global": 16, "l_p": 4, "n_qf": 1,
                  "schedule_steps": 50},
        "train": {"steps": 200, "batch": 2, "lr": 0.001, "seed": 3, "log_every": 10}
    })");
    return c;
}

ConditionedDiT smoke_model(ParamStore& ps, const RunConfig& cfg) {
    Rng rng(5);
    return ConditionedDiT::create(ps, "model", dit_config(cfg), dpe_config(cfg), rng,
                                  personalization_mode(cfg), binding_mode(cfg));
}

// Miniature hand-built conditioning (no synth corpus) for the gradient tests.
DiTConfig tiny_cfg() {
    DiTConfig c;
    c.frames = 2;
    c.height = 4;
    c.width = 4;
    c.channels = 2;
    c.patch = 2;
    c.d = 8;
    c.depth = 1;
    c.heads = 2;
    c.vocab = 8;
    c.max_text = 6;
    c.c_m = 4;
    c.m_hidden = 6;
    c.schedule_steps = 50;
    return c;
}

DpeConfig tiny_dpe() {
    DpeConfig c;
    c.ref_res = 8;
    c.d = 8;
    c.d_prior = 6;
    c.k_prior = 4;
    c.d_global = 6;
    c.k_global = 16;
    c.l_p = 4;
    c.n_qf = 1;
    c.heads = 2;
    return c;
}

RawConditioning two_entity_cond() {
    RawConditioning c;
    c.caption_ids = {1, 2, 3, 4};
    Rng rng(77);
    for (int i = 0; i < 2; ++i) {
        EntityBundle e;
        e.entity_id = "sprite-" + std::to_string(i);
        e.word_start = i;
        e.word_len = 1;
        e.trajectory.entity_id = e.entity_id;
        e.trajectory.points = {{0, 0.5 + i, 1.0}, {1, 1.5 + i, 2.5}};
        e.reference.pixels = Tensor::zeros({8, 8, 3});
        for (double& v : e.reference.pixels.data) v = rng.uniform();
        e.reference.entity_class = i == 0 ? EntityClass::human : EntityClass::object;
        c.entities.push_back(e);
    }
    return c;
}

std::vector<Tensor> snapshot_grads(const ParamStore& ps) {
    std::vector<Tensor> out;
    ParamStore& mut = const_cast<ParamStore&>(ps);
    for (int i = 0; i < ps.count(); ++i) out.push_back(mut.grad(i));
    return out;
}

}  // namespace

TEST_CASE("conditioning dropout: rates, independence, determinism") {
    Rng rng(123);
    const int n = 1000000;
    int64_t nc = 0, nr = 0, nt = 0, ncr = 0, nct = 0, nrt = 0;
    for (int i = 0; i < n; ++i) {
        DropoutFlags f = draw_condition_dropout(rng);
        nc += f.caption;
        nr += f.references;
        nt += f.trajectories;
        ncr += f.caption && f.references;
        nct += f.caption && f.trajectories;
        nrt += f.references && f.trajectories;
    }
    double pc = double(nc) / n, pr = double(nr) / n, pt = double(nt) / n;
    CHECK(std::fabs(pc - 0.50) < 0.005);
    CHECK(std::fabs(pr - 0.33) < 0.005);
    CHECK(std::fabs(pt - 0.33) < 0.005);

    auto corr = [&](double pxy, double px, double py) {
        return (pxy - px * py) / std::sqrt(px * (1 - px) * py * (1 - py));
    };
    CHECK(std::fabs(corr(double(ncr) / n, pc, pr)) < 0.01);
    CHECK(std::fabs(corr(double(nct) / n, pc, pt)) < 0.01);
    CHECK(std::fabs(corr(double(nrt) / n, pr, pt)) < 0.01);

    Rng a(9), b(9);
    for (int i = 0; i < 1000; ++i) {
        DropoutFlags fa = draw_condition_dropout(a);
        DropoutFlags fb = draw_condition_dropout(b);
        REQUIRE(fa.caption == fb.caption);
        REQUIRE(fa.references == fb.references);
        REQUIRE(fa.trajectories == fb.trajectories);
    }

    // rate 1 forces every flag, rate 0 none; content is preserved either way
    DropoutConfig all{1.0, 1.0, 1.0}, none{0.0, 0.0, 0.0};
    RawConditioning cond = two_entity_cond();
    Rng r2(1);
    RawConditioning dropped = apply_condition_dropout(cond, r2, all);
    CHECK(dropped.drop_caption);
    CHECK(dropped.drop_references);
    CHECK(dropped.drop_trajectories);
    CHECK(dropped.caption_ids == cond.caption_ids);
    CHECK(dropped.entities.size() == 2);
    RawConditioning kept = apply_condition_dropout(cond, r2, none);
    CHECK_FALSE(kept.drop_caption);
    CHECK_FALSE(kept.drop_references);
    CHECK_FALSE(kept.drop_trajectories);
}

TEST_CASE("an all-dropped sample runs the unconditional branch exactly") {
    ParamStore ps;
    Rng rng(31);
    ConditionedDiT model = ConditionedDiT::create(ps, "m", tiny_cfg(), tiny_dpe(), rng);

    Rng zr(8);
    Tensor z = zr.randn({2, 4, 4, 2}, 1.0);
    RawConditioning cond = two_entity_cond();
    Rng dr(1);
    cond = apply_condition_dropout(cond, dr, {1.0, 1.0, 1.0});

    Tape t;
    Var a = model.predict_noise(t, ps, t.leaf(z), 7, cond);
    Var b = model.predict_noise(t, ps, t.leaf(z), 7, RawConditioning::unconditional());
    CHECK(t.val(a).max_abs_diff(t.val(b)) == 0.0);
}

TEST_CASE("latent transform: affine map, inverse, clamping") {
    Tensor v = Tensor::zeros({1, 2, 2, 3});
    Rng rng(4);
    for (double& x : v.data) x = rng.uniform();
    Tensor z = latent_from_video(v);
    for (size_t i = 0; i < v.data.size(); ++i)
        CHECK(z.data[i] == doctest::Approx(2.0 * v.data[i] - 1.0).epsilon(1e-15));
    CHECK(video_from_latent(z).max_abs_diff(v) < 1e-15);

    Tensor wild = Tensor::zeros({1, 1, 1, 3});
    wild.data = {-3.0, 0.0, 5.0};
    Tensor back = video_from_latent(wild);
    CHECK(back.data[0] == 0.0);
    CHECK(back.data[1] == 0.5);
    CHECK(back.data[2] == 1.0);
}

TEST_CASE("dataset synthesis is deterministic and cycles entity counts") {
    DataConfig cfg;
    cfg.frames = 4;
    cfg.height = 32;
    cfg.width = 32;
    cfg.ref_res = 32;
    cfg.max_entities = 2;
    cfg.train_scenes = 5;
    cfg.seed = 21;
    std::vector<TrainSample> a = synthesize_dataset(cfg);
    REQUIRE(a.size() == 5);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].bundles.size() == 1 + i % 2);
        CHECK(a[i].video.shape == std::vector<int64_t>{4, 32, 32, 3});
        CHECK(a[i].caption_ids.size() >= 4);
    }
    std::vector<TrainSample> b = synthesize_dataset(cfg);
    for (size_t i = 0; i < a.size(); ++i)
        CHECK(a[i].video.max_abs_diff(b[i].video) == 0.0);
    cfg.seed = 22;
    std::vector<TrainSample> c = synthesize_dataset(cfg);
    CHECK(a[0].video.max_abs_diff(c[0].video) > 0.0);
}

TEST_CASE("with zero contrastive weight the alignment term leaves all gradients untouched") {
    ParamStore ps;
    Rng rng(31);
    ConditionedDiT model = ConditionedDiT::create(ps, "m", tiny_cfg(), tiny_dpe(), rng);
    RawConditioning cond = two_entity_cond();
    Rng zr(9);
    Tensor z = zr.randn({2, 4, 4, 2}, 1.0);
    Tensor noise = zr.randn({2, 4, 4, 2}, 1.0);

    auto run = [&](bool with_contrast) {
        Tape t;
        ConditioningSet cs = model.prepare_conditioning(t, ps, cond);
        Var eps_hat = model.predict_noise(t, ps, t.leaf(z), 3, cs);
        Var l_eps = mse(t.leaf(noise), eps_hat);
        Var root = l_eps;
        if (with_contrast) {
            REQUIRE(cs.contrast_pairs.size() == 2);
            std::vector<Var> pp, pm;
            for (const auto& pr : cs.contrast_pairs) {
                pp.push_back(pool_for_contrast(pr[0]));
                pm.push_back(pool_for_contrast(pr[1]));
            }
            Var l_cont = contrastive_loss(concat_rows(pp), concat_rows(pm), 0.07);
            CHECK(t.val(l_cont).data[0] > 0.0);
            root = total_loss(l_eps, l_cont, 0.0);
        }
        ps.zero_grads();
        t.backward(root);
        return snapshot_grads(ps);
    };

    std::vector<Tensor> with = run(true);
    std::vector<Tensor> without = run(false);
    for (size_t i = 0; i < with.size(); ++i)
        CHECK(with[i].max_abs_diff(without[i]) == 0.0);
}

TEST_CASE("smoke run: finite losses, log shape, determinism, csv") {
    RunConfig cfg = smoke_config();
    std::vector<TrainSample> data = synthesize_dataset(cfg.data);

    ParamStore ps;
    ConditionedDiT model = smoke_model(ps, cfg);
    TrainResult res = train(ps, model, "model", cfg, data);

    CHECK(res.steps == 200);
    REQUIRE(!res.log.empty());
    CHECK(res.log.front().step == 1);
    CHECK(res.log.back().step == 200);
    for (const TrainLogRow& r : res.log) {
        CHECK(std::isfinite(r.l_eps));
        CHECK(std::isfinite(r.l_cont));
        CHECK(std::isfinite(r.total));
        CHECK(r.total == doctest::Approx(r.l_eps + 0.2 * r.l_cont).epsilon(1e-12));
    }

    // an identically seeded shorter run reproduces the same step-10 losses
    RunConfig short_cfg = cfg;
    short_cfg.train.steps = 10;
    ParamStore ps2;
    ConditionedDiT model2 = smoke_model(ps2, short_cfg);
    TrainResult res2 = train(ps2, model2, "model", short_cfg, data);
    const TrainLogRow* row10 = nullptr;
    for (const TrainLogRow& r : res.log)
        if (r.step == 10) row10 = &r;
    REQUIRE(row10 != nullptr);
    CHECK(res2.log.back().step == 10);
    CHECK(res2.log.back().l_eps == row10->l_eps);
    CHECK(res2.log.back().l_cont == row10->l_cont);
    CHECK(res2.log.back().total == row10->total);

    std::string csv = metrics_csv(res.log);
    CHECK(csv.rfind("step,l_eps,l_cont,total\n", 0) == 0);
    size_t lines = 0;
    for (char ch : csv) lines += ch == '\n';
    CHECK(lines == res.log.size() + 1);
}

TEST_CASE("freeze contract: priors always, backbone on request, training respects both") {
    RunConfig cfg = smoke_config();
    cfg.train.steps = 3;
    cfg.train.freeze_backbone = true;
    std::vector<TrainSample> data = synthesize_dataset(cfg.data);

    ParamStore ps;
    ConditionedDiT model = smoke_model(ps, cfg);

    apply_freeze(ps, model, "model", false);
    CHECK_FALSE(ps.frozen(ps.require("model.block0.attn.q.w")));
    CHECK(ps.frozen(ps.require("model.dpe.global_enc.w")));

    std::vector<Tensor> before;
    for (int i = 0; i < ps.count(); ++i) before.push_back(ps.value(i));
    TrainResult res = train(ps, model, "model", cfg, data);
    CHECK(res.log.back().step == 3);

    // backbone and priors bitwise unchanged, conditioning additions moved
    bool additions_moved = false;
    for (int i = 0; i < ps.count(); ++i) {
        if (ps.frozen(i)) {
            CHECK(ps.value(i).max_abs_diff(before[size_t(i)]) == 0.0);
        } else {
            additions_moved =
                additions_moved || ps.value(i).max_abs_diff(before[size_t(i)]) > 0.0;
        }
    }
    CHECK(additions_moved);
    CHECK(ps.frozen(ps.require("model.patch_embed.w")));
    CHECK(ps.frozen(ps.require("model.block0.attn.q.w")));
    CHECK(ps.frozen(ps.require("model.text_embed")));
    CHECK_FALSE(ps.frozen(ps.require("model.block0.fuse_scale.w")));
    CHECK_FALSE(ps.frozen(ps.require("model.block0.xattn.o.w")));
    CHECK_FALSE(ps.frozen(ps.require("model.motion_enc.conv1.w")));
    CHECK_FALSE(ps.frozen(ps.require("model.binder.alpha_p")));
    CHECK_FALSE(ps.frozen(ps.require("model.null_p")));
    CHECK(ps.frozen(ps.require("model.null_text")));
    CHECK(ps.frozen(ps.require("model.dpe.face_prior.conv1.w")));
    CHECK_FALSE(ps.frozen(ps.require("model.dpe.global_proj.w")));
}

TEST_CASE("a poisoned sample aborts the run with a step diagnostic") {
    RunConfig cfg = smoke_config();
    cfg.train.steps = 5;
    std::vector<TrainSample> data = synthesize_dataset(cfg.data);
    for (TrainSample& s : data) s.video.data[0] = std::nan("");
    ParamStore ps;
    ConditionedDiT model = smoke_model(ps, cfg);
    CHECK_THROWS_WITH_AS(train(ps, model, "model", cfg, data),
                         doctest::Contains("non-finite loss"), ValueError);
}
