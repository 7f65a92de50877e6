#include "tora2/training.hpp"

#include <cmath>
#include <cstdio>

#include "tora2/objectives.hpp"

namespace tora2 {

DropoutFlags draw_condition_dropout(Rng& rng, const DropoutConfig& cfg) {
    DropoutFlags f;
    f.caption = rng.uniform() < cfg.caption;
    f.references = rng.uniform() < cfg.references;
    f.trajectories = rng.uniform() < cfg.trajectories;
    return f;
}

RawConditioning apply_condition_dropout(const RawConditioning& cond, Rng& rng,
                                        const DropoutConfig& cfg) {
    DropoutFlags f = draw_condition_dropout(rng, cfg);
    RawConditioning out = cond;
    out.drop_caption = f.caption;
    out.drop_references = f.references;
    out.drop_trajectories = f.trajectories;
    return out;
}

std::vector<TrainSample> synthesize_dataset(const DataConfig& cfg) {
    std::vector<TrainSample> data;
    data.reserve(static_cast<size_t>(cfg.train_scenes));
    for (int64_t i = 0; i < cfg.train_scenes; ++i) {
        Rng layout = derive_rng(cfg.seed, "layout/" + std::to_string(i));
        int n = 1 + static_cast<int>(i % cfg.max_entities);
        SceneSpec spec =
            random_scene(layout, n, cfg.frames, cfg.height, cfg.width, cfg.ref_res);
        uint64_t render_seed =
            fnv1a64("render/" + std::to_string(cfg.seed) + "/" + std::to_string(i));
        data.push_back(synthesize_scene(spec, render_seed));
    }
    return data;
}

Tensor latent_from_video(const Tensor& video) {
    Tensor z = video;
    for (double& v : z.data) v = 2.0 * v - 1.0;
    return z;
}

Tensor video_from_latent(const Tensor& latent) {
    Tensor v = latent;
    for (double& x : v.data) x = std::min(1.0, std::max(0.0, 0.5 * (x + 1.0)));
    return v;
}

RawConditioning conditioning_from_sample(const TrainSample& s) {
    RawConditioning cond;
    cond.caption_ids = s.caption_ids;
    cond.entities = s.bundles;
    return cond;
}

std::string metrics_csv(const std::vector<TrainLogRow>& log) {
    std::string out = "step,l_eps,l_cont,total\n";
    char buf[128];
    for (const TrainLogRow& r : log) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(r.step), r.l_eps, r.l_cont, r.total);
        out += buf;
    }
    return out;
}

void apply_freeze(ParamStore& ps, const ConditionedDiT& model, const std::string& model_name,
                  bool freeze_backbone) {
    if (freeze_backbone) {
        std::vector<std::string> live = {model_name + ".motion_enc.", model_name + ".token_maps.",
                                         model_name + ".binder.", model_name + ".dpe.",
                                         model_name + ".null_p"};
        for (size_t i = 0; i < model.blocks.size(); ++i) {
            std::string b = model_name + ".block" + std::to_string(i) + ".";
            live.push_back(b + "fuse_scale.");
            live.push_back(b + "fuse_shift.");
            live.push_back(b + "xattn.");
        }
        std::string root = model_name + ".";
        ps.set_frozen(
            [&](const std::string& n) {
                if (n.rfind(root, 0) != 0) return false;
                for (const std::string& p : live)
                    if (n.rfind(p, 0) == 0) return false;
                return true;
            },
            true);
    }
    for (const std::string& p : model.frozen_prefixes(model_name))
        ps.set_frozen([&p](const std::string& n) { return n.rfind(p, 0) == 0; }, true);
}

TrainResult train(ParamStore& ps, ConditionedDiT& model, const std::string& model_name,
                  const RunConfig& cfg, const std::vector<TrainSample>& data) {
    if (data.empty()) throw ValueError("train: dataset is empty");
    apply_freeze(ps, model, model_name, cfg.train.freeze_backbone);

    AdamWConfig ocfg;
    ocfg.lr = cfg.train.lr;
    ocfg.weight_decay = cfg.train.weight_decay;
    AdamW opt(ocfg);

    Rng rng(cfg.train.seed);
    NoiseSchedule sched = model.schedule();
    TrainResult res;
    res.steps = cfg.train.steps;

    for (int64_t step = 1; step <= cfg.train.steps; ++step) {
        Tape tape;
        std::vector<Var> sample_losses;
        std::vector<Var> pooled_p, pooled_m;
        for (int64_t b = 0; b < cfg.train.batch; ++b) {
            const TrainSample& s = data[static_cast<size_t>(rng.randint(int64_t(data.size())))];
            RawConditioning cond =
                apply_condition_dropout(conditioning_from_sample(s), rng, cfg.dropout);
            int64_t tstep = rng.randint(sched.steps);
            double ab = sched.alpha_bar(tstep);

            Tensor z0 = latent_from_video(s.video);
            Tensor noise = rng.randn(z0.shape, 1.0);
            Tensor z_t = z0;
            double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
            for (size_t i = 0; i < z_t.data.size(); ++i)
                z_t.data[i] = sa * z_t.data[i] + sn * noise.data[i];

            ConditioningSet cs = model.prepare_conditioning(tape, ps, cond);
            Var eps_hat = model.predict_noise(tape, ps, tape.leaf(std::move(z_t)), tstep, cs);
            sample_losses.push_back(mse(tape.leaf(std::move(noise)), eps_hat));
            for (const auto& pair : cs.contrast_pairs) {
                pooled_p.push_back(pool_for_contrast(pair[0]));
                pooled_m.push_back(pool_for_contrast(pair[1]));
            }
        }

        Var l_eps = sample_losses[0];
        for (size_t i = 1; i < sample_losses.size(); ++i) l_eps = add(l_eps, sample_losses[i]);
        l_eps = scale(l_eps, 1.0 / static_cast<double>(sample_losses.size()));

        Var l_cont = pooled_p.size() >= 2
                         ? contrastive_loss(concat_rows(pooled_p), concat_rows(pooled_m),
                                            cfg.loss.tau)
                         : tape.leaf(Tensor::zeros({1, 1}));
        Var total = total_loss(l_eps, l_cont, cfg.loss.lambda_contrast);

        double le = tape.val(l_eps).data[0];
        double lc = tape.val(l_cont).data[0];
        double tot = tape.val(total).data[0];
        if (!std::isfinite(tot))
            throw ValueError("train: non-finite loss at step " + std::to_string(step) +
                             " (l_eps=" + std::to_string(le) + ", l_cont=" + std::to_string(lc) +
                             ")");

        ps.zero_grads();
        tape.backward(total);
        opt.step(ps);

        if (step == 1 || step == cfg.train.steps || step % cfg.train.log_every == 0)
            res.log.push_back({step, le, lc, tot});
    }
    return res;
}

}  // namespace tora2
