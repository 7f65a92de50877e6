#include "tora2/dit.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace tora2 {

InjectionOrder injection_order_from_string(const std::string& s) {
    if (s == "M_then_P") return InjectionOrder::motion_first;
    if (s == "P_then_M") return InjectionOrder::personalization_first;
    throw ConfigError("injection order: expected M_then_P or P_then_M, got '" + s + "'");
}

std::string injection_order_to_string(InjectionOrder o) {
    return o == InjectionOrder::motion_first ? "M_then_P" : "P_then_M";
}

double NoiseSchedule::alpha_bar(int64_t t) const {
    if (t < 0 || t >= steps)
        throw ValueError("noise schedule: step " + std::to_string(t) + " outside [0, " +
                         std::to_string(steps) + ")");
    auto f = [&](double u) {
        double x = (u / static_cast<double>(steps) + s) / (1.0 + s) * (M_PI / 2.0);
        double c = std::cos(x);
        return c * c;
    };
    return f(static_cast<double>(t)) / f(0.0);
}

DiTBlock DiTBlock::create(ParamStore& ps, const std::string& name, const DiTConfig& cfg,
                          Rng& rng) {
    DiTBlock b;
    b.ln1 = LayerNormParams::create(ps, name + ".ln1", cfg.d);
    b.ln2 = LayerNormParams::create(ps, name + ".ln2", cfg.d);
    b.ln_x = LayerNormParams::create(ps, name + ".ln_x", cfg.d);
    // Zero-init modulation: every residual branch starts gated shut, so a
    // fresh block is an identity map regardless of the other weights.
    b.mod = Linear::create(ps, name + ".mod", cfg.d, 6 * cfg.d, rng, 0.0, /*zero_init=*/true);
    // Scale and shift each get their own zero-init conv reading the motion
    // volume directly; with a serial stack a zero first layer would starve the
    // second layer's weight gradients and motion conditioning could never
    // start learning.
    b.fuse_scale_w = ps.add(name + ".fuse_scale.w", Tensor::zeros({1, 3, 3, cfg.c_m, cfg.d}));
    b.fuse_scale_b = ps.add(name + ".fuse_scale.b", Tensor::zeros({1, cfg.d}));
    b.fuse_shift_w = ps.add(name + ".fuse_shift.w", Tensor::zeros({1, 3, 3, cfg.c_m, cfg.d}));
    b.fuse_shift_b = ps.add(name + ".fuse_shift.b", Tensor::zeros({1, cfg.d}));
    b.attn = MultiHeadAttention::create(ps, name + ".attn", cfg.d, cfg.heads, rng, 0.08);
    b.xattn = MultiHeadAttention::create(ps, name + ".xattn", cfg.d, cfg.heads, rng, 0.08,
                                         /*zero_init_out=*/true);
    b.ff = Mlp::create(ps, name + ".ff", cfg.d, 4 * cfg.d, cfg.d, rng, 0.08);
    return b;
}

Var DiTBlock::fuse_motion(Tape& t, ParamStore& ps, Var z_tokens, Var motion_volume,
                          const DiTConfig& cfg) const {
    const Tensor& mv = t.val(motion_volume);
    if (mv.ndim() != 4 || mv.shape[0] != cfg.frames || mv.shape[1] != cfg.grid_h() ||
        mv.shape[2] != cfg.grid_w() || mv.shape[3] != cfg.c_m)
        throw ShapeError("fuse_motion: motion volume " + mv.shape_str() +
                         " does not match the token grid");
    const Tensor& zv = t.val(z_tokens);
    if (zv.ndim() != 2 || zv.shape[0] != cfg.video_tokens() || zv.shape[1] != cfg.d)
        throw ShapeError("fuse_motion: expected (" + std::to_string(cfg.video_tokens()) + ", " +
                         std::to_string(cfg.d) + ") tokens, got " + zv.shape_str());
    Conv3dSpec spec;  // per-frame 3x3 spatial mixing, frames untouched
    spec.pad_h = spec.pad_w = 1;
    int64_t n = cfg.video_tokens();
    Var gamma = reshape(
        conv3d(motion_volume, t.param(ps, fuse_scale_w), t.param(ps, fuse_scale_b), spec),
        {n, cfg.d});
    Var beta = reshape(
        conv3d(motion_volume, t.param(ps, fuse_shift_w), t.param(ps, fuse_shift_b), spec),
        {n, cfg.d});
    return add(mul(z_tokens, add_const(gamma, 1.0)), beta);
}

Var DiTBlock::forward(Tape& t, ParamStore& ps, Var z, const ConditioningSet& cond, Var t_embed,
                      const DiTConfig& cfg, std::vector<std::string>* trace) const {
    auto tag = [&](const char* s) {
        if (trace) trace->emplace_back(s);
    };
    Var mod_row = mod.forward(t, ps, t_embed);  // (1, 6d)
    Var scale1 = add_const(slice_cols(mod_row, 0, cfg.d), 1.0);
    Var shift1 = slice_cols(mod_row, cfg.d, cfg.d);
    Var gate1 = slice_cols(mod_row, 2 * cfg.d, cfg.d);
    Var scale2 = add_const(slice_cols(mod_row, 3 * cfg.d, cfg.d), 1.0);
    Var shift2 = slice_cols(mod_row, 4 * cfg.d, cfg.d);
    Var gate2 = slice_cols(mod_row, 5 * cfg.d, cfg.d);
    tag("modulate");

    auto personalize = [&](Var zz) {
        Var delta = xattn.forward(t, ps, ln_x.forward(t, ps, zz), cond.p_corpus);
        tag("personalization");
        return add(zz, delta);
    };
    bool motion_first = cfg.order == InjectionOrder::motion_first;

    if (!motion_first) z = personalize(z);

    Var h = row_broadcast_add(row_broadcast_mul(ln1.forward(t, ps, z), scale1), shift1);
    if (motion_first) {
        h = fuse_motion(t, ps, h, cond.motion_volume, cfg);
        tag("motion");
    }
    Var joint = concat_rows({cond.caption_tokens, h});
    Var attended = attn.forward(t, ps, joint, joint);
    int64_t l_text = t.val(cond.caption_tokens).shape[0];
    Var video_part = slice_rows(attended, l_text, cfg.video_tokens());
    z = add(z, row_broadcast_mul(video_part, gate1));
    tag("self_attention");

    if (motion_first) z = personalize(z);

    Var h2 = row_broadcast_add(row_broadcast_mul(ln2.forward(t, ps, z), scale2), shift2);
    if (!motion_first) {
        h2 = fuse_motion(t, ps, h2, cond.motion_volume, cfg);
        tag("motion");
    }
    z = add(z, row_broadcast_mul(ff.forward(t, ps, h2), gate2));
    tag("feedforward");
    return z;
}

ConditionedDiT ConditionedDiT::create(ParamStore& ps, const std::string& name,
                                      const DiTConfig& cfg, const DpeConfig& dpe_cfg, Rng& rng,
                                      PersonalizationMode pmode, BindingMode bmode) {
    if (cfg.height % cfg.patch != 0 || cfg.width % cfg.patch != 0)
        throw ConfigError("dit: video size must be divisible by the patch stride");
    if (cfg.d % cfg.heads != 0) throw ConfigError("dit: width must be divisible by heads");
    if (dpe_cfg.d != cfg.d)
        throw ConfigError("dit: personalization width must match the model width");
    if (cfg.depth < 1 || cfg.vocab < 1 || cfg.max_text < 1 || cfg.schedule_steps < 2)
        throw ConfigError("dit: degenerate configuration");

    ConditionedDiT m;
    m.cfg = cfg;
    m.dpe_cfg = dpe_cfg;
    int64_t pp = cfg.patch * cfg.patch * cfg.channels;
    m.patch_embed = Linear::create(ps, name + ".patch_embed", pp, cfg.d, rng, 0.08);
    m.pos_video = ps.add(name + ".pos_video", rng.randn({cfg.video_tokens(), cfg.d}, 0.02));
    m.text_embed = ps.add(name + ".text_embed", rng.randn({cfg.vocab, cfg.d}, 0.3));
    m.pos_text = ps.add(name + ".pos_text", rng.randn({cfg.max_text, cfg.d}, 0.02));
    m.null_text = ps.add(name + ".null_text", rng.randn({1, cfg.d}, 0.3));
    m.null_p = ps.add(name + ".null_p", rng.randn({1, cfg.d}, 0.3));
    m.t_mlp = Mlp::create(ps, name + ".t_mlp", cfg.d, 4 * cfg.d, cfg.d, rng, 0.08);
    for (int i = 0; i < cfg.depth; ++i)
        m.blocks.push_back(DiTBlock::create(ps, name + ".block" + std::to_string(i), cfg, rng));
    m.final_ln = LayerNormParams::create(ps, name + ".final_ln", cfg.d);
    m.unpatch = Linear::create(ps, name + ".unpatch", cfg.d, pp, rng, 0.0, /*zero_init=*/true);

    MotionEncoderConfig mc;
    mc.frames = cfg.frames;
    mc.height = cfg.height;
    mc.width = cfg.width;
    mc.stride = cfg.patch;
    mc.channels = cfg.c_m;
    mc.hidden = cfg.m_hidden;
    m.motion_enc = MotionEncoder::create(ps, name + ".motion_enc", mc, rng);
    m.token_maps = MotionTokenMaps::create(ps, name + ".token_maps", cfg.c_m, cfg.d, rng, 0.08);
    m.dpe = PersonalizationExtractor::create(ps, name + ".dpe", dpe_cfg, rng, pmode);
    BindingConfig bc;
    bc.d = cfg.d;
    bc.heads = cfg.heads;
    m.binder = EntityBinder::create(ps, name + ".binder", bc, rng, bmode);
    return m;
}

std::vector<std::string> ConditionedDiT::frozen_prefixes(const std::string& name) const {
    return PersonalizationExtractor::frozen_prefixes(name + ".dpe");
}

ConditioningSet ConditionedDiT::prepare_conditioning(Tape& t, ParamStore& ps,
                                                     const RawConditioning& cond) const {
    ConditioningSet out;

    // Caption stream: embedded ids plus positions, or the learned null token.
    int64_t l_text = 1;
    if (cond.drop_caption) {
        out.caption_tokens = t.param(ps, null_text);
    } else {
        l_text = static_cast<int64_t>(cond.caption_ids.size());
        if (l_text < 1) throw ValueError("conditioning: caption is empty");
        if (l_text > cfg.max_text)
            throw ValueError("conditioning: caption longer than max_text (" +
                             std::to_string(cfg.max_text) + ")");
        for (int64_t id : cond.caption_ids)
            if (id < 0 || id >= cfg.vocab)
                throw BoundsError("conditioning: caption token id " + std::to_string(id) +
                                  " outside the vocabulary");
        out.caption_tokens = add(gather_rows(t.param(ps, text_embed), cond.caption_ids),
                                 slice_rows(t.param(ps, pos_text), 0, l_text));
    }

    // Motion stream: splat + encode the entity paths, or a zero volume.
    bool motion_live = false;
    if (!cond.drop_trajectories) {
        std::vector<Trajectory> trajs;
        for (const EntityBundle& e : cond.entities)
            if (!e.trajectory.points.empty()) trajs.push_back(e.trajectory);
        if (!trajs.empty()) {
            Tensor disp = rasterize(trajs, cfg.frames, cfg.height, cfg.width,
                                    default_splat_sigma(cfg.patch));
            out.motion_volume = motion_enc.forward(t, ps, t.leaf(std::move(disp)));
            motion_live = true;
        }
    }
    if (!motion_live)
        out.motion_volume =
            t.leaf(Tensor::zeros({cfg.frames, cfg.grid_h(), cfg.grid_w(), cfg.c_m}));

    // Personalization stream: per entity extract -> bind -> write motion back.
    if (cond.drop_references || cond.entities.empty()) {
        out.p_corpus = t.param(ps, null_p);
        return out;
    }
    std::vector<Var> bound;
    for (const EntityBundle& e : cond.entities) {
        Var p = dpe.forward(t, ps, e.reference);
        bool has_path = motion_live && !e.trajectory.points.empty();
        Var m_tokens = has_path
                           ? extract_motion_tokens(t, ps, token_maps, out.motion_volume,
                                                   e.trajectory, cfg.patch)
                           : t.leaf(Tensor::zeros({1, cfg.d}));
        Var words;
        if (cond.drop_caption) {
            words = t.param(ps, null_text);
        } else {
            if (e.word_start < 0 || e.word_len < 1 || e.word_start + e.word_len > l_text)
                throw BoundsError("conditioning: entity " + e.entity_id +
                                  " word span outside the caption");
            words = slice_rows(out.caption_tokens, e.word_start, e.word_len);
        }
        BoundTokens bt = binder.bind(t, ps, p, m_tokens, words);
        bound.push_back(bt.p);
        if (has_path) {
            out.motion_volume = scatter_motion_tokens(t, ps, token_maps, out.motion_volume, bt.m,
                                                      e.trajectory, cfg.patch);
            out.contrast_pairs.push_back({bt.p, bt.m});
        }
    }
    out.p_corpus = bound.size() == 1 ? bound[0] : concat_rows(bound);
    return out;
}

std::vector<int64_t> ConditionedDiT::patch_cells(int64_t dy, int64_t dx) const {
    std::vector<int64_t> cells;
    cells.reserve(static_cast<size_t>(cfg.video_tokens()));
    for (int64_t f = 0; f < cfg.frames; ++f)
        for (int64_t y = 0; y < cfg.grid_h(); ++y)
            for (int64_t x = 0; x < cfg.grid_w(); ++x)
                cells.push_back((f * cfg.height + y * cfg.patch + dy) * cfg.width +
                                x * cfg.patch + dx);
    return cells;
}

Var ConditionedDiT::patchify(Tape& t, ParamStore& ps, Var z) const {
    const Tensor& zv = t.val(z);
    if (zv.ndim() != 4 || zv.shape[0] != cfg.frames || zv.shape[1] != cfg.height ||
        zv.shape[2] != cfg.width || zv.shape[3] != cfg.channels)
        throw ShapeError("patchify: expected (" + std::to_string(cfg.frames) + ", " +
                         std::to_string(cfg.height) + ", " + std::to_string(cfg.width) + ", " +
                         std::to_string(cfg.channels) + ") video, got " + zv.shape_str());
    std::vector<Var> cols;
    for (int64_t dy = 0; dy < cfg.patch; ++dy)
        for (int64_t dx = 0; dx < cfg.patch; ++dx)
            cols.push_back(gather_cells(z, patch_cells(dy, dx)));
    Var rows = cols.size() == 1 ? cols[0] : concat_cols(cols);
    return add(patch_embed.forward(t, ps, rows), t.param(ps, pos_video));
}

Var ConditionedDiT::unpatchify(Tape& t, ParamStore& ps, Var rows) const {
    Var px = unpatch.forward(t, ps, rows);  // (video_tokens, patch*patch*channels)
    Var vol = t.leaf(Tensor::zeros({cfg.frames, cfg.height, cfg.width, cfg.channels}));
    int64_t offset = 0;
    for (int64_t dy = 0; dy < cfg.patch; ++dy)
        for (int64_t dx = 0; dx < cfg.patch; ++dx) {
            Var part = slice_cols(px, offset, cfg.channels);
            vol = scatter_add_cells(vol, part, patch_cells(dy, dx));
            offset += cfg.channels;
        }
    return vol;
}

Var ConditionedDiT::predict_noise(Tape& t, ParamStore& ps, Var z_t, int64_t step,
                                  const RawConditioning& cond) const {
    ConditioningSet cs = prepare_conditioning(t, ps, cond);
    return predict_noise(t, ps, z_t, step, cs);
}

Var ConditionedDiT::predict_noise(Tape& t, ParamStore& ps, Var z_t, int64_t step,
                                  const ConditioningSet& cs) const {
    if (step < 0 || step >= cfg.schedule_steps)
        throw ValueError("predict_noise: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(cfg.schedule_steps) + ")");
    Var t_embed =
        t_mlp.forward(t, ps, t.leaf(sinusoidal_embedding(static_cast<double>(step), cfg.d)));
    Var tokens = patchify(t, ps, z_t);
    for (const DiTBlock& b : blocks)
        tokens = b.forward(t, ps, tokens, cs, t_embed, cfg, trace);
    tokens = final_ln.forward(t, ps, tokens);
    return unpatchify(t, ps, tokens);
}

Tensor ConditionedDiT::sample(ParamStore& ps, const RawConditioning& cond, int64_t steps,
                              double guidance, uint64_t seed) const {
    if (steps < 1) throw ValueError("sample: steps must be >= 1");
    NoiseSchedule sch = schedule();
    Rng noise_rng = derive_rng(seed, "sample-noise");
    Tensor x = noise_rng.randn({cfg.frames, cfg.height, cfg.width, cfg.channels}, 1.0);
    RawConditioning uncond = RawConditioning::unconditional();

    // Deterministic reverse walk on a uniform sub-grid of the schedule,
    // always finishing at step 0 where the noise share vanishes.
    int64_t last = cfg.schedule_steps - 1;
    std::vector<int64_t> ts(static_cast<size_t>(steps) + 1);
    for (int64_t i = 0; i <= steps; ++i) ts[static_cast<size_t>(i)] = last * (steps - i) / steps;

    for (int64_t k = 0; k < steps; ++k) {
        int64_t t_cur = ts[static_cast<size_t>(k)];
        int64_t t_next = ts[static_cast<size_t>(k) + 1];
        Tape tape;
        Var z = tape.leaf(x);
        Tensor eps_c = tape.val(predict_noise(tape, ps, z, t_cur, cond));
        Tensor eps_u = tape.val(predict_noise(tape, ps, z, t_cur, uncond));
        double ab_c = sch.alpha_bar(t_cur);
        double ab_n = sch.alpha_bar(t_next);
        double sig_c = std::sqrt(ab_c), noi_c = std::sqrt(1.0 - ab_c);
        double sig_n = std::sqrt(ab_n), noi_n = std::sqrt(1.0 - ab_n);
        for (size_t i = 0; i < x.data.size(); ++i) {
            double e = eps_u.data[i] + guidance * (eps_c.data[i] - eps_u.data[i]);
            double x0 = (x.data[i] - noi_c * e) / sig_c;
            x.data[i] = sig_n * x0 + noi_n * e;
        }
    }
    return x;
}

}  // namespace tora2
