#include "tora2/personalization.hpp"

#include <cmath>

namespace tora2 {

EntityClass entity_class_from_string(const std::string& s) {
    if (s == "human") return EntityClass::human;
    if (s == "object") return EntityClass::object;
    throw ConfigError("unknown entity class: " + s);
}

std::string entity_class_to_string(EntityClass c) {
    return c == EntityClass::human ? "human" : "object";
}

PersonalizationMode personalization_mode_from_string(const std::string& s) {
    if (s == "global_only") return PersonalizationMode::global_only;
    if (s == "global_reid") return PersonalizationMode::global_reid;
    if (s == "global_reid_face") return PersonalizationMode::global_reid_face;
    if (s == "full") return PersonalizationMode::full;
    throw ConfigError("unknown personalization mode: " + s);
}

std::string personalization_mode_to_string(PersonalizationMode m) {
    switch (m) {
        case PersonalizationMode::global_only: return "global_only";
        case PersonalizationMode::global_reid: return "global_reid";
        case PersonalizationMode::global_reid_face: return "global_reid_face";
        case PersonalizationMode::full: return "full";
    }
    throw ConfigError("unknown personalization mode");
}

QFormer QFormer::create(ParamStore& ps, const std::string& name, const DpeConfig& cfg, Rng& rng) {
    QFormer q;
    q.queries = ps.add(name + ".queries", rng.randn({cfg.l_p, cfg.d}, 0.3));
    for (int64_t i = 0; i < cfg.n_qf; ++i) {
        std::string bn = name + ".block" + std::to_string(i);
        Block b;
        b.ln_q = LayerNormParams::create(ps, bn + ".ln_q", cfg.d);
        b.ln_kv = LayerNormParams::create(ps, bn + ".ln_kv", cfg.d);
        b.ln_ff = LayerNormParams::create(ps, bn + ".ln_ff", cfg.d);
        b.xattn = MultiHeadAttention::create(ps, bn + ".xattn", cfg.d, cfg.heads, rng, 0.15);
        b.ff = Mlp::create(ps, bn + ".ff", cfg.d, 2 * cfg.d, cfg.d, rng, 0.15);
        q.blocks.push_back(std::move(b));
    }
    return q;
}

Var QFormer::forward(Tape& t, ParamStore& ps, Var corpus) const {
    if (t.val(corpus).rows() < 1) throw ValueError("query blocks: empty corpus");
    Var x = t.param(ps, queries);
    for (const Block& b : blocks) {
        Var attended = b.xattn.forward(t, ps, b.ln_q.forward(t, ps, x),
                                       b.ln_kv.forward(t, ps, corpus));
        x = add(x, attended);
        x = add(x, b.ff.forward(t, ps, b.ln_ff.forward(t, ps, x)));
    }
    return x;
}

PersonalizationExtractor PersonalizationExtractor::create(ParamStore& ps, const std::string& name,
                                                          const DpeConfig& cfg, Rng& rng,
                                                          PersonalizationMode mode) {
    if (cfg.ref_res % 8 != 0) throw ConfigError("dpe: reference resolution must divide by 8");
    if (cfg.k_prior != 4) throw ConfigError("dpe: prior encoders emit 4 tokens (2x2 quadrants)");
    if (cfg.k_global != 16) throw ConfigError("dpe: global encoder emits 16 tokens (4x4 grid)");
    PersonalizationExtractor e;
    e.cfg = cfg;
    e.mode = mode;

    // High-frequency identity stand-ins: two conv layers over raw pixels.
    auto prior_stack = [&](const std::string& base, int& w1, int& b1, int& w2, int& b2) {
        w1 = ps.add(base + ".conv1.w", rng.randn({1, 4, 4, 3, 8}, 0.35));
        b1 = ps.add(base + ".conv1.b", Tensor::zeros({1, 8}));
        w2 = ps.add(base + ".conv2.w", rng.randn({1, 4, 4, 8, cfg.d_prior}, 0.35));
        b2 = ps.add(base + ".conv2.b", Tensor::zeros({1, cfg.d_prior}));
    };
    prior_stack(name + ".face_prior", e.face_w1, e.face_b1, e.face_w2, e.face_b2);
    prior_stack(name + ".reid_prior", e.reid_w1, e.reid_b1, e.reid_w2, e.reid_b2);

    // Low-frequency semantic stand-in: heavy average pooling then one frozen
    // linear map per 2x2 pooled patch, deliberately blind to fine texture.
    e.global_w = ps.add(name + ".global_enc.w", rng.randn({12, cfg.d_global}, 0.35));
    e.global_b = ps.add(name + ".global_enc.b", Tensor::zeros({1, cfg.d_global}));

    e.face_adapter = Mlp::create(ps, name + ".face_adapter", cfg.d_prior, cfg.d, cfg.d, rng, 0.15);
    e.reid_adapter = Mlp::create(ps, name + ".reid_adapter", cfg.d_prior, cfg.d, cfg.d, rng, 0.15);
    e.face_linear = Linear::create(ps, name + ".face_linear", cfg.d_prior, cfg.d, rng, 0.15);
    e.reid_linear = Linear::create(ps, name + ".reid_linear", cfg.d_prior, cfg.d, rng, 0.15);
    e.global_proj = Linear::create(ps, name + ".global_proj", cfg.d_global, cfg.d, rng, 0.15);
    e.qformer = QFormer::create(ps, name + ".qformer", cfg, rng);
    return e;
}

std::vector<std::string> PersonalizationExtractor::frozen_prefixes(const std::string& name) {
    return {name + ".face_prior.", name + ".reid_prior.", name + ".global_enc."};
}

namespace {

// Runs a frozen two-layer conv stack and pools the final grid into 2x2
// quadrant means: (res, res, 3) -> (4, d_prior).
Tensor frozen_prior_features(ParamStore& ps, const Tensor& pixels, int w1, int b1, int w2,
                             int b2) {
    Tape t;  // throwaway tape; nothing here requires gradients
    Var img = t.leaf(Tensor({1, pixels.shape[0], pixels.shape[1], 3}, pixels.data));
    Conv3dSpec halve;
    halve.stride_h = halve.stride_w = 2;
    halve.pad_h = halve.pad_w = 1;
    Var h = silu(conv3d(img, t.param(ps, w1), t.param(ps, b1), halve));
    h = silu(conv3d(h, t.param(ps, w2), t.param(ps, b2), halve));
    const Tensor& grid = t.val(h);  // (1, res/4, res/4, d_prior)
    int64_t gh = grid.shape[1], gw = grid.shape[2], c = grid.shape[3];
    Tensor out({4, c});
    for (int64_t qy = 0; qy < 2; ++qy)
        for (int64_t qx = 0; qx < 2; ++qx) {
            int64_t y0 = qy * gh / 2, y1 = (qy + 1) * gh / 2;
            int64_t x0 = qx * gw / 2, x1 = (qx + 1) * gw / 2;
            double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
            for (int64_t y = y0; y < y1; ++y)
                for (int64_t x = x0; x < x1; ++x)
                    for (int64_t ch = 0; ch < c; ++ch)
                        out.at(qy * 2 + qx, ch) += grid.at4(0, y, x, ch) * inv;
        }
    return out;
}

}  // namespace

Tensor PersonalizationExtractor::extract_prior(ParamStore& ps, const Tensor& pixels,
                                               EntityClass cls) const {
    if (pixels.ndim() != 3 || pixels.shape[0] != cfg.ref_res || pixels.shape[1] != cfg.ref_res ||
        pixels.shape[2] != 3)
        throw ShapeError("reference image must be (" + std::to_string(cfg.ref_res) + "," +
                         std::to_string(cfg.ref_res) + ",3)");
    dispatch_log.push_back(cls);
    switch (cls) {
        case EntityClass::human:
            return frozen_prior_features(ps, pixels, face_w1, face_b1, face_w2, face_b2);
        case EntityClass::object:
            return frozen_prior_features(ps, pixels, reid_w1, reid_b1, reid_w2, reid_b2);
    }
    throw ConfigError("extract_prior: unknown entity class");
}

Tensor PersonalizationExtractor::extract_global(ParamStore& ps, const Tensor& pixels) const {
    if (pixels.ndim() != 3 || pixels.shape[0] != cfg.ref_res || pixels.shape[1] != cfg.ref_res ||
        pixels.shape[2] != 3)
        throw ShapeError("reference image must be square at the configured resolution");
    // average-pool to an 8x8 grid, then embed each 2x2 block (12 values)
    int64_t res = cfg.ref_res;
    int64_t block = res / 8;
    Tensor pooled({8, 8, 3});
    double inv = 1.0 / static_cast<double>(block * block);
    for (int64_t y = 0; y < 8; ++y)
        for (int64_t x = 0; x < 8; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int64_t yy = 0; yy < block; ++yy)
                    for (int64_t xx = 0; xx < block; ++xx)
                        s += pixels.data[static_cast<size_t>(
                            ((y * block + yy) * res + x * block + xx) * 3 + c)];
                pooled.data[static_cast<size_t>((y * 8 + x) * 3 + c)] = s * inv;
            }
    Tensor patches({16, 12});
    for (int64_t py = 0; py < 4; ++py)
        for (int64_t px = 0; px < 4; ++px)
            for (int64_t yy = 0; yy < 2; ++yy)
                for (int64_t xx = 0; xx < 2; ++xx)
                    for (int64_t c = 0; c < 3; ++c)
                        patches.at(py * 4 + px, (yy * 2 + xx) * 3 + c) =
                            pooled.data[static_cast<size_t>(
                                (((py * 2 + yy) * 8) + px * 2 + xx) * 3 + c)];
    Tape t;
    return t.val(row_broadcast_add(matmul(t.leaf(patches), t.param(ps, global_w)),
                                   t.param(ps, global_b)));
}

Var PersonalizationExtractor::adapt(Tape& t, ParamStore& ps, Var prior, EntityClass cls) const {
    bool linear_only = mode == PersonalizationMode::global_reid ||
                       mode == PersonalizationMode::global_reid_face;
    switch (cls) {
        case EntityClass::human:
            return linear_only ? face_linear.forward(t, ps, prior)
                               : face_adapter.forward(t, ps, prior);
        case EntityClass::object:
            return linear_only ? reid_linear.forward(t, ps, prior)
                               : reid_adapter.forward(t, ps, prior);
    }
    throw ConfigError("adapt: unknown entity class");
}

Var PersonalizationExtractor::compose(Var adapted, Var global_tokens) {
    return concat_rows({adapted, global_tokens});
}

namespace {

// Deterministic fallback pooling for the query-free ablation modes: mean-pool
// corpus rows into l_p groups of equal size (corpus length is fixed per mode).
Var pool_to_length(Tape& t, Var corpus, int64_t l_p) {
    int64_t n = t.val(corpus).rows();
    if (n < l_p) throw ShapeError("pooling: corpus shorter than the target token count");
    std::vector<Var> groups;
    groups.reserve(static_cast<size_t>(l_p));
    for (int64_t g = 0; g < l_p; ++g) {
        int64_t start = g * n / l_p;
        int64_t stop = (g + 1) * n / l_p;
        groups.push_back(mean_rows(slice_rows(corpus, start, stop - start)));
    }
    return concat_rows(groups);
}

}  // namespace

Var PersonalizationExtractor::forward(Tape& t, ParamStore& ps, const ReferenceImage& ref,
                                      PriorProvider* provider) const {
    Var global_tokens =
        global_proj.forward(t, ps, t.leaf(extract_global(ps, ref.pixels)));
    if (mode == PersonalizationMode::global_only)
        return pool_to_length(t, global_tokens, cfg.l_p);

    EntityClass cls = ref.entity_class;
    if (mode == PersonalizationMode::global_reid) cls = EntityClass::object;  // single backbone
    Tensor prior = provider != nullptr ? provider->encode(ref.pixels, cls)
                                       : extract_prior(ps, ref.pixels, cls);
    Var adapted = adapt(t, ps, t.leaf(prior), cls);
    Var corpus = compose(adapted, global_tokens);
    if (mode == PersonalizationMode::full) return qformer.forward(t, ps, corpus);
    return pool_to_length(t, corpus, cfg.l_p);
}

}  // namespace tora2
