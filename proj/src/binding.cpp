#include "tora2/binding.hpp"

namespace tora2 {

BindingMode binding_mode_from_string(const std::string& s) {
    if (s == "none") return BindingMode::none;
    if (s == "linear") return BindingMode::linear;
    if (s == "gated") return BindingMode::gated;
    throw ConfigError("unknown binding mode: " + s);
}

std::string binding_mode_to_string(BindingMode m) {
    switch (m) {
        case BindingMode::none: return "none";
        case BindingMode::linear: return "linear";
        case BindingMode::gated: return "gated";
    }
    throw ConfigError("unknown binding mode");
}

EntityBinder EntityBinder::create(ParamStore& ps, const std::string& name,
                                  const BindingConfig& cfg, Rng& rng, BindingMode mode) {
    EntityBinder b;
    b.cfg = cfg;
    b.mode = mode;
    b.type_p = ps.add(name + ".type_p", rng.randn({1, cfg.d}, 0.1));
    b.type_m = ps.add(name + ".type_m", rng.randn({1, cfg.d}, 0.1));
    b.type_c = ps.add(name + ".type_c", rng.randn({1, cfg.d}, 0.1));
    b.attn = MultiHeadAttention::create(ps, name + ".attn", cfg.d, cfg.heads, rng, 0.15);
    b.alpha_p = ps.add(name + ".alpha_p", Tensor::scalar(0.0));
    b.alpha_m = ps.add(name + ".alpha_m", Tensor::scalar(0.0));
    b.lin_p = Linear::create(ps, name + ".lin_p", 2 * cfg.d, cfg.d, rng, 0.15, /*zero_init=*/true);
    b.lin_m = Linear::create(ps, name + ".lin_m", 2 * cfg.d, cfg.d, rng, 0.15, /*zero_init=*/true);
    return b;
}

BoundTokens EntityBinder::bind(Tape& t, ParamStore& ps, Var p, Var m, Var words) const {
    const Tensor& pv = t.val(p);
    const Tensor& mv = t.val(m);
    const Tensor& cv = t.val(words);
    if (pv.cols() != cfg.d || mv.cols() != cfg.d || cv.cols() != cfg.d)
        throw ShapeError("bind: token widths must all equal d");
    if (mode == BindingMode::none) return {p, m};

    if (mode == BindingMode::linear) {
        // pooled word context appended column-wise, then a zero-init mix-in
        Var ctx = mean_rows(words);
        auto mix = [&](Var x, const Linear& lin) {
            int64_t n = t.val(x).rows();
            Var ctx_rows = matmul(t.leaf(Tensor::full({n, 1}, 1.0)), ctx);
            return add(x, lin.forward(t, ps, concat_cols({x, ctx_rows})));
        };
        return {mix(p, lin_p), mix(m, lin_m)};
    }

    int64_t l_p = pv.rows(), l_m = mv.rows();
    Var joint = concat_rows({row_broadcast_add(p, t.param(ps, type_p)),
                             row_broadcast_add(m, t.param(ps, type_m)),
                             row_broadcast_add(words, t.param(ps, type_c))});
    Var attended = attn.forward(t, ps, joint, joint);
    Var p_hat = slice_rows(attended, 0, l_p);
    Var m_hat = slice_rows(attended, l_p, l_m);
    Var gp = tanh_op(t.param(ps, alpha_p));
    Var gm = tanh_op(t.param(ps, alpha_m));
    return {add(p, mul_scalar_var(p_hat, gp)), add(m, mul_scalar_var(m_hat, gm))};
}

}  // namespace tora2
