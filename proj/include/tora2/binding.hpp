#pragma once

#include <string>

#include "tora2/autograd.hpp"
#include "tora2/nn.hpp"

namespace tora2 {

enum class BindingMode {
    none,    // p and m pass through untouched
    linear,  // p/m each mixed with pooled word context through a zero-init linear
    gated,   // joint self-attention with tanh-gated residuals (the real path)
};

BindingMode binding_mode_from_string(const std::string& s);
std::string binding_mode_to_string(BindingMode m);

struct BindingConfig {
    int64_t d = 64;
    int heads = 4;
};

struct BoundTokens {
    Var p;  // (l_p, d)
    Var m;  // (l_m, d)
};

// Fuses one entity's personalization tokens, motion tokens and word tokens.
// The joint sequence [p; m; c] (plus learned per-modality type embeddings)
// runs through one self-attention block; p and m take tanh-gated residual
// updates while the word tokens act as context only and are never modified.
// Gates start at zero, so a fresh binder is an exact identity on p and m.
struct EntityBinder {
    BindingConfig cfg;
    BindingMode mode = BindingMode::gated;

    int type_p = -1, type_m = -1, type_c = -1;  // (1, d) modality embeddings
    MultiHeadAttention attn;
    int alpha_p = -1, alpha_m = -1;  // scalar gates, initialized to 0
    Linear lin_p, lin_m;             // 2d -> d, zero-init (linear mode)

    static EntityBinder create(ParamStore& ps, const std::string& name, const BindingConfig& cfg,
                               Rng& rng, BindingMode mode = BindingMode::gated);

    // p (l_p, d), m (l_m, d), words (l_c, d) -> updated p and m.
    BoundTokens bind(Tape& t, ParamStore& ps, Var p, Var m, Var words) const;
};

}  // namespace tora2
