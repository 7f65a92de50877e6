#pragma once

#include <array>
#include <string>
#include <vector>

#include "tora2/autograd.hpp"
#include "tora2/binding.hpp"
#include "tora2/nn.hpp"
#include "tora2/personalization.hpp"
#include "tora2/trajectory_motion.hpp"

namespace tora2 {

enum class InjectionOrder { motion_first, personalization_first };

InjectionOrder injection_order_from_string(const std::string& s);  // "M_then_P" / "P_then_M"
std::string injection_order_to_string(InjectionOrder o);

struct DiTConfig {
    int64_t frames = 8;
    int64_t height = 64, width = 64;
    int64_t channels = 3;  // pixel channels of the modeled video
    int64_t patch = 4;     // spatial patch stride; motion grid must match
    int64_t d = 64;
    int depth = 4;
    int heads = 4;
    int64_t vocab = 64;     // caption token id space
    int64_t max_text = 16;  // maximum caption length
    int64_t c_m = 16;       // motion volume channels
    int64_t m_hidden = 32;  // motion encoder conv width
    InjectionOrder order = InjectionOrder::motion_first;
    int64_t schedule_steps = 1000;  // diffusion time discretization
    double cosine_s = 0.008;

    int64_t grid_h() const { return height / patch; }
    int64_t grid_w() const { return width / patch; }
    int64_t video_tokens() const { return frames * grid_h() * grid_w(); }
};

// Cosine signal/noise schedule over integer steps 0..T-1; alpha_bar(0) = 1.
struct NoiseSchedule {
    int64_t steps = 1000;
    double s = 0.008;
    double alpha_bar(int64_t t) const;
};

// One entity's raw conditioning: which caption words, which path, which look.
struct EntityBundle {
    std::string entity_id;
    int64_t word_start = 0, word_len = 0;  // span into the caption ids
    Trajectory trajectory;
    ReferenceImage reference;
};

// Tape-free description of everything a sample is conditioned on. Drop flags
// replace the corresponding stream with learned null tokens / a zero volume.
struct RawConditioning {
    std::vector<int64_t> caption_ids;
    std::vector<EntityBundle> entities;
    bool drop_caption = false;
    bool drop_references = false;
    bool drop_trajectories = false;

    static RawConditioning unconditional() {
        RawConditioning c;
        c.drop_caption = c.drop_references = c.drop_trajectories = true;
        return c;
    }
};

// Tape-bound conditioning ready for the blocks.
struct ConditioningSet {
    Var caption_tokens;  // (l_text, d); the null token row when dropped
    Var motion_volume;   // (F, gh, gw, c_m) after entity write-back
    Var p_corpus;        // (N*l_p, d) bound tokens, or the null row

    // Post-binding (p, m) token pairs for entities that kept both a
    // reference and a trajectory; the contrastive objective pools one
    // vector from each side.
    std::vector<std::array<Var, 2>> contrast_pairs;
};

struct DiTBlock {
    LayerNormParams ln1, ln2, ln_x;
    Linear mod;                          // t embedding -> 6d (zero-init)
    int fuse_scale_w = -1, fuse_scale_b = -1;  // motion -> gamma (zero-init)
    int fuse_shift_w = -1, fuse_shift_b = -1;  // motion -> beta (zero-init)
    MultiHeadAttention attn;             // joint self-attention over [text; video]
    MultiHeadAttention xattn;            // video -> personalization corpus, zero-init out
    Mlp ff;

    static DiTBlock create(ParamStore& ps, const std::string& name, const DiTConfig& cfg,
                           Rng& rng);

    // (1+gamma) * z + beta with gamma/beta read off the motion volume cells.
    Var fuse_motion(Tape& t, ParamStore& ps, Var z_tokens, Var motion_volume,
                    const DiTConfig& cfg) const;

    Var forward(Tape& t, ParamStore& ps, Var z_tokens, const ConditioningSet& cond, Var t_embed,
                const DiTConfig& cfg, std::vector<std::string>* trace) const;
};

// Diffusion transformer over patchified video with three conditioning paths:
// dense motion modulation, caption tokens joined into self-attention, and
// personalization tokens through per-block cross-attention.
struct ConditionedDiT {
    DiTConfig cfg;
    DpeConfig dpe_cfg;

    Linear patch_embed;  // patch pixels -> d
    int pos_video = -1;  // (video_tokens, d)
    int text_embed = -1; // (vocab, d)
    int pos_text = -1;   // (max_text, d)
    int null_text = -1;  // (1, d)
    int null_p = -1;     // (1, d)
    Mlp t_mlp;
    std::vector<DiTBlock> blocks;
    LayerNormParams final_ln;
    Linear unpatch;      // d -> patch pixels, zero-init

    MotionEncoder motion_enc;
    MotionTokenMaps token_maps;
    PersonalizationExtractor dpe;
    EntityBinder binder;

    // When set, every block appends its stage tags here in execution order.
    mutable std::vector<std::string>* trace = nullptr;

    static ConditionedDiT create(ParamStore& ps, const std::string& name, const DiTConfig& cfg,
                                 const DpeConfig& dpe_cfg, Rng& rng,
                                 PersonalizationMode pmode = PersonalizationMode::full,
                                 BindingMode bmode = BindingMode::gated);

    std::vector<std::string> frozen_prefixes(const std::string& name) const;

    // Embeds captions, encodes motion, extracts + binds entities.
    ConditioningSet prepare_conditioning(Tape& t, ParamStore& ps,
                                         const RawConditioning& cond) const;

    // z_t (F,H,W,channels) on tape; step in [0, schedule_steps).
    Var predict_noise(Tape& t, ParamStore& ps, Var z_t, int64_t step,
                      const RawConditioning& cond) const;

    // Same forward over conditioning already prepared on this tape, so a
    // caller can reuse the set (and its contrast pairs) for several heads.
    Var predict_noise(Tape& t, ParamStore& ps, Var z_t, int64_t step,
                      const ConditioningSet& cs) const;

    // Deterministic reverse process from seeded noise with classifier-free
    // guidance eps_u + guidance * (eps_c - eps_u); the unconditional branch
    // drops all three condition streams.
    Tensor sample(ParamStore& ps, const RawConditioning& cond, int64_t steps, double guidance,
                  uint64_t seed) const;

    NoiseSchedule schedule() const { return NoiseSchedule{cfg.schedule_steps, cfg.cosine_s}; }

    // Patch-cell helpers shared by patchify/unpatchify and tests.
    std::vector<int64_t> patch_cells(int64_t dy, int64_t dx) const;
    Var patchify(Tape& t, ParamStore& ps, Var z) const;    // -> (video_tokens, d)
    Var unpatchify(Tape& t, ParamStore& ps, Var rows) const;  // -> (F,H,W,channels)
};

}  // namespace tora2
