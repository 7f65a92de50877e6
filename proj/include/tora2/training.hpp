#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tora2/config.hpp"
#include "tora2/dit.hpp"
#include "tora2/synth.hpp"

namespace tora2 {

// Which conditioning streams a training sample keeps this step.
struct DropoutFlags {
    bool caption = false;
    bool references = false;
    bool trajectories = false;
};

// Three independent Bernoulli draws at the configured rates, in caption /
// references / trajectories order (the order is part of the determinism
// contract: a seeded rng reproduces the exact flag sequence).
DropoutFlags draw_condition_dropout(Rng& rng, const DropoutConfig& cfg = {});

// Stamps freshly drawn drop flags onto a copy of the conditioning. Content
// is untouched; the model substitutes null tokens / a zero motion volume for
// dropped streams, so an all-dropped sample is exactly the unconditional
// branch used at guidance time.
RawConditioning apply_condition_dropout(const RawConditioning& cond, Rng& rng,
                                        const DropoutConfig& cfg = {});

// Deterministic synthetic corpus: train_scenes scenes cycling 1..max_entities
// sprites, each generated from a seed derived off cfg.seed and the index.
std::vector<TrainSample> synthesize_dataset(const DataConfig& cfg);

// Pixel space [0,1] <-> model latent space [-1,1].
Tensor latent_from_video(const Tensor& video);
Tensor video_from_latent(const Tensor& latent);  // clamps back into [0,1]

// The sample's caption ids and entity bundles as model conditioning, flags
// all clear.
RawConditioning conditioning_from_sample(const TrainSample& s);

struct TrainLogRow {
    int64_t step = 0;
    double l_eps = 0.0;
    double l_cont = 0.0;
    double total = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;  // first step, every log_every-th, last step
    int64_t steps = 0;
};

// "step,l_eps,l_cont,total" header plus one row per logged step.
std::string metrics_csv(const std::vector<TrainLogRow>& log);

// Freeze policy. The personalization prior encoders are always frozen; with
// freeze_backbone the rest of the base transformer freezes too and only the
// conditioning additions stay trainable: motion encoder, motion token maps,
// per-block fuse convolutions and personalization cross-attention, the
// extractor's trainable parts, the binder, and the personalization null
// token.
void apply_freeze(ParamStore& ps, const ConditionedDiT& model, const std::string& model_name,
                  bool freeze_backbone);

// Optimization loop. Each step draws a batch with replacement, noises each
// sample's latent at an independent uniform timestep, runs the conditioned
// forward, and descends mean denoising error plus lambda times the
// symmetric alignment loss over all post-binding (p, m) entity pairs pooled
// across the batch (skipped when fewer than two pairs survive dropout).
// Aborts with ValueError on a non-finite loss, naming the step and both
// loss terms. Deterministic given (config, dataset, store contents).
TrainResult train(ParamStore& ps, ConditionedDiT& model, const std::string& model_name,
                  const RunConfig& cfg, const std::vector<TrainSample>& data);

}  // namespace tora2
