#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tora2/config.hpp"
#include "tora2/dit.hpp"
#include "tora2/synth.hpp"
#include "tora2/training.hpp"

namespace tora2 {

// Mean over frames of |dx| + |dy| between aligned trajectory points, in
// pixels. Throws ValueError when the frame counts differ or the per-index
// frame stamps disagree.
double traj_error(const Trajectory& pred, const Trajectory& gt);

// Cosine similarity between two equally shaped feature tensors, in [-1, 1].
// Throws ValueError on a zero vector (either side) or a shape mismatch.
double similarity(const Tensor& a, const Tensor& b);

// Caption ids as a word-count vector over the shared vocabulary: (vocab,).
Tensor bow_embedding(const std::vector<int64_t>& ids, int64_t vocab);

// ---- oracle video analysis ------------------------------------------------

// (H,W,3) copy of one frame of an (F,H,W,3) video.
Tensor frame_image(const Tensor& video, int64_t frame);

// Unit-length chromaticity (RGB minus its gray component) that dominates an
// image, weighted by per-pixel chroma strength. Painted sprites keep every
// pixel on a ray through their palette color, so a clean reference maps
// exactly to that color's chroma axis. Throws ValueError when the image is
// fully achromatic.
std::array<double, 3> dominant_chroma(const Tensor& image);

// Per-frame unweighted centroid of the pixels whose chromaticity matches the
// given axis (soft chroma-weighted fallback when no pixel matches, frame
// center when a frame is fully achromatic). Pixel-center coordinates; one
// point per frame.
Trajectory track_centroid(const Tensor& video, const std::array<double, 3>& chroma_axis,
                          const std::string& entity_id);

// size x size crop around (cx, cy) in frame f, shifted (not padded) to stay
// inside the canvas; size must be odd and fit the frame.
Tensor crop_region(const Tensor& video, int64_t frame, double cx, double cy, int64_t size);

// Bilinear resample of an (h, w, 3) image to (out_h, out_w, 3).
Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w);

// Caption ids re-estimated from a generated video: each entity's color word
// is replaced by the palette color nearest the chromaticity found inside the
// ground-truth box track; all other words are kept. Drives the text-adherence
// score.
std::vector<int64_t> analysis_caption_ids(const TrainSample& gt, const Tensor& generated);

// ---- metric suite ----------------------------------------------------------

// The pluggable feature extractors behind the similarity scores. Defaults
// reuse the frozen encoders from the personalization extractor (global
// features for whole frames and subject crops, the face prior for face
// crops) and the bag-of-words caption embedding for text.
struct Embedders {
    std::function<Tensor(const std::vector<int64_t>&)> text;  // caption ids -> features
    std::function<Tensor(const Tensor&)> frame;    // (r,r,3) image -> video features
    std::function<Tensor(const Tensor&)> subject;  // (r,r,3) crop -> subject features
    std::function<Tensor(const Tensor&)> face;     // (r,r,3) crop -> face features
};

Embedders default_embedders(ParamStore& ps, const PersonalizationExtractor& dpe, int64_t vocab);

// One method's scores. Similarities live in [-1, 1], the trajectory error in
// pixels is >= 0; a NaN marks an empty slice (e.g. no human entity in the
// evaluation set) and prints as an empty/dash cell.
struct MetricValues {
    double text_s = 0.0;
    double vid_s = 0.0;
    double subj_s = 0.0;
    double face_s = 0.0;
    double traj_error = 0.0;
};

struct MetricRow {
    std::string label;
    MetricValues overall;  // all scenes / entities
    MetricValues human;    // human entities; scene scores over scenes with one
    MetricValues object;   // non-human entities, same convention
};

// Per-method rows with an entity-class split, emitted as CSV or an aligned
// text table.
struct MetricReport {
    std::vector<MetricRow> rows;
    std::string to_csv() const;
    std::string to_text_table() const;
};

// Scores one generated video against its ground-truth scene: text adherence
// via the re-estimated caption, frame similarity against the ground-truth
// render, subject/face similarity of ground-truth-box crops against the
// references, and the tracked-centroid trajectory error. `human_only`
// selects the entity slice (0 = objects, 1 = humans, -1 = all).
MetricValues score_generation(const Embedders& emb, const TrainSample& gt,
                              const Tensor& generated, int human_only = -1);

// Deterministic held-out scenes drawn from the evaluation seed (disjoint
// from the training corpus whenever the seeds differ).
std::vector<TrainSample> held_out_scenes(const RunConfig& cfg);

struct EvalOptions {
    bool drop_trajectories = false;  // sample without motion conditioning
};

// Samples every held-out scene with classifier-free guidance and averages
// the per-scene scores into one labeled row (plus the class split).
MetricRow evaluate_model(ParamStore& ps, const ConditionedDiT& model, const RunConfig& cfg,
                         const std::vector<TrainSample>& scenes, const std::string& label,
                         const EvalOptions& opts = {});

// ---- ablation harnesses ----------------------------------------------------

// Row labels for a variant-comparison harness; ConfigError on an unknown id.
// Ids: dpe_variants, binding_variants, contrastive_onoff, injection_order.
std::vector<std::string> ablation_row_labels(const std::string& harness_id);

// Trains one model per variant row under identical seeds and data, evaluates
// each on the same held-out scenes, and returns the rows in table order.
// Desk-scale numbers document directions only.
MetricReport run_ablation(const std::string& harness_id, const RunConfig& cfg);

}  // namespace tora2
