#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tora2/tensor.hpp"
#include "tora2/trajectory_motion.hpp"

namespace tora2 {

// Metadata and upstream scorer outputs for one candidate clip. The scorers
// themselves (aesthetic predictor, optical-flow magnitude, camera-motion
// detector) run outside this module; filtering only applies thresholds to
// the numbers they produced.
struct VideoRecord {
    std::string id;
    int64_t width = 0, height = 0;  // px
    double duration = 0.0;          // seconds
    std::string caption;
    double aesthetic = 0.0;     // aesthetic predictor score
    double flow = 0.0;          // optical-flow magnitude score
    double zoom = 0.0;          // zoom detector score
    double camera_angle = 0.0;  // dominant camera movement angle, deg in [0,360)
    bool decoded_ok = true;     // false when the clip failed to decode
    int64_t word_count = 0;     // caption length in whitespace-separated words
};

// Thresholds for the filter rules and the mask sanity checks. The acceptance
// bands below are inclusive; the aesthetic and flow scores must strictly
// exceed their minima.
struct RulesConfig {
    int64_t min_dim = 720;                  // reject when min(width,height) falls below
    double min_aesthetic = 5.0;             // strict lower bound
    double min_flow = 2.0;                  // strict lower bound
    double zoom_lo = 0.4, zoom_hi = 0.6;    // inclusive acceptance band
    std::vector<std::array<double, 2>> angle_windows = {
        {{0.0, 30.0}}, {{150.0, 200.0}}, {{330.0, 360.0}}};  // inclusive, degrees
    int64_t max_caption_words = 120;
    double mask_area_lo = 0.005, mask_area_hi = 0.60;  // fraction of frame area
    double mask_component_min = 0.80;  // largest 4-connected component's share of mask area
};

// Outcome of filter_video. A record is accepted exactly when no rule fired,
// so `accepted` is always equivalent to `rejection_reasons.empty()`.
struct FilterDecision {
    bool accepted = true;
    std::vector<std::string> rejection_reasons;  // rule ids, in rule order
};

// Rule ids in evaluation order: "decode", "resolution", "aesthetic", "flow",
// "zoom", "camera-angle", "caption-length", "entity-words".
const std::vector<std::string>& filter_rule_ids();

// Applies every rule independently and reports all failures; a pure
// conjunction with no short-circuiting, so fixing one listed reason removes
// exactly that reason from the decision. Total function: any finite record
// yields a decision.
FilterDecision filter_video(const VideoRecord& rec, const RulesConfig& rules = {});

// Nouns recognized as subject entities: the synthetic-scene nouns plus a few
// common object words, all singular.
const std::vector<std::string>& entity_lexicon();

// Singular lexicon nouns present in the caption, deduplicated, in first-use
// order. Matching is lowercase whole-word.
std::vector<std::string> extract_entity_words(const std::string& caption);

// Lexicon nouns that appear in plural form (stem + "s"), deduplicated, in
// first-use order. Used by the "entity-words" rule to reject ambiguous
// multi-instance captions.
std::vector<std::string> plural_entity_words(const std::string& caption);

// Binary segmentation of one entity in one frame.
struct EntityMask {
    Tensor mask;  // (H, W), values exactly 0 or 1
    int64_t frame = 0;
    std::string word;
};

// Sanity gate on a detector mask: its area fraction of the frame must lie in
// [mask_area_lo, mask_area_hi] and its largest 4-connected component must
// hold at least mask_component_min of the mask's area (rejects fragmented
// detections). Empty masks fail the area check.
bool mask_ok(const EntityMask& m, int64_t frame_area, const RulesConfig& rules = {});

// Segmentation backend. Returns an (H,W) binary mask for `word` on frame
// `frame` of the (F,H,W,3) video, or nullopt when the detector finds nothing.
struct Segmenter {
    virtual ~Segmenter() = default;
    virtual std::optional<Tensor> segment(const Tensor& video, int64_t frame,
                                          const std::string& word) = 0;
};

// Point-tracking backend. Propagates `point` (x,y px), anchored at frame
// `anchor`, to every frame of the video; returns one (x,y) per frame.
struct PointTracker {
    virtual ~PointTracker() = default;
    virtual std::vector<std::array<double, 2>> track(const Tensor& video, int64_t anchor,
                                                     const std::array<double, 2>& point) = 0;
};

// One curated training triplet: the entity word, a reference crop taken from
// the first frame's mask bounding box, and the merged two-pass tracklet.
struct TripletRow {
    std::string word;
    Tensor crop;          // (h, w, 3)
    Trajectory tracklet;  // one point per frame, entity_id = word
};

// Output of build_triplets. `skipped` logs one "word: reason" line for every
// extracted entity that produced no row, so rows.size() + skipped.size()
// equals the extracted entity word count.
struct TripletResult {
    std::vector<TripletRow> rows;
    std::vector<std::string> skipped;
};

// For each singular entity word in the caption: segments frames 0, F/2 and
// F-1, gates all three masks through mask_ok, then tracks the first-frame
// mask center across the clip, re-tracks from the midpoint refined against
// the middle mask's center, and averages the two passes into one tracklet.
// Detector failures and gate rejections skip the entity with a logged reason
// instead of throwing.
TripletResult build_triplets(const Tensor& video, const std::string& caption, Segmenter& seg,
                             PointTracker& tracker, const RulesConfig& rules = {});

// JSONL wire format. parse_video_record accepts one JSON object per line with
// keys matching the VideoRecord fields ("word_count" optional: derived from
// the caption when absent); unknown keys are ignored as upstream metadata.
// Throws ValueError naming the key on missing/mistyped fields, non-finite
// scores, or an angle outside [0, 360).
VideoRecord parse_video_record(const std::string& json_line);
std::string video_record_json(const VideoRecord& rec);

// One manifest line per record: id, accepted flag, and rejection reasons.
std::string filter_decision_json(const VideoRecord& rec, const FilterDecision& d);

// Parses a RulesConfig JSON object. Unknown keys are rejected with
// ConfigError naming the key (configs are authored by hand, so typos must
// not silently fall back to defaults). Missing keys keep their defaults.
RulesConfig parse_rules_config(const std::string& json_text);

}  // namespace tora2
