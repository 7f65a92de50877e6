#pragma once

#include <array>
#include <string>
#include <vector>

#include "tora2/dit.hpp"
#include "tora2/tensor.hpp"

namespace tora2 {

// Fixed caption vocabulary shared by the data generator, the text embedding
// table, and the bag-of-words evaluation features.
const std::vector<std::string>& synth_vocabulary();
int64_t vocab_id(const std::string& word);  // ValueError on unknown words

// Entity nouns carry a class (drives the personalization dispatch) and a
// sprite shape; colors map to palette RGB.
const std::vector<std::string>& synth_nouns();
const std::vector<std::string>& synth_colors();
EntityClass noun_class(const std::string& noun);
std::array<double, 3> palette_rgb(const std::string& color);

enum class SpriteShape { square, circle, diamond };
SpriteShape noun_shape(const std::string& noun);

// One textured sprite moving along an exactly evaluable control-point path
// (straight segment for two points, quadratic curve for three).
struct SpriteSpec {
    std::string noun;
    std::string color;
    int texture = 0;  // 0 stripes, 1 checker, 2 dots, 3 rings
    double radius = 7.0;
    std::vector<std::array<double, 2>> control;  // px positions, 2..3 points
};

struct SceneSpec {
    int64_t frames = 8;
    int64_t height = 64, width = 64;
    int64_t ref_res = 32;
    std::vector<SpriteSpec> sprites;  // 1..3, distinct nouns and colors
};

// Rendered scene plus everything a training step conditions on. Ground-truth
// trajectories are the exact analytic sprite centers, one point per frame.
struct TrainSample {
    Tensor video;  // (F,H,W,3) in [0,1]
    std::vector<int64_t> caption_ids;
    std::vector<EntityBundle> bundles;
    std::vector<Trajectory> gt_trajectories;
};

// Exact path evaluation at u in [0,1] (lerp chain over the control points).
std::array<double, 2> path_point(const std::vector<std::array<double, 2>>& control, double u);

// Deterministic render of a validated spec; the seed keys sprite texture
// phases so different seeds give different identities under the same layout.
// Throws ValueError on out-of-canvas or overlapping sprites.
TrainSample synthesize_scene(const SceneSpec& spec, uint64_t seed);

// Samples a non-overlapping scene layout (distinct nouns, distinct colors);
// throws ValueError when no layout fits after bounded retries.
SceneSpec random_scene(Rng& rng, int n_entities, int64_t frames, int64_t height, int64_t width,
                       int64_t ref_res);

}  // namespace tora2
