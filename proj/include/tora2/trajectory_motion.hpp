#pragma once

#include <string>
#include <vector>

#include "tora2/autograd.hpp"
#include "tora2/nn.hpp"
#include "tora2/tensor.hpp"

namespace tora2 {

struct TrajPoint {
    int64_t frame = 0;
    double x = 0.0, y = 0.0;  // source pixel coordinates
};

struct Trajectory {
    std::string entity_id;
    std::vector<TrajPoint> points;  // frames strictly increasing
};

// JSON wire format: [{"entity_id": ..., "points": [[frame,x,y], ...]}, ...]
std::vector<Trajectory> trajectories_from_json(const std::string& text);
std::string trajectories_to_json(const std::vector<Trajectory>& trajs);

// Validates frame ordering and pixel bounds; throws BoundsError naming the
// entity and frame on violation.
void validate_trajectory(const Trajectory& t, int64_t frames, int64_t height, int64_t width);

// Dense displacement field (F, H, W, 2): channel 0 = dx, 1 = dy in px/frame.
// Each point splats an unnormalized Gaussian (peak 1 at the center, cut off
// at Euclidean radius 3*sigma) scaled by the forward displacement to the next
// point; the last point carries zero displacement. Overlapping splats sum.
Tensor rasterize(const std::vector<Trajectory>& trajs, int64_t frames, int64_t height,
                 int64_t width, double sigma);

// Splat width in px for a given latent stride (1.5 latent cells).
inline double default_splat_sigma(int64_t stride) { return 1.5 * static_cast<double>(stride); }

struct MotionEncoderConfig {
    int64_t frames = 8;
    int64_t height = 64, width = 64;  // pixel space
    int64_t stride = 4;               // spatial compression; one of 1,2,4,8
    int64_t channels = 16;            // motion volume channel count
    int64_t hidden = 32;              // conv width
};

// Deterministic 3-layer strided conv stack: (F,H,W,2) -> (F, H/s, W/s, c).
// No temporal compression, so frame f of the volume corresponds exactly to
// frame f of the video. The final layer is zero-initialized.
struct MotionEncoder {
    MotionEncoderConfig cfg;
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1, w3 = -1, b3 = -1;
    int64_t s1 = 1, s2 = 1, s3 = 1;  // per-layer spatial strides

    static MotionEncoder create(ParamStore& ps, const std::string& name,
                                const MotionEncoderConfig& cfg, Rng& rng);
    Var forward(Tape& t, ParamStore& ps, Var disp) const;

    int64_t lat_h() const { return cfg.height / cfg.stride; }
    int64_t lat_w() const { return cfg.width / cfg.stride; }
};

// Flattened latent cell indices visited by a trajectory, one per point.
std::vector<int64_t> trajectory_cells(const Trajectory& traj, int64_t stride, int64_t lat_frames,
                                      int64_t lat_h, int64_t lat_w);

// Learned projections bridging dense motion volume cells (width c) and
// per-entity motion token rows (width d).
struct MotionTokenMaps {
    Linear to_tokens;    // c -> d
    Linear from_tokens;  // d -> c, zero-initialized so scatter starts inert

    static MotionTokenMaps create(ParamStore& ps, const std::string& name, int64_t c, int64_t d,
                                  Rng& rng, double init_std);
};

// Gathers the cell vector under each trajectory point and projects c -> d.
// m is (l, h, w, c); result is (l, d).
Var extract_motion_tokens(Tape& t, ParamStore& ps, const MotionTokenMaps& maps, Var m,
                          const Trajectory& traj, int64_t stride);

// Projects tokens d -> c and adds them residually at exactly the cells
// extract_motion_tokens reads; all other cells pass through bitwise.
Var scatter_motion_tokens(Tape& t, ParamStore& ps, const MotionTokenMaps& maps, Var m, Var tokens,
                          const Trajectory& traj, int64_t stride);

}  // namespace tora2
