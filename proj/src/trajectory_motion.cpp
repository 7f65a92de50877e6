#include "tora2/trajectory_motion.hpp"

#include <cmath>

#include <json.hpp>

namespace tora2 {

std::vector<Trajectory> trajectories_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValueError(std::string("trajectory json: ") + e.what());
    }
    if (!j.is_array()) throw ValueError("trajectory json: top level must be an array");
    std::vector<Trajectory> out;
    for (const auto& e : j) {
        if (!e.is_object() || !e.contains("entity_id") || !e.contains("points"))
            throw ValueError("trajectory json: entries need entity_id and points");
        Trajectory t;
        t.entity_id = e.at("entity_id").get<std::string>();
        for (const auto& p : e.at("points")) {
            if (!p.is_array() || p.size() != 3)
                throw ValueError("trajectory json: points must be [frame,x,y]");
            t.points.push_back(
                {p[0].get<int64_t>(), p[1].get<double>(), p[2].get<double>()});
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::string trajectories_to_json(const std::vector<Trajectory>& trajs) {
    nlohmann::json j = nlohmann::json::array();
    for (const Trajectory& t : trajs) {
        nlohmann::json pts = nlohmann::json::array();
        for (const TrajPoint& p : t.points) pts.push_back({p.frame, p.x, p.y});
        j.push_back({{"entity_id", t.entity_id}, {"points", pts}});
    }
    return j.dump();
}

void validate_trajectory(const Trajectory& t, int64_t frames, int64_t height, int64_t width) {
    if (t.points.empty()) throw ValueError("trajectory " + t.entity_id + ": no points");
    int64_t prev = -1;
    for (const TrajPoint& p : t.points) {
        if (p.frame <= prev)
            throw ValueError("trajectory " + t.entity_id + ": frames not strictly increasing");
        prev = p.frame;
        if (p.frame < 0 || p.frame >= frames || p.x < 0.0 ||
            p.x >= static_cast<double>(width) || p.y < 0.0 || p.y >= static_cast<double>(height))
            throw BoundsError("trajectory " + t.entity_id + ": point out of bounds at frame " +
                              std::to_string(p.frame));
    }
}

Tensor rasterize(const std::vector<Trajectory>& trajs, int64_t frames, int64_t height,
                 int64_t width, double sigma) {
    if (sigma <= 0.0) throw ValueError("rasterize: sigma must be positive");
    Tensor vol({frames, height, width, 2});
    int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    double cut2 = 9.0 * sigma * sigma;
    for (const Trajectory& t : trajs) {
        validate_trajectory(t, frames, height, width);
        for (size_t i = 0; i < t.points.size(); ++i) {
            const TrajPoint& p = t.points[i];
            double dx = 0.0, dy = 0.0;
            if (i + 1 < t.points.size()) {
                dx = t.points[i + 1].x - p.x;
                dy = t.points[i + 1].y - p.y;
            }
            if (dx == 0.0 && dy == 0.0) continue;
            int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(p.x)) - radius);
            int64_t x1 = std::min(width - 1, static_cast<int64_t>(std::ceil(p.x)) + radius);
            int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(p.y)) - radius);
            int64_t y1 = std::min(height - 1, static_cast<int64_t>(std::ceil(p.y)) + radius);
            for (int64_t y = y0; y <= y1; ++y)
                for (int64_t x = x0; x <= x1; ++x) {
                    double rx = static_cast<double>(x) - p.x;
                    double ry = static_cast<double>(y) - p.y;
                    double r2 = rx * rx + ry * ry;
                    if (r2 > cut2) continue;
                    double g = std::exp(-r2 * inv2s2);
                    vol.at4(p.frame, y, x, 0) += g * dx;
                    vol.at4(p.frame, y, x, 1) += g * dy;
                }
        }
    }
    return vol;
}

MotionEncoder MotionEncoder::create(ParamStore& ps, const std::string& name,
                                    const MotionEncoderConfig& cfg, Rng& rng) {
    MotionEncoder enc;
    enc.cfg = cfg;
    switch (cfg.stride) {
        case 1: enc.s1 = enc.s2 = enc.s3 = 1; break;
        case 2: enc.s1 = 2; enc.s2 = enc.s3 = 1; break;
        case 4: enc.s1 = enc.s2 = 2; enc.s3 = 1; break;
        case 8: enc.s1 = enc.s2 = enc.s3 = 2; break;
        default:
            throw ConfigError("motion encoder: stride must be one of 1,2,4,8");
    }
    if (cfg.height % cfg.stride != 0 || cfg.width % cfg.stride != 0)
        throw ConfigError("motion encoder: video size must be divisible by the stride");
    auto kernel = [&](int64_t s, int64_t cin, int64_t cout) {
        // halving layers use even 4x4 spatial kernels so the arithmetic is exact
        int64_t k = s == 2 ? 4 : 3;
        return rng.randn({3, k, k, cin, cout}, 0.05);
    };
    enc.w1 = ps.add(name + ".conv1.w", kernel(enc.s1, 2, cfg.hidden));
    enc.b1 = ps.add(name + ".conv1.b", Tensor::zeros({1, cfg.hidden}));
    enc.w2 = ps.add(name + ".conv2.w", kernel(enc.s2, cfg.hidden, cfg.hidden));
    enc.b2 = ps.add(name + ".conv2.b", Tensor::zeros({1, cfg.hidden}));
    int64_t k3 = enc.s3 == 2 ? 4 : 3;
    enc.w3 = ps.add(name + ".conv3.w", Tensor::zeros({3, k3, k3, cfg.hidden, cfg.channels}));
    enc.b3 = ps.add(name + ".conv3.b", Tensor::zeros({1, cfg.channels}));
    return enc;
}

Var MotionEncoder::forward(Tape& t, ParamStore& ps, Var disp) const {
    const Tensor& dv = t.val(disp);
    if (dv.ndim() != 4 || dv.shape[3] != 2)
        throw ShapeError("motion encoder: expected (F,H,W,2) displacement volume");
    auto spec = [](int64_t s) {
        Conv3dSpec sp;
        sp.stride_h = sp.stride_w = s;
        sp.pad_t = 1;
        sp.pad_h = sp.pad_w = 1;
        return sp;
    };
    Var h = silu(conv3d(disp, t.param(ps, w1), t.param(ps, b1), spec(s1)));
    h = silu(conv3d(h, t.param(ps, w2), t.param(ps, b2), spec(s2)));
    return conv3d(h, t.param(ps, w3), t.param(ps, b3), spec(s3));
}

std::vector<int64_t> trajectory_cells(const Trajectory& traj, int64_t stride, int64_t lat_frames,
                                      int64_t lat_h, int64_t lat_w) {
    std::vector<int64_t> cells;
    cells.reserve(traj.points.size());
    for (const TrajPoint& p : traj.points) {
        int64_t cx = static_cast<int64_t>(std::floor(p.x / static_cast<double>(stride)));
        int64_t cy = static_cast<int64_t>(std::floor(p.y / static_cast<double>(stride)));
        if (p.frame < 0 || p.frame >= lat_frames || cx < 0 || cx >= lat_w || cy < 0 ||
            cy >= lat_h)
            throw BoundsError("trajectory " + traj.entity_id +
                              ": point outside the latent grid at frame " +
                              std::to_string(p.frame));
        cells.push_back((p.frame * lat_h + cy) * lat_w + cx);
    }
    return cells;
}

MotionTokenMaps MotionTokenMaps::create(ParamStore& ps, const std::string& name, int64_t c,
                                        int64_t d, Rng& rng, double init_std) {
    MotionTokenMaps maps;
    maps.to_tokens = Linear::create(ps, name + ".to_tokens", c, d, rng, init_std);
    maps.from_tokens = Linear::create(ps, name + ".from_tokens", d, c, rng, init_std,
                                      /*zero_init=*/true);
    return maps;
}

Var extract_motion_tokens(Tape& t, ParamStore& ps, const MotionTokenMaps& maps, Var m,
                          const Trajectory& traj, int64_t stride) {
    const Tensor& mv = t.val(m);
    if (mv.ndim() != 4) throw ShapeError("extract tokens: motion volume must be (l,h,w,c)");
    auto cells = trajectory_cells(traj, stride, mv.shape[0], mv.shape[1], mv.shape[2]);
    return maps.to_tokens.forward(t, ps, gather_cells(m, cells));
}

Var scatter_motion_tokens(Tape& t, ParamStore& ps, const MotionTokenMaps& maps, Var m, Var tokens,
                          const Trajectory& traj, int64_t stride) {
    const Tensor& mv = t.val(m);
    if (mv.ndim() != 4) throw ShapeError("scatter tokens: motion volume must be (l,h,w,c)");
    auto cells = trajectory_cells(traj, stride, mv.shape[0], mv.shape[1], mv.shape[2]);
    Var rows = maps.from_tokens.forward(t, ps, tokens);
    return scatter_add_cells(m, rows, cells);
}

}  // namespace tora2
