#include "tora2/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

namespace tora2 {

namespace {

const std::vector<std::string> kNouns = {"dancer", "diver", "skater", "robot", "cube",
                                         "ball",   "drone", "kite",   "fish",  "star"};
const std::vector<std::string> kColors = {"red",    "blue",   "green", "yellow",
                                          "purple", "orange", "cyan",  "magenta"};
const std::vector<std::string> kVerbs = {"glides", "drifts", "slides", "circles"};

std::vector<std::string> build_vocabulary() {
    std::vector<std::string> v = {"the", "and", "a"};
    v.insert(v.end(), kColors.begin(), kColors.end());
    v.insert(v.end(), kNouns.begin(), kNouns.end());
    v.insert(v.end(), kVerbs.begin(), kVerbs.end());
    return v;
}

// Per-sprite texture parameters derived from the render seed, so identity is
// stable within a scene (video and reference agree) but varies across seeds.
struct TextureParams {
    double freq = 1.0, phase = 0.0, cell = 3.0, ox = 0.0, oy = 0.0;
    // continuous shade applied to the pattern value: keeps the whole sprite on
    // its color ray but makes every seed render-distinct even for the binary
    // patterns (checker, dots), whose cells quantize onto the pixel grid
    double bias = 0.0, contrast = 0.95;
};

TextureParams texture_params(uint64_t seed, size_t sprite_index) {
    std::string key = std::to_string(seed) + "/" + std::to_string(sprite_index);
    uint64_t h = fnv1a64("texture/" + key);
    TextureParams p;
    p.freq = 0.7 + static_cast<double>(h & 0xff) / 255.0 * 0.9;
    p.phase = static_cast<double>((h >> 8) & 0xff) / 255.0 * 6.28318530717958647692;
    p.cell = 2.0 + static_cast<double>((h >> 16) & 0x3);
    p.ox = static_cast<double>((h >> 24) & 0xff) / 255.0 * 8.0;
    p.oy = static_cast<double>((h >> 32) & 0xff) / 255.0 * 8.0;
    uint64_t s = fnv1a64("shade/" + key);
    p.bias = static_cast<double>(s & ((uint64_t(1) << 53) - 1)) / static_cast<double>(uint64_t(1) << 53) * 0.05;
    p.contrast = 0.9 + static_cast<double>(s >> 32) / 4294967296.0 * 0.05;
    return p;
}

// High-frequency procedural value in [0,1] at sprite-local coordinates.
double texture_value(int id, const TextureParams& p, double u, double v) {
    switch (id) {
        case 0:  // stripes
            return 0.5 + 0.5 * std::sin(p.freq * (u + p.ox) * 2.0 + p.phase);
        case 1: {  // checker
            int64_t cu = static_cast<int64_t>(std::floor((u + p.ox) / p.cell));
            int64_t cv = static_cast<int64_t>(std::floor((v + p.oy) / p.cell));
            return ((cu + cv) & 1) == 0 ? 1.0 : 0.0;
        }
        case 2: {  // dots
            double lu = u + p.ox, lv = v + p.oy;
            double du = lu - std::round(lu / p.cell) * p.cell;
            double dv = lv - std::round(lv / p.cell) * p.cell;
            return du * du + dv * dv <= 0.30 * p.cell * p.cell ? 1.0 : 0.0;
        }
        case 3: {  // rings
            double du = u + p.ox, dv = v + p.oy;
            return 0.5 + 0.5 * std::sin(p.freq * 2.0 * std::sqrt(du * du + dv * dv) + p.phase);
        }
        default:
            throw ConfigError("texture: unknown id " + std::to_string(id));
    }
}

bool inside_shape(SpriteShape s, double dx, double dy, double r) {
    switch (s) {
        case SpriteShape::square: return std::fabs(dx) <= r && std::fabs(dy) <= r;
        case SpriteShape::circle: return dx * dx + dy * dy <= r * r;
        case SpriteShape::diamond: return std::fabs(dx) + std::fabs(dy) <= r;
    }
    return false;
}

// Paints one sprite onto frame f of a (F,H,W,3) video or onto a single
// (H,W,3) image (f ignored).
void paint_sprite(Tensor& vol, int64_t f, const SpriteSpec& sp, const TextureParams& tp,
                  double cx, double cy) {
    bool video = vol.ndim() == 4;
    int64_t h = video ? vol.shape[1] : vol.shape[0];
    int64_t w = video ? vol.shape[2] : vol.shape[1];
    int64_t frame_base = video ? f * h * w * 3 : 0;
    std::array<double, 3> base = palette_rgb(sp.color);
    SpriteShape shape = noun_shape(sp.noun);
    int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cy - sp.radius - 1)));
    int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(cy + sp.radius + 1)));
    int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - sp.radius - 1)));
    int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(cx + sp.radius + 1)));
    for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x) {
            double dx = (static_cast<double>(x) + 0.5) - cx;
            double dy = (static_cast<double>(y) + 0.5) - cy;
            if (!inside_shape(shape, dx, dy, sp.radius)) continue;
            double t = tp.bias + tp.contrast * texture_value(sp.texture, tp, dx + sp.radius, dy + sp.radius);
            double lum = 0.25 + 0.75 * t;  // texture modulates along the color ray
            size_t at = static_cast<size_t>(frame_base + (y * w + x) * 3);
            for (size_t c = 0; c < 3; ++c) vol.data[at + c] = base[c] * lum;
        }
}

void validate_spec(const SceneSpec& spec) {
    if (spec.frames < 1) throw ValueError("scene: needs at least one frame");
    if (spec.sprites.empty() || spec.sprites.size() > 3)
        throw ValueError("scene: entity count must be 1..3");
    std::set<std::string> nouns, colors;
    for (const SpriteSpec& sp : spec.sprites) {
        noun_class(sp.noun);  // validates the noun
        palette_rgb(sp.color);
        if (!nouns.insert(sp.noun).second)
            throw ValueError("scene: duplicate entity word '" + sp.noun + "'");
        if (!colors.insert(sp.color).second)
            throw ValueError("scene: duplicate color '" + sp.color + "'");
        if (sp.radius < 3.0) throw ValueError("scene: sprite radius below 3 px");
        if (sp.control.size() < 2 || sp.control.size() > 3)
            throw ValueError("scene: paths need 2 or 3 control points");
        for (const auto& c : sp.control) {
            // the path stays inside the hull of its control points
            if (c[0] < sp.radius + 1.0 || c[0] > double(spec.width) - sp.radius - 1.0 ||
                c[1] < sp.radius + 1.0 || c[1] > double(spec.height) - sp.radius - 1.0)
                throw ValueError("scene: sprite '" + sp.noun + "' leaves the canvas");
        }
        if (2.0 * sp.radius + 2.0 > double(spec.ref_res))
            throw ValueError("scene: sprite too large for the reference resolution");
        if (sp.texture < 0 || sp.texture > 3) throw ValueError("scene: unknown texture id");
    }
}

double path_u(int64_t f, int64_t frames) {
    return frames > 1 ? static_cast<double>(f) / static_cast<double>(frames - 1) : 0.0;
}

}  // namespace

const std::vector<std::string>& synth_vocabulary() {
    static const std::vector<std::string> v = build_vocabulary();
    return v;
}

int64_t vocab_id(const std::string& word) {
    static const std::unordered_map<std::string, int64_t> index = [] {
        std::unordered_map<std::string, int64_t> m;
        const auto& v = synth_vocabulary();
        for (size_t i = 0; i < v.size(); ++i) m[v[i]] = static_cast<int64_t>(i);
        return m;
    }();
    auto it = index.find(word);
    if (it == index.end()) throw ValueError("vocabulary: unknown word '" + word + "'");
    return it->second;
}

const std::vector<std::string>& synth_nouns() { return kNouns; }
const std::vector<std::string>& synth_colors() { return kColors; }

EntityClass noun_class(const std::string& noun) {
    if (noun == "dancer" || noun == "diver" || noun == "skater" || noun == "robot")
        return EntityClass::human;
    if (std::find(kNouns.begin(), kNouns.end(), noun) == kNouns.end())
        throw ValueError("scene: unknown entity word '" + noun + "'");
    return EntityClass::object;
}

SpriteShape noun_shape(const std::string& noun) {
    if (noun == "robot" || noun == "cube") return SpriteShape::square;
    if (noun == "dancer" || noun == "skater" || noun == "ball" || noun == "fish")
        return SpriteShape::circle;
    noun_class(noun);  // validates
    return SpriteShape::diamond;
}

std::array<double, 3> palette_rgb(const std::string& color) {
    static const std::unordered_map<std::string, std::array<double, 3>> rgb = {
        {"red", {0.85, 0.15, 0.15}},    {"blue", {0.15, 0.25, 0.85}},
        {"green", {0.10, 0.70, 0.20}},  {"yellow", {0.90, 0.85, 0.15}},
        {"purple", {0.60, 0.20, 0.80}}, {"orange", {0.95, 0.55, 0.10}},
        {"cyan", {0.10, 0.80, 0.80}},   {"magenta", {0.85, 0.15, 0.70}}};
    auto it = rgb.find(color);
    if (it == rgb.end()) throw ValueError("palette: unknown color '" + color + "'");
    return it->second;
}

std::array<double, 2> path_point(const std::vector<std::array<double, 2>>& control, double u) {
    if (control.size() < 2 || control.size() > 3)
        throw ValueError("path: expected 2 or 3 control points");
    auto lerp = [&](const std::array<double, 2>& a, const std::array<double, 2>& b) {
        return std::array<double, 2>{a[0] * (1.0 - u) + b[0] * u, a[1] * (1.0 - u) + b[1] * u};
    };
    if (control.size() == 2) return lerp(control[0], control[1]);
    return lerp(lerp(control[0], control[1]), lerp(control[1], control[2]));
}

TrainSample synthesize_scene(const SceneSpec& spec, uint64_t seed) {
    validate_spec(spec);
    size_t n = spec.sprites.size();

    // exact analytic centers per frame
    std::vector<std::vector<std::array<double, 2>>> centers(n);
    for (size_t s = 0; s < n; ++s) {
        centers[s].resize(static_cast<size_t>(spec.frames));
        for (int64_t f = 0; f < spec.frames; ++f)
            centers[s][static_cast<size_t>(f)] =
                path_point(spec.sprites[s].control, path_u(f, spec.frames));
    }
    for (int64_t f = 0; f < spec.frames; ++f)
        for (size_t i = 0; i < n; ++i)
            for (size_t j = i + 1; j < n; ++j) {
                double dx = centers[i][size_t(f)][0] - centers[j][size_t(f)][0];
                double dy = centers[i][size_t(f)][1] - centers[j][size_t(f)][1];
                double need = spec.sprites[i].radius + spec.sprites[j].radius + 1.0;
                if (dx * dx + dy * dy < need * need)
                    throw ValueError("scene: sprites '" + spec.sprites[i].noun + "' and '" +
                                     spec.sprites[j].noun + "' overlap at frame " +
                                     std::to_string(f));
            }

    TrainSample out;
    out.video = Tensor::full({spec.frames, spec.height, spec.width, 3}, 0.5);
    std::vector<TextureParams> tex(n);
    for (size_t s = 0; s < n; ++s) tex[s] = texture_params(seed, s);
    for (int64_t f = 0; f < spec.frames; ++f)
        for (size_t s = 0; s < n; ++s)
            paint_sprite(out.video, f, spec.sprites[s], tex[s], centers[s][size_t(f)][0],
                         centers[s][size_t(f)][1]);

    // caption: [the C N]{, and the C N}* V with a two-token span per entity
    std::vector<std::string> words;
    std::vector<std::array<int64_t, 2>> spans(n);  // start, length
    for (size_t s = 0; s < n; ++s) {
        if (n > 1 && s + 1 == n) words.push_back("and");
        words.push_back("the");
        spans[s] = {static_cast<int64_t>(words.size()), 2};
        words.push_back(spec.sprites[s].color);
        words.push_back(spec.sprites[s].noun);
    }
    words.push_back(kVerbs[fnv1a64("verb/" + std::to_string(seed)) % kVerbs.size()]);
    for (const std::string& w : words) out.caption_ids.push_back(vocab_id(w));

    for (size_t s = 0; s < n; ++s) {
        const SpriteSpec& sp = spec.sprites[s];
        EntityBundle b;
        b.entity_id = sp.noun;
        b.word_start = spans[s][0];
        b.word_len = spans[s][1];
        b.trajectory.entity_id = sp.noun;
        for (int64_t f = 0; f < spec.frames; ++f)
            b.trajectory.points.push_back(
                {f, centers[s][size_t(f)][0], centers[s][size_t(f)][1]});
        b.reference.entity_class = noun_class(sp.noun);
        b.reference.pixels = Tensor::full({spec.ref_res, spec.ref_res, 3}, 0.5);
        double mid = static_cast<double>(spec.ref_res) / 2.0;
        paint_sprite(b.reference.pixels, 0, sp, tex[s], mid, mid);
        out.gt_trajectories.push_back(b.trajectory);
        out.bundles.push_back(std::move(b));
    }
    return out;
}

SceneSpec random_scene(Rng& rng, int n_entities, int64_t frames, int64_t height, int64_t width,
                       int64_t ref_res) {
    if (n_entities < 1 || n_entities > 3) throw ValueError("scene: entity count must be 1..3");
    SceneSpec spec;
    spec.frames = frames;
    spec.height = height;
    spec.width = width;
    spec.ref_res = ref_res;

    std::vector<int64_t> noun_ids, color_ids;
    for (size_t i = 0; i < kNouns.size(); ++i) noun_ids.push_back(static_cast<int64_t>(i));
    for (size_t i = 0; i < kColors.size(); ++i) color_ids.push_back(static_cast<int64_t>(i));
    for (size_t i = noun_ids.size(); i > 1; --i)
        std::swap(noun_ids[i - 1], noun_ids[static_cast<size_t>(rng.randint(int64_t(i)))]);
    for (size_t i = color_ids.size(); i > 1; --i)
        std::swap(color_ids[i - 1], color_ids[static_cast<size_t>(rng.randint(int64_t(i)))]);

    // Sprite size scales with the canvas so small desk-scale canvases can
    // still hold multiple non-overlapping entities; the reference resolution
    // caps it from above and the 3 px validation floor from below.
    double m = static_cast<double>(std::min(height, width));
    if (m < 24.0) throw ValueError("scene: canvas too small for random layouts");
    // Each sprite gets its own horizontal lane; lane interiors are separated
    // by more than the sum of radii plus the render margin, so layouts are
    // collision-free at every frame regardless of the sampled paths.
    double band = static_cast<double>(height) / n_entities;
    double r_hi = std::min({9.0, m / 7.0, (static_cast<double>(ref_res) - 2.0) / 2.0,
                            (band - 3.0) / 2.0});
    double r_lo = std::max(3.0, std::min(6.0, 0.7 * r_hi));
    if (r_hi < r_lo)
        throw ValueError("scene: canvas or reference resolution too small for " +
                         std::to_string(n_entities) + " random sprites");

    for (int attempt = 0; attempt < 200; ++attempt) {
        spec.sprites.clear();
        for (int s = 0; s < n_entities; ++s) {
            SpriteSpec sp;
            sp.noun = kNouns[static_cast<size_t>(noun_ids[static_cast<size_t>(s)])];
            sp.color = kColors[static_cast<size_t>(color_ids[static_cast<size_t>(s)])];
            sp.texture = static_cast<int>(rng.randint(4));
            sp.radius = rng.uniform(r_lo, r_hi);
            double lo_x = sp.radius + 1.5, hi_x = double(width) - sp.radius - 1.5;
            double lo_y = band * s + sp.radius + 1.5;
            double hi_y = band * (s + 1) - sp.radius - 1.5;
            size_t n_ctrl = rng.uniform() < 0.7 ? 2 : 3;
            for (size_t k = 0; k < n_ctrl; ++k)
                sp.control.push_back({rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)});
            spec.sprites.push_back(std::move(sp));
        }
        try {
            synthesize_scene(spec, 0);  // test render for validity
            return spec;
        } catch (const ValueError&) {
            continue;  // overlap; resample the layout
        }
    }
    throw ValueError("scene: could not place " + std::to_string(n_entities) +
                     " sprites without overlap");
}

}  // namespace tora2
