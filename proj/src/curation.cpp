#include "tora2/curation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <deque>
#include <set>

#include <json.hpp>

#include "tora2/synth.hpp"

namespace tora2 {

namespace {

// Lowercases and splits on anything that is not a letter, so punctuation
// around a word never hides it from the lexicon.
std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isalpha(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

int64_t whitespace_word_count(const std::string& text) {
    int64_t n = 0;
    bool in_word = false;
    for (char ch : text) {
        bool space = std::isspace(static_cast<unsigned char>(ch)) != 0;
        if (!space && !in_word) ++n;
        in_word = !space;
    }
    return n;
}

bool in_any_window(double angle, const std::vector<std::array<double, 2>>& windows) {
    for (const auto& w : windows)
        if (angle >= w[0] && angle <= w[1]) return true;
    return false;
}

// Centroid of the mask's set pixels using pixel-center coordinates, (x, y).
std::array<double, 2> mask_center(const Tensor& mask) {
    int64_t h = mask.shape[0], w = mask.shape[1];
    double sx = 0.0, sy = 0.0, n = 0.0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            if (mask.data[size_t(y * w + x)] != 0.0) {
                sx += static_cast<double>(x) + 0.5;
                sy += static_cast<double>(y) + 0.5;
                n += 1.0;
            }
    return {sx / n, sy / n};
}

Tensor crop_mask_bbox(const Tensor& video, const Tensor& mask) {
    int64_t h = mask.shape[0], w = mask.shape[1];
    int64_t y0 = h, y1 = -1, x0 = w, x1 = -1;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            if (mask.data[size_t(y * w + x)] != 0.0) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    Tensor crop = Tensor::zeros({y1 - y0 + 1, x1 - x0 + 1, 3});
    for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x)
            for (int64_t c = 0; c < 3; ++c)
                crop.data[size_t(((y - y0) * (x1 - x0 + 1) + (x - x0)) * 3 + c)] =
                    video.at4(0, y, x, c);
    return crop;
}

nlohmann::json parse_object(const std::string& text, const std::string& what) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValueError(what + ": " + e.what());
    }
    if (!j.is_object()) throw ValueError(what + ": top level must be an object");
    return j;
}

double get_finite(const nlohmann::json& j, const std::string& key) {
    if (!j.contains(key) || !j.at(key).is_number())
        throw ValueError("video record: missing or non-numeric key '" + key + "'");
    double v = j.at(key).get<double>();
    if (!std::isfinite(v)) throw ValueError("video record: key '" + key + "' is not finite");
    return v;
}

}  // namespace

const std::vector<std::string>& filter_rule_ids() {
    static const std::vector<std::string> ids = {"decode",       "resolution",
                                                 "aesthetic",    "flow",
                                                 "zoom",         "camera-angle",
                                                 "caption-length", "entity-words"};
    return ids;
}

FilterDecision filter_video(const VideoRecord& rec, const RulesConfig& rules) {
    FilterDecision d;
    auto fail = [&](const char* rule) { d.rejection_reasons.emplace_back(rule); };
    if (!rec.decoded_ok) fail("decode");
    if (std::min(rec.width, rec.height) < rules.min_dim) fail("resolution");
    if (!(rec.aesthetic > rules.min_aesthetic)) fail("aesthetic");
    if (!(rec.flow > rules.min_flow)) fail("flow");
    if (rec.zoom < rules.zoom_lo || rec.zoom > rules.zoom_hi) fail("zoom");
    if (!in_any_window(rec.camera_angle, rules.angle_windows)) fail("camera-angle");
    if (rec.word_count > rules.max_caption_words) fail("caption-length");
    if (extract_entity_words(rec.caption).empty() || !plural_entity_words(rec.caption).empty())
        fail("entity-words");
    d.accepted = d.rejection_reasons.empty();
    return d;
}

const std::vector<std::string>& entity_lexicon() {
    static const std::vector<std::string> lex = [] {
        std::vector<std::string> v = synth_nouns();
        const char* extras[] = {"cat",  "dog",   "bird",  "car", "tree",
                                "boat", "horse", "chair", "cup", "lamp"};
        v.insert(v.end(), std::begin(extras), std::end(extras));
        return v;
    }();
    return lex;
}

std::vector<std::string> extract_entity_words(const std::string& caption) {
    const std::vector<std::string>& lex = entity_lexicon();
    std::vector<std::string> out;
    for (const std::string& w : tokenize_words(caption))
        if (std::find(lex.begin(), lex.end(), w) != lex.end() &&
            std::find(out.begin(), out.end(), w) == out.end())
            out.push_back(w);
    return out;
}

std::vector<std::string> plural_entity_words(const std::string& caption) {
    const std::vector<std::string>& lex = entity_lexicon();
    std::vector<std::string> out;
    for (const std::string& w : tokenize_words(caption)) {
        if (w.size() < 2 || w.back() != 's') continue;
        std::string stem = w.substr(0, w.size() - 1);
        if (std::find(lex.begin(), lex.end(), stem) != lex.end() &&
            std::find(out.begin(), out.end(), stem) == out.end())
            out.push_back(stem);
    }
    return out;
}

bool mask_ok(const EntityMask& m, int64_t frame_area, const RulesConfig& rules) {
    if (m.mask.ndim() != 2) throw ValueError("mask_ok: mask must be (H,W)");
    int64_t h = m.mask.shape[0], w = m.mask.shape[1];
    int64_t area = 0;
    for (double v : m.mask.data) area += v != 0.0 ? 1 : 0;
    double frac = static_cast<double>(area) / static_cast<double>(frame_area);
    if (frac < rules.mask_area_lo || frac > rules.mask_area_hi) return false;

    // Largest 4-connected component via BFS over the set pixels.
    std::vector<char> seen(static_cast<size_t>(h * w), 0);
    int64_t largest = 0;
    for (int64_t start = 0; start < h * w; ++start) {
        if (m.mask.data[size_t(start)] == 0.0 || seen[size_t(start)]) continue;
        int64_t count = 0;
        std::deque<int64_t> q = {start};
        seen[size_t(start)] = 1;
        while (!q.empty()) {
            int64_t p = q.front();
            q.pop_front();
            ++count;
            int64_t y = p / w, x = p % w;
            const int64_t ny[] = {y - 1, y + 1, y, y}, nx[] = {x, x, x - 1, x + 1};
            for (int k = 0; k < 4; ++k) {
                if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                int64_t np = ny[k] * w + nx[k];
                if (m.mask.data[size_t(np)] == 0.0 || seen[size_t(np)]) continue;
                seen[size_t(np)] = 1;
                q.push_back(np);
            }
        }
        largest = std::max(largest, count);
    }
    return static_cast<double>(largest) >= rules.mask_component_min * static_cast<double>(area);
}

TripletResult build_triplets(const Tensor& video, const std::string& caption, Segmenter& seg,
                             PointTracker& tracker, const RulesConfig& rules) {
    if (video.ndim() != 4 || video.shape[3] != 3)
        throw ValueError("build_triplets: video must be (F,H,W,3)");
    int64_t frames = video.shape[0], h = video.shape[1], w = video.shape[2];
    const int64_t sel[3] = {0, frames / 2, frames - 1};

    TripletResult out;
    for (const std::string& word : extract_entity_words(caption)) {
        std::array<std::optional<Tensor>, 3> masks;
        std::string why;
        for (int i = 0; i < 3 && why.empty(); ++i) {
            masks[size_t(i)] = seg.segment(video, sel[i], word);
            if (!masks[size_t(i)]) {
                why = "segmentation failed at frame " + std::to_string(sel[i]);
            } else if (!mask_ok({*masks[size_t(i)], sel[i], word}, h * w, rules)) {
                why = "mask rejected at frame " + std::to_string(sel[i]);
            }
        }
        if (why.empty()) {
            std::array<double, 2> c0 = mask_center(*masks[0]);
            std::array<double, 2> cm = mask_center(*masks[1]);
            std::vector<std::array<double, 2>> t1 = tracker.track(video, sel[0], c0);
            if (t1.size() != size_t(frames)) {
                why = "tracker pass 1 returned " + std::to_string(t1.size()) + " points";
            } else {
                // Second pass re-anchors at the midpoint, refined as the mean
                // of the first pass's midpoint and the middle mask's center.
                std::array<double, 2> mid = {0.5 * (t1[size_t(sel[1])][0] + cm[0]),
                                             0.5 * (t1[size_t(sel[1])][1] + cm[1])};
                std::vector<std::array<double, 2>> t2 = tracker.track(video, sel[1], mid);
                if (t2.size() != size_t(frames)) {
                    why = "tracker pass 2 returned " + std::to_string(t2.size()) + " points";
                } else {
                    TripletRow row;
                    row.word = word;
                    row.crop = crop_mask_bbox(video, *masks[0]);
                    row.tracklet.entity_id = word;
                    for (int64_t f = 0; f < frames; ++f)
                        row.tracklet.points.push_back({f, 0.5 * (t1[size_t(f)][0] + t2[size_t(f)][0]),
                                                       0.5 * (t1[size_t(f)][1] + t2[size_t(f)][1])});
                    out.rows.push_back(std::move(row));
                }
            }
        }
        if (!why.empty()) out.skipped.push_back(word + ": " + why);
    }
    return out;
}

VideoRecord parse_video_record(const std::string& json_line) {
    nlohmann::json j = parse_object(json_line, "video record");
    VideoRecord rec;
    if (!j.contains("id") || !j.at("id").is_string())
        throw ValueError("video record: missing or non-string key 'id'");
    rec.id = j.at("id").get<std::string>();
    if (!j.contains("caption") || !j.at("caption").is_string())
        throw ValueError("video record: missing or non-string key 'caption'");
    rec.caption = j.at("caption").get<std::string>();
    rec.width = static_cast<int64_t>(get_finite(j, "width"));
    rec.height = static_cast<int64_t>(get_finite(j, "height"));
    rec.duration = get_finite(j, "duration");
    rec.aesthetic = get_finite(j, "aesthetic");
    rec.flow = get_finite(j, "flow");
    rec.zoom = get_finite(j, "zoom");
    rec.camera_angle = get_finite(j, "camera_angle");
    if (rec.camera_angle < 0.0 || rec.camera_angle >= 360.0)
        throw ValueError("video record: key 'camera_angle' must lie in [0, 360)");
    if (!j.contains("decoded_ok") || !j.at("decoded_ok").is_boolean())
        throw ValueError("video record: missing or non-boolean key 'decoded_ok'");
    rec.decoded_ok = j.at("decoded_ok").get<bool>();
    if (j.contains("word_count"))
        rec.word_count = static_cast<int64_t>(get_finite(j, "word_count"));
    else
        rec.word_count = whitespace_word_count(rec.caption);
    return rec;
}

std::string video_record_json(const VideoRecord& rec) {
    nlohmann::json j = {{"id", rec.id},
                        {"width", rec.width},
                        {"height", rec.height},
                        {"duration", rec.duration},
                        {"caption", rec.caption},
                        {"aesthetic", rec.aesthetic},
                        {"flow", rec.flow},
                        {"zoom", rec.zoom},
                        {"camera_angle", rec.camera_angle},
                        {"decoded_ok", rec.decoded_ok},
                        {"word_count", rec.word_count}};
    return j.dump();
}

std::string filter_decision_json(const VideoRecord& rec, const FilterDecision& d) {
    nlohmann::json j = {{"id", rec.id},
                        {"accepted", d.accepted},
                        {"rejection_reasons", d.rejection_reasons}};
    return j.dump();
}

RulesConfig parse_rules_config(const std::string& json_text) {
    nlohmann::json j = parse_object(json_text, "rules config");
    RulesConfig rules;
    for (const auto& [key, val] : j.items()) {
        if (key == "min_dim") {
            rules.min_dim = val.get<int64_t>();
        } else if (key == "min_aesthetic") {
            rules.min_aesthetic = val.get<double>();
        } else if (key == "min_flow") {
            rules.min_flow = val.get<double>();
        } else if (key == "zoom_lo") {
            rules.zoom_lo = val.get<double>();
        } else if (key == "zoom_hi") {
            rules.zoom_hi = val.get<double>();
        } else if (key == "angle_windows") {
            if (!val.is_array()) throw ConfigError("rules config: angle_windows must be an array");
            rules.angle_windows.clear();
            for (const auto& wj : val) {
                if (!wj.is_array() || wj.size() != 2)
                    throw ConfigError("rules config: angle windows must be [lo, hi] pairs");
                rules.angle_windows.push_back({wj[0].get<double>(), wj[1].get<double>()});
            }
        } else if (key == "max_caption_words") {
            rules.max_caption_words = val.get<int64_t>();
        } else if (key == "mask_area_lo") {
            rules.mask_area_lo = val.get<double>();
        } else if (key == "mask_area_hi") {
            rules.mask_area_hi = val.get<double>();
        } else if (key == "mask_component_min") {
            rules.mask_component_min = val.get<double>();
        } else {
            throw ConfigError("rules config: unknown key '" + key + "'");
        }
    }
    if (rules.zoom_lo > rules.zoom_hi)
        throw ConfigError("rules config: zoom_lo must not exceed zoom_hi");
    if (rules.mask_area_lo > rules.mask_area_hi)
        throw ConfigError("rules config: mask_area_lo must not exceed mask_area_hi");
    for (const auto& w : rules.angle_windows)
        if (w[0] > w[1]) throw ConfigError("rules config: angle window lo exceeds hi");
    return rules;
}

}  // namespace tora2
