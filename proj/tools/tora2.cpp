// Command-line front end: synth-data, curate, train, sample, eval, ablate.
// Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "tora2/checkpoint.hpp"
#include "tora2/config.hpp"
#include "tora2/curation.hpp"
#include "tora2/evaluation.hpp"
#include "tora2/image_io.hpp"
#include "tora2/training.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace tora2;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kCheckpointFormat = 1;

std::string default_out() {
    const char* env = std::getenv("TORA2_OUT");
    return (env && *env) ? env : ".";
}

RunConfig load_config(const std::string& path) {
    return path.empty() ? RunConfig{} : run_config_from_file(path);
}

std::string hash_hex(uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Output writing failures are runtime failures (exit 2), not validation
// errors, so these helpers throw plain std::runtime_error.
void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    f << text;
    f.flush();
    if (!f) throw std::runtime_error("write to '" + path.string() + "' failed");
}

fs::path prepare_out(const std::string& out) {
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec && !fs::is_directory(dir))
        throw std::runtime_error("cannot create output directory '" + out + "'");
    return dir;
}

void write_manifest(const fs::path& dir, const std::string& command, uint64_t cfg_hash,
                    uint64_t seed, const std::vector<std::string>& outputs) {
    json j = {{"command", command},
              {"config_hash", hash_hex(cfg_hash)},
              {"seed", seed},
              {"versions", {{"tool", kToolVersion}, {"checkpoint_format", kCheckpointFormat}}},
              {"outputs", outputs}};
    write_text_file(dir / "manifest.json", j.dump(2) + "\n");
}

std::string caption_text(const std::vector<int64_t>& ids) {
    const auto& vocab = synth_vocabulary();
    std::string s;
    for (int64_t id : ids) {
        if (id < 0 || id >= static_cast<int64_t>(vocab.size()))
            throw ValueError("caption id " + std::to_string(id) + " outside the vocabulary");
        if (!s.empty()) s += ' ';
        s += vocab[static_cast<size_t>(id)];
    }
    return s;
}

json scene_record(int64_t idx, const TrainSample& s) {
    json ents = json::array();
    for (const EntityBundle& b : s.bundles) {
        json track = json::array();
        for (const TrajPoint& p : b.trajectory.points)
            track.push_back(json::array({p.frame, p.x, p.y}));
        ents.push_back({{"entity_id", b.entity_id},
                        {"class", entity_class_to_string(b.reference.entity_class)},
                        {"word_start", b.word_start},
                        {"word_len", b.word_len},
                        {"track", track}});
    }
    return {{"id", idx},
            {"caption", caption_text(s.caption_ids)},
            {"caption_ids", s.caption_ids},
            {"frames", s.video.shape[0]},
            {"height", s.video.shape[1]},
            {"width", s.video.shape[2]},
            {"entities", ents}};
}

// Fresh model from the config's initialization seed; optionally restores a
// checkpoint built from a matching architecture.
ConditionedDiT build_model(ParamStore& ps, const RunConfig& cfg, const std::string& ckpt) {
    Rng init = derive_rng(cfg.train.seed, "init");
    ConditionedDiT model =
        ConditionedDiT::create(ps, "model", dit_config(cfg), dpe_config(cfg), init,
                               personalization_mode(cfg), binding_mode(cfg));
    if (!ckpt.empty()) {
        CheckpointMeta meta = CheckpointIO::load(ckpt, ps);
        if (meta.config_hash != config_hash(cfg))
            std::cerr << "note: checkpoint config hash " << hash_hex(meta.config_hash)
                      << " differs from the active config " << hash_hex(config_hash(cfg))
                      << "\n";
    }
    return model;
}

char frame_name[64];

int cmd_synth_data(const RunConfig& cfg, const std::string& out) {
    fs::path dir = prepare_out(out);
    std::vector<TrainSample> data = synthesize_dataset(cfg.data);

    std::string jsonl;
    for (size_t i = 0; i < data.size(); ++i)
        jsonl += scene_record(static_cast<int64_t>(i), data[i]).dump() + "\n";
    write_text_file(dir / "dataset.jsonl", jsonl);
    std::vector<std::string> outputs = {"dataset.jsonl"};

    // preview renders for the first scene: every frame plus the references
    if (!data.empty()) {
        const TrainSample& s = data.front();
        for (int64_t f = 0; f < s.video.shape[0]; ++f) {
            std::snprintf(frame_name, sizeof(frame_name), "scene000_frame%02lld.png",
                          static_cast<long long>(f));
            write_png((dir / frame_name).string(), frame_image(s.video, f));
            outputs.push_back(frame_name);
        }
        for (size_t e = 0; e < s.bundles.size(); ++e) {
            std::snprintf(frame_name, sizeof(frame_name), "scene000_ref%zu.png", e);
            write_png((dir / frame_name).string(), s.bundles[e].reference.pixels);
            outputs.push_back(frame_name);
        }
    }
    write_manifest(dir, "synth-data", config_hash(cfg), cfg.data.seed, outputs);
    std::cout << "wrote " << data.size() << " scenes to " << (dir / "dataset.jsonl").string()
              << "\n";
    return 0;
}

int cmd_curate(const RunConfig& cfg, const std::string& out, const std::string& input,
               const std::string& rules_path) {
    RulesConfig rules;
    if (!rules_path.empty()) {
        std::ifstream rf(rules_path);
        if (!rf) throw ValueError("curate: cannot read rules file '" + rules_path + "'");
        std::string text((std::istreambuf_iterator<char>(rf)), std::istreambuf_iterator<char>());
        rules = parse_rules_config(text);
    }
    std::ifstream in(input);
    if (!in) throw ValueError("curate: cannot read input '" + input + "'");

    std::string accepted, rejected;
    int64_t n_total = 0, n_accepted = 0, line_no = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        VideoRecord rec;
        try {
            rec = parse_video_record(line);
        } catch (const Error& e) {
            throw ValueError("curate: line " + std::to_string(line_no) + ": " + e.what());
        }
        ++n_total;
        FilterDecision d = filter_video(rec, rules);
        if (d.accepted) {
            accepted += video_record_json(rec) + "\n";
            ++n_accepted;
        } else {
            rejected += filter_decision_json(rec, d) + "\n";
        }
    }
    fs::path dir = prepare_out(out);
    write_text_file(dir / "accepted.jsonl", accepted);
    write_text_file(dir / "rejected.jsonl", rejected);
    write_manifest(dir, "curate", config_hash(cfg), 0,
                   {"accepted.jsonl", "rejected.jsonl"});
    std::cout << "accepted " << n_accepted << " of " << n_total << " records\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& out) {
    fs::path dir = prepare_out(out);
    std::vector<TrainSample> data = synthesize_dataset(cfg.data);
    ParamStore ps;
    ConditionedDiT model = build_model(ps, cfg, "");
    apply_freeze(ps, model, "model", cfg.train.freeze_backbone);

    TrainResult result = train(ps, model, "model", cfg, data);
    write_text_file(dir / "metrics.csv", metrics_csv(result.log));
    CheckpointMeta meta;
    meta.step = result.steps;
    meta.config_hash = config_hash(cfg);
    CheckpointIO::save((dir / "model.ckpt").string(), ps, meta);
    write_manifest(dir, "train", config_hash(cfg), cfg.train.seed,
                   {"metrics.csv", "model.ckpt"});

    const TrainLogRow& last = result.log.back();
    std::cout << "trained " << result.steps << " steps; final total loss " << last.total
              << "\n";
    return 0;
}

int cmd_sample(const RunConfig& cfg, const std::string& out, const std::string& ckpt,
               int64_t scene_idx, int64_t steps, double guidance, uint64_t seed) {
    if (steps < 1) throw ValueError("sample: steps must be positive");
    std::vector<TrainSample> scenes = held_out_scenes(cfg);
    if (scene_idx < 0 || scene_idx >= static_cast<int64_t>(scenes.size()))
        throw ValueError("sample: scene index " + std::to_string(scene_idx) +
                         " outside the " + std::to_string(scenes.size()) + " held-out scenes");
    const TrainSample& s = scenes[static_cast<size_t>(scene_idx)];

    ParamStore ps;
    ConditionedDiT model = build_model(ps, cfg, ckpt);
    Tensor video =
        video_from_latent(model.sample(ps, conditioning_from_sample(s), steps, guidance, seed));

    fs::path dir = prepare_out(out);
    std::vector<std::string> outputs = {"scene.json"};
    write_text_file(dir / "scene.json", scene_record(scene_idx, s).dump(2) + "\n");
    for (int64_t f = 0; f < video.shape[0]; ++f) {
        std::snprintf(frame_name, sizeof(frame_name), "frame%02lld.png",
                      static_cast<long long>(f));
        write_png((dir / frame_name).string(), frame_image(video, f));
        outputs.push_back(frame_name);
    }
    write_manifest(dir, "sample", config_hash(cfg), seed, outputs);
    std::cout << "sampled " << video.shape[0] << " frames for scene " << scene_idx << " ("
              << caption_text(s.caption_ids) << ")\n";
    return 0;
}

int cmd_eval(RunConfig cfg, const std::string& out, const std::string& ckpt, int64_t testset,
             const std::string& report_name) {
    if (testset > 0) cfg.eval.scenes = testset;
    ParamStore ps;
    ConditionedDiT model = build_model(ps, cfg, ckpt);
    std::vector<TrainSample> scenes = held_out_scenes(cfg);
    MetricRow row =
        evaluate_model(ps, model, cfg, scenes, ckpt.empty() ? "untrained" : "checkpoint");
    MetricReport report;
    report.rows = {row};

    fs::path dir = prepare_out(out);
    write_text_file(dir / (report_name + ".csv"), report.to_csv());
    write_text_file(dir / (report_name + ".txt"), report.to_text_table());
    write_manifest(dir, "eval", config_hash(cfg), cfg.eval.seed,
                   {report_name + ".csv", report_name + ".txt"});
    std::cout << report.to_text_table();
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& out, const std::string& harness) {
    MetricReport report = run_ablation(harness, cfg);
    fs::path dir = prepare_out(out);
    write_text_file(dir / (harness + ".csv"), report.to_csv());
    write_text_file(dir / (harness + ".txt"), report.to_text_table());
    write_manifest(dir, "ablate", config_hash(cfg), cfg.train.seed,
                   {harness + ".csv", harness + ".txt"});
    std::cout << report.to_text_table();
    return 0;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"trajectory- and identity-conditioned video generation, desk scale"};
    app.name("tora2");

    std::string config_path, out_dir = default_out();
    std::string input_path, rules_path, ckpt_path, report_name = "report", harness;
    int64_t scene_idx = 0, testset = 0;
    SamplerConfig sampler_defaults;
    int64_t steps = sampler_defaults.steps;
    double guidance = sampler_defaults.guidance;
    uint64_t seed = sampler_defaults.seed;
    bool seed_given = false, steps_given = false, guidance_given = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run config JSON file");
        cmd->add_option("--out", out_dir, "output directory (default $TORA2_OUT or .)");
    };

    CLI::App* synth = app.add_subcommand("synth-data", "generate the synthetic scene corpus");
    add_common(synth);

    CLI::App* curate = app.add_subcommand("curate", "filter a JSONL of video records");
    add_common(curate);
    curate->add_option("--input", input_path, "video records, one JSON object per line")
        ->required();
    curate->add_option("--rules", rules_path, "filter thresholds JSON");

    CLI::App* train_cmd = app.add_subcommand("train", "train on the synthetic corpus");
    add_common(train_cmd);

    CLI::App* sample = app.add_subcommand("sample", "generate one conditioned video");
    add_common(sample);
    sample->add_option("--checkpoint", ckpt_path, "trained parameters");
    sample->add_option("--scene", scene_idx, "held-out scene index");
    sample->add_option("--steps", steps, "reverse process steps")
        ->check(CLI::PositiveNumber)
        ->each([&](const std::string&) { steps_given = true; });
    sample->add_option("--guidance", guidance, "classifier-free guidance scale")
        ->each([&](const std::string&) { guidance_given = true; });
    sample->add_option("--seed", seed, "sampling noise seed")
        ->each([&](const std::string&) { seed_given = true; });

    CLI::App* eval_cmd = app.add_subcommand("eval", "score a model on held-out scenes");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", ckpt_path, "trained parameters");
    eval_cmd->add_option("--testset", testset, "held-out scene count override")
        ->check(CLI::PositiveNumber);
    eval_cmd->add_option("--report", report_name, "report basename");

    CLI::App* ablate = app.add_subcommand("ablate", "train and score a variant table");
    add_common(ablate);
    ablate
        ->add_option("harness", harness,
                     "dpe_variants | binding_variants | contrastive_onoff | injection_order")
        ->required();

    app.require_subcommand(0, 1);
    if (argc <= 1) {
        std::cerr << app.help();
        return 1;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;  // --help exits 0; every parse error is a usage error
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help();
        return 1;
    }

    RunConfig cfg = load_config(config_path);
    if (*synth) return cmd_synth_data(cfg, out_dir);
    if (*curate) return cmd_curate(cfg, out_dir, input_path, rules_path);
    if (*train_cmd) return cmd_train(cfg, out_dir);
    if (*sample) {
        // flags override the config's sampler section, which overrides the
        // built-in defaults (50 steps, guidance 6.0)
        if (!steps_given) steps = cfg.sampler.steps;
        if (!guidance_given) guidance = cfg.sampler.guidance;
        if (!seed_given) seed = cfg.sampler.seed;
        return cmd_sample(cfg, out_dir, ckpt_path, scene_idx, steps, guidance, seed);
    }
    if (*eval_cmd) return cmd_eval(cfg, out_dir, ckpt_path, testset, report_name);
    if (*ablate) return cmd_ablate(cfg, out_dir, harness);
    std::cerr << app.help();
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
}
