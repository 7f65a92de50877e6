#include "tora2/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tora2/tensor.hpp"

namespace tora2 {

namespace {

using nlohmann::json;

int64_t as_int(const json& v, const std::string& path) {
    if (!v.is_number_integer() && !v.is_number_unsigned())
        throw ConfigError("config: key '" + path + "' must be an integer");
    return v.get<int64_t>();
}

uint64_t as_seed(const json& v, const std::string& path) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0))
        throw ConfigError("config: key '" + path + "' must be a non-negative integer");
    return v.get<uint64_t>();
}

double as_num(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError("config: key '" + path + "' must be a number");
    double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError("config: key '" + path + "' must be finite");
    return d;
}

std::string as_str(const json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError("config: key '" + path + "' must be a string");
    return v.get<std::string>();
}

bool as_bool(const json& v, const std::string& path) {
    if (!v.is_boolean()) throw ConfigError("config: key '" + path + "' must be a boolean");
    return v.get<bool>();
}

int64_t positive(int64_t v, const std::string& path) {
    if (v < 1) throw ConfigError("config: key '" + path + "' must be positive");
    return v;
}

double probability(double v, const std::string& path) {
    if (v < 0.0 || v > 1.0)
        throw ConfigError("config: key '" + path + "' must lie in [0, 1]");
    return v;
}

const json& section(const json& j, const std::string& name) {
    static const json empty = json::object();
    if (!j.contains(name)) return empty;
    if (!j.at(name).is_object())
        throw ConfigError("config: section '" + name + "' must be an object");
    return j.at(name);
}

void parse_data(const json& j, DataConfig& c) {
    for (const auto& [key, val] : j.items()) {
        std::string path = "data." + key;
        if (key == "frames") c.frames = positive(as_int(val, path), path);
        else if (key == "height") c.height = positive(as_int(val, path), path);
        else if (key == "width") c.width = positive(as_int(val, path), path);
        else if (key == "ref_res") c.ref_res = positive(as_int(val, path), path);
        else if (key == "max_entities") c.max_entities = positive(as_int(val, path), path);
        else if (key == "train_scenes") c.train_scenes = positive(as_int(val, path), path);
        else if (key == "eval_scenes") c.eval_scenes = positive(as_int(val, path), path);
        else if (key == "seed") c.seed = as_seed(val, path);
        else throw ConfigError("config: unknown key '" + path + "'");
    }
    if (c.max_entities > 3) throw ConfigError("config: key 'data.max_entities' must be <= 3");
}

void parse_model(const json& j, ModelConfig& c) {
    for (const auto& [key, val] : j.items()) {
        std::string path = "model." + key;
        if (key == "patch") c.patch = positive(as_int(val, path), path);
        else if (key == "d") c.d = positive(as_int(val, path), path);
        else if (key == "depth") c.depth = static_cast<int>(positive(as_int(val, path), path));
        else if (key == "heads") c.heads = static_cast<int>(positive(as_int(val, path), path));
        else if (key == "vocab") c.vocab = positive(as_int(val, path), path);
        else if (key == "max_text") c.max_text = positive(as_int(val, path), path);
        else if (key == "c_m") c.c_m = positive(as_int(val, path), path);
        else if (key == "m_hidden") c.m_hidden = positive(as_int(val, path), path);
        else if (key == "injection_order") c.injection_order = as_str(val, path);
        else if (key == "personalization") c.personalization = as_str(val, path);
        else if (key == "binding") c.binding = as_str(val, path);
        else if (key == "schedule_steps") c.schedule_steps = positive(as_int(val, path), path);
        else if (key == "cosine_s") c.cosine_s = as_num(val, path);
        else if (key == "d_prior") c.d_prior = positive(as_int(val, path), path);
        else if (key == "k_prior") c.k_prior = positive(as_int(val, path), path);
        else if (key == "d_global") c.d_global = positive(as_int(val, path), path);
        else if (key == "k_global") c.k_global = positive(as_int(val, path), path);
        else if (key == "l_p") c.l_p = positive(as_int(val, path), path);
        else if (key == "n_qf") c.n_qf = positive(as_int(val, path), path);
        else throw ConfigError("config: unknown key '" + path + "'");
    }
    // validates the enum strings; throws ConfigError on unknown tags
    injection_order_from_string(c.injection_order);
    personalization_mode_from_string(c.personalization);
    binding_mode_from_string(c.binding);
    if (c.cosine_s <= 0.0) throw ConfigError("config: key 'model.cosine_s' must be positive");
}

void parse_loss(const json& j, LossConfig& c) {
    for (const auto& [key, val] : j.items()) {
        std::string path = "loss." + key;
        if (key == "lambda_contrast") c.lambda_contrast = as_num(val, path);
        else if (key == "tau") c.tau = as_num(val, path);
        else throw ConfigError("config: unknown key '" + path + "'");
    }
    if (c.lambda_contrast < 0.0)
        throw ConfigError("config: key 'loss.lambda_contrast' must be non-negative");
    if (c.tau <= 0.0) throw ConfigError("config: key 'loss.tau' must be positive");
}

void parse_dropout(const json& j, DropoutConfig& c) {
    for (const auto& [key, val] : j.items()) {
        std::string path = "dropout." + key;
        if (key == "caption") c.caption = probability(as_num(val, path), path);
        else if (key == "references") c.references = probability(as_num(val, path), path);
        else if (key == "trajectories") c.trajectories = probability(as_num(val, path), path);
        else throw ConfigError("config: unknown key '" + path + "'");
    }
}

void parse_train(const json& j, TrainConfig& c) {
    for (const auto& [key, val] : j.items()) {
        std::string path = "train." + key;
        if (key == "steps") c.steps = positive(as_int(val, path), path);
        else if (key == "batch") c.batch = positive(as_int(val, path), path);
        else if (key == "lr") c.lr = as_num(val, path);
        else if (key == "weight_decay") c.weight_decay = as_num(val, path);
        else if (key == "seed") c.seed = as_seed(val, path);
        else if (key == "freeze_backbone") c.freeze_backbone = as_bool(val, path);
        else if (key == "log_every") c.log_every = positive(as_int(val, path), path);
        else throw ConfigError("config: unknown key '" + path + "'");
    }
    if (c.lr <= 0.0) throw ConfigError("config: key 'train.lr' must be positive");
    if (c.weight_decay < 0.0)
        throw ConfigError("config: key 'train.weight_decay' must be non-negative");
}

void parse_sampler(const json& j, SamplerConfig& c) {
    for (const auto& [key, val] : j.items()) {
        std::string path = "sampler." + key;
        if (key == "steps") c.steps = positive(as_int(val, path), path);
        else if (key == "guidance") c.guidance = as_num(val, path);
        else if (key == "seed") c.seed = as_seed(val, path);
        else throw ConfigError("config: unknown key '" + path + "'");
    }
}

void parse_eval(const json& j, EvalConfig& c) {
    for (const auto& [key, val] : j.items()) {
        std::string path = "eval." + key;
        if (key == "scenes") c.scenes = positive(as_int(val, path), path);
        else if (key == "seed") c.seed = as_seed(val, path);
        else if (key == "sample_steps") c.sample_steps = positive(as_int(val, path), path);
        else if (key == "guidance") c.guidance = as_num(val, path);
        else throw ConfigError("config: unknown key '" + path + "'");
    }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    RunConfig cfg;
    for (const auto& [key, val] : j.items()) {
        (void)val;
        if (key != "data" && key != "model" && key != "loss" && key != "dropout" &&
            key != "train" && key != "sampler" && key != "eval")
            throw ConfigError("config: unknown key '" + key + "'");
    }
    parse_data(section(j, "data"), cfg.data);
    parse_model(section(j, "model"), cfg.model);
    parse_loss(section(j, "loss"), cfg.loss);
    parse_dropout(section(j, "dropout"), cfg.dropout);
    parse_train(section(j, "train"), cfg.train);
    parse_sampler(section(j, "sampler"), cfg.sampler);
    parse_eval(section(j, "eval"), cfg.eval);
    if (cfg.data.height % cfg.model.patch != 0 || cfg.data.width % cfg.model.patch != 0)
        throw ConfigError("config: data.height and data.width must be multiples of model.patch");
    return cfg;
}

RunConfig run_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string run_config_json(const RunConfig& cfg) {
    json j;
    j["data"] = {{"frames", cfg.data.frames},
                 {"height", cfg.data.height},
                 {"width", cfg.data.width},
                 {"ref_res", cfg.data.ref_res},
                 {"max_entities", cfg.data.max_entities},
                 {"train_scenes", cfg.data.train_scenes},
                 {"eval_scenes", cfg.data.eval_scenes},
                 {"seed", cfg.data.seed}};
    j["model"] = {{"patch", cfg.model.patch},
                  {"d", cfg.model.d},
                  {"depth", cfg.model.depth},
                  {"heads", cfg.model.heads},
                  {"vocab", cfg.model.vocab},
                  {"max_text", cfg.model.max_text},
                  {"c_m", cfg.model.c_m},
                  {"m_hidden", cfg.model.m_hidden},
                  {"injection_order", cfg.model.injection_order},
                  {"personalization", cfg.model.personalization},
                  {"binding", cfg.model.binding},
                  {"schedule_steps", cfg.model.schedule_steps},
                  {"cosine_s", cfg.model.cosine_s},
                  {"d_prior", cfg.model.d_prior},
                  {"k_prior", cfg.model.k_prior},
                  {"d_global", cfg.model.d_global},
                  {"k_global", cfg.model.k_global},
                  {"l_p", cfg.model.l_p},
                  {"n_qf", cfg.model.n_qf}};
    j["loss"] = {{"lambda_contrast", cfg.loss.lambda_contrast}, {"tau", cfg.loss.tau}};
    j["dropout"] = {{"caption", cfg.dropout.caption},
                    {"references", cfg.dropout.references},
                    {"trajectories", cfg.dropout.trajectories}};
    j["train"] = {{"steps", cfg.train.steps},
                  {"batch", cfg.train.batch},
                  {"lr", cfg.train.lr},
                  {"weight_decay", cfg.train.weight_decay},
                  {"seed", cfg.train.seed},
                  {"freeze_backbone", cfg.train.freeze_backbone},
                  {"log_every", cfg.train.log_every}};
    j["sampler"] = {{"steps", cfg.sampler.steps},
                    {"guidance", cfg.sampler.guidance},
                    {"seed", cfg.sampler.seed}};
    j["eval"] = {{"scenes", cfg.eval.scenes},
                 {"seed", cfg.eval.seed},
                 {"sample_steps", cfg.eval.sample_steps},
                 {"guidance", cfg.eval.guidance}};
    return j.dump();
}

uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(run_config_json(cfg)); }

DiTConfig dit_config(const RunConfig& cfg) {
    DiTConfig d;
    d.frames = cfg.data.frames;
    d.height = cfg.data.height;
    d.width = cfg.data.width;
    d.patch = cfg.model.patch;
    d.d = cfg.model.d;
    d.depth = cfg.model.depth;
    d.heads = cfg.model.heads;
    d.vocab = cfg.model.vocab;
    d.max_text = cfg.model.max_text;
    d.c_m = cfg.model.c_m;
    d.m_hidden = cfg.model.m_hidden;
    d.order = injection_order_from_string(cfg.model.injection_order);
    d.schedule_steps = cfg.model.schedule_steps;
    d.cosine_s = cfg.model.cosine_s;
    return d;
}

DpeConfig dpe_config(const RunConfig& cfg) {
    DpeConfig d;
    d.ref_res = cfg.data.ref_res;
    d.d = cfg.model.d;
    d.d_prior = cfg.model.d_prior;
    d.k_prior = cfg.model.k_prior;
    d.d_global = cfg.model.d_global;
    d.k_global = cfg.model.k_global;
    d.l_p = cfg.model.l_p;
    d.n_qf = cfg.model.n_qf;
    d.heads = cfg.model.heads;
    return d;
}

PersonalizationMode personalization_mode(const RunConfig& cfg) {
    return personalization_mode_from_string(cfg.model.personalization);
}

BindingMode binding_mode(const RunConfig& cfg) {
    return binding_mode_from_string(cfg.model.binding);
}

}  // namespace tora2
