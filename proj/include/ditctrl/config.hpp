#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "ditctrl/attention_control.hpp"
#include "ditctrl/error.hpp"
#include "ditctrl/metrics.hpp"
#include "ditctrl/model.hpp"
#include "ditctrl/pipeline.hpp"

namespace ditctrl {

inline constexpr int kConfigSchemaVersion = 1;

struct DumpFlags {
    bool latent_steps = false; // latent_step{s}.ditc after every step
    bool masks = false;        // PGM masks of the last controlled step

    friend bool operator==(const DumpFlags&, const DumpFlags&) = default;
};

// Run configuration document. Schema (every key optional, unknown keys rejected):
//
//   schema_version  int     must be 1
//   seed            uint64  initial-noise seed (overridden by DITCTRL_SEED)
//   prompts         [str]   one prompt per segment
//   token_indices   [[int]] foreground text-token positions per prompt
//   segment_frames  int     T, latent frames per segment          (13)
//   overlap         int     O, overlapping frames, O < T           (6)
//   steps           int     S, sampler steps                       (50)
//   height, width   int     latent spatial size                    (4, 4)
//   control.kv_share_steps  [lo, hi)  half-open step window        ([2, 25])
//   control.kv_share_layers [lo, hi)  half-open layer window       ([25, 30])
//   control.mask_threshold  float in (0, 1)                        (0.3)
//   control.mask_guided / kv_sharing / blending   bool             (true)
//   model.layers / heads / d_model / channels     int              (30, 2, 16, 4)
//   model.seed      uint64  parameter seed                         (0)
//   model.identity_denoiser bool                                   (false)
//   cscv_lambda     float   >= 0                                   (10)
//   dump.latent_steps / dump.masks  bool                           (false)
struct RunConfig {
    int schema_version = kConfigSchemaVersion;
    PromptSchedule schedule = default_schedule();
    ModelConfig model;
    double cscv_lambda = kDefaultCscvLambda;
    DumpFlags dump;

    static PromptSchedule default_schedule() {
        PromptSchedule s;
        s.prompts = {"a white suv drives on a steep dirt road", "a white suv drives through deep snow"};
        s.control.token_indices = {{2}, {2}};
        return s;
    }

    void validate() const {
        model.validate();
        schedule.validate(model);
        require(cscv_lambda >= 0.0, ErrorKind::Config, "cscv_lambda must be non-negative");
    }

    bool operator==(const RunConfig& o) const {
        const auto& a = schedule;
        const auto& b = o.schedule;
        return schema_version == o.schema_version && a.prompts == b.prompts && a.segment_frames == b.segment_frames &&
               a.overlap == b.overlap && a.steps == b.steps && a.height == b.height && a.width == b.width &&
               a.seed == b.seed && a.control == b.control && a.kv_sharing == b.kv_sharing &&
               a.blending == b.blending && model == o.model && cscv_lambda == o.cscv_lambda && dump == o.dump;
    }
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        require(allowed.count(it.key()) > 0, ErrorKind::Config, "unknown key '" + where + it.key() + "'");
}

inline const json* child(const json& obj, const char* key) {
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
}

template <typename T>
T get_as(const json& v, const std::string& key) {
    try {
        if constexpr (std::is_same_v<T, bool>) {
            require(v.is_boolean(), ErrorKind::Config, "'" + key + "' must be a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            require(v.is_number_integer() && (v.is_number_unsigned() || v.get<std::int64_t>() >= 0), ErrorKind::Config,
                    "'" + key + "' must be a non-negative integer");
        } else if constexpr (std::is_floating_point_v<T>) {
            require(v.is_number(), ErrorKind::Config, "'" + key + "' must be a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            require(v.is_string(), ErrorKind::Config, "'" + key + "' must be a string");
        }
        return v.get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, "'" + key + "': " + e.what());
    }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out, const std::string& prefix = {}) {
    if (const json* v = child(obj, key)) out = get_as<T>(*v, prefix + key);
}

inline Window read_window(const json& v, const std::string& key) {
    require(v.is_array() && v.size() == 2, ErrorKind::Config, "'" + key + "' must be a two-element array [lo, hi)");
    return Window{get_as<std::size_t>(v[0], key + "[0]"), get_as<std::size_t>(v[1], key + "[1]")};
}

} // namespace detail

inline RunConfig parse_config_json(const nlohmann::json& doc) {
    using detail::json;
    require(doc.is_object(), ErrorKind::Config, "config must be a JSON object");
    detail::reject_unknown(doc,
                           {"schema_version", "seed", "prompts", "token_indices", "segment_frames", "overlap", "steps",
                            "height", "width", "control", "model", "cscv_lambda", "dump"},
                           "");
    RunConfig cfg;
    auto& s = cfg.schedule;
    detail::read_opt(doc, "schema_version", cfg.schema_version);
    require(cfg.schema_version == kConfigSchemaVersion, ErrorKind::Config,
            "schema_version " + std::to_string(cfg.schema_version) + " is not supported (expected " +
                std::to_string(kConfigSchemaVersion) + ")");
    detail::read_opt(doc, "seed", s.seed);
    if (const json* p = detail::child(doc, "prompts")) {
        require(p->is_array(), ErrorKind::Config, "'prompts' must be an array of strings");
        s.prompts.clear();
        for (std::size_t i = 0; i < p->size(); ++i)
            s.prompts.push_back(detail::get_as<std::string>((*p)[i], "prompts[" + std::to_string(i) + "]"));
        if (!detail::child(doc, "token_indices")) s.control.token_indices.assign(s.prompts.size(), {0});
    }
    if (const json* t = detail::child(doc, "token_indices")) {
        require(t->is_array(), ErrorKind::Config, "'token_indices' must be an array of integer arrays");
        s.control.token_indices.clear();
        for (std::size_t i = 0; i < t->size(); ++i) {
            const std::string key = "token_indices[" + std::to_string(i) + "]";
            require((*t)[i].is_array(), ErrorKind::Config, "'" + key + "' must be an array of integers");
            std::vector<std::size_t> set;
            for (std::size_t k = 0; k < (*t)[i].size(); ++k)
                set.push_back(detail::get_as<std::size_t>((*t)[i][k], key + "[" + std::to_string(k) + "]"));
            s.control.token_indices.push_back(std::move(set));
        }
    }
    detail::read_opt(doc, "segment_frames", s.segment_frames);
    detail::read_opt(doc, "overlap", s.overlap);
    detail::read_opt(doc, "steps", s.steps);
    detail::read_opt(doc, "height", s.height);
    detail::read_opt(doc, "width", s.width);
    if (const json* c = detail::child(doc, "control")) {
        require(c->is_object(), ErrorKind::Config, "'control' must be an object");
        detail::reject_unknown(*c, {"kv_share_steps", "kv_share_layers", "mask_threshold", "mask_guided", "kv_sharing", "blending"},
                               "control.");
        if (const json* w = detail::child(*c, "kv_share_steps")) s.control.kv_share_steps = detail::read_window(*w, "control.kv_share_steps");
        if (const json* w = detail::child(*c, "kv_share_layers")) s.control.kv_share_layers = detail::read_window(*w, "control.kv_share_layers");
        detail::read_opt(*c, "mask_threshold", s.control.mask_threshold, "control.");
        detail::read_opt(*c, "mask_guided", s.control.mask_guided, "control.");
        detail::read_opt(*c, "kv_sharing", s.kv_sharing, "control.");
        detail::read_opt(*c, "blending", s.blending, "control.");
    }
    if (const json* m = detail::child(doc, "model")) {
        require(m->is_object(), ErrorKind::Config, "'model' must be an object");
        detail::reject_unknown(*m, {"layers", "heads", "d_model", "channels", "seed", "identity_denoiser"}, "model.");
        detail::read_opt(*m, "layers", cfg.model.layers, "model.");
        detail::read_opt(*m, "heads", cfg.model.heads, "model.");
        detail::read_opt(*m, "d_model", cfg.model.d_model, "model.");
        detail::read_opt(*m, "channels", cfg.model.channels, "model.");
        detail::read_opt(*m, "seed", cfg.model.seed, "model.");
        detail::read_opt(*m, "identity_denoiser", cfg.model.identity_denoiser, "model.");
    }
    detail::read_opt(doc, "cscv_lambda", cfg.cscv_lambda);
    if (const json* d = detail::child(doc, "dump")) {
        require(d->is_object(), ErrorKind::Config, "'dump' must be an object");
        detail::reject_unknown(*d, {"latent_steps", "masks"}, "dump.");
        detail::read_opt(*d, "latent_steps", cfg.dump.latent_steps, "dump.");
        detail::read_opt(*d, "masks", cfg.dump.masks, "dump.");
    }
    cfg.validate();
    return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config_json(doc);
}

inline RunConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Config, "cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    using nlohmann::json;
    const auto& s = cfg.schedule;
    json doc;
    doc["schema_version"] = cfg.schema_version;
    doc["seed"] = s.seed;
    doc["prompts"] = s.prompts;
    doc["token_indices"] = s.control.token_indices;
    doc["segment_frames"] = s.segment_frames;
    doc["overlap"] = s.overlap;
    doc["steps"] = s.steps;
    doc["height"] = s.height;
    doc["width"] = s.width;
    doc["control"] = {
        {"kv_share_steps", {s.control.kv_share_steps.lo, s.control.kv_share_steps.hi}},
        {"kv_share_layers", {s.control.kv_share_layers.lo, s.control.kv_share_layers.hi}},
        {"mask_threshold", s.control.mask_threshold},
        {"mask_guided", s.control.mask_guided},
        {"kv_sharing", s.kv_sharing},
        {"blending", s.blending},
    };
    doc["model"] = {
        {"layers", cfg.model.layers},     {"heads", cfg.model.heads}, {"d_model", cfg.model.d_model},
        {"channels", cfg.model.channels}, {"seed", cfg.model.seed},   {"identity_denoiser", cfg.model.identity_denoiser},
    };
    doc["cscv_lambda"] = cfg.cscv_lambda;
    doc["dump"] = {{"latent_steps", cfg.dump.latent_steps}, {"masks", cfg.dump.masks}};
    return doc;
}

inline std::string serialize_config(const RunConfig& cfg, int indent = 2) { return config_to_json(cfg).dump(indent); }

} // namespace ditctrl
