#pragma once

#include <cstdio>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ditctrl/attention_control.hpp"
#include "ditctrl/blending.hpp"
#include "ditctrl/config.hpp"
#include "ditctrl/error.hpp"
#include "ditctrl/manifest.hpp"
#include "ditctrl/metrics.hpp"
#include "ditctrl/model.hpp"
#include "ditctrl/parallel.hpp"
#include "ditctrl/pipeline.hpp"
#include "ditctrl/tensor_io.hpp"

namespace ditctrl::cli {

namespace fs = std::filesystem;

// Exit codes.
//   0  success
//   1  unexpected internal failure
//   2  command-line usage error
//   3  configuration error (missing file, schema violation, out-of-range value)
//   4  I/O error (unreadable/malformed input, unwritable output)
//   5  numerical or shape error
//   6  degenerate semantic mask during mask-guided KV-sharing
//   7  metric undefined for the input (CSCV with non-positive mean similarity)
enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kUsage = 2,
    kConfig = 3,
    kIo = 4,
    kNumeric = 5,
    kDegenerateMask = 6,
    kMetric = 7,
};

inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config: return kConfig;
        case ErrorKind::Io: return kIo;
        case ErrorKind::Shape:
        case ErrorKind::NonFinite:
        case ErrorKind::Invalid: return kNumeric;
        case ErrorKind::DegenerateMask: return kDegenerateMask;
        case ErrorKind::Metric: return kMetric;
    }
    return kInternal;
}

// Loads the config (or defaults) and applies the DITCTRL_SEED override.
inline RunConfig load_run_config(const std::optional<fs::path>& path) {
    RunConfig cfg = path ? parse_config(*path) : parse_config_text("{}");
    if (const char* env = std::getenv("DITCTRL_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(env, &used);
            require(used == std::string(env).size(), ErrorKind::Config, "");
            cfg.schedule.seed = v;
        } catch (const std::exception&) {
            fail(ErrorKind::Config, std::string("DITCTRL_SEED is not an unsigned integer: '") + env + "'");
        }
    }
    return cfg;
}

inline void prepare_out_dir(const fs::path& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    require(!ec && fs::is_directory(out), ErrorKind::Io, "cannot create output directory " + out.string());
}

inline Manifest base_manifest(const std::string& command, const RunConfig& cfg) {
    Manifest m;
    m.set("manifest_version", 1);
    m.set("command", command);
    m.set("config", config_to_json(cfg).dump());
    m.set("seed", cfg.schedule.seed);
    m.set("classifier_free_guidance", "not modelled");
    m.set("sampler", "ddim-eta0 linear-alpha");
    return m;
}

inline void describe_layout(Manifest& m, const SegmentLayout& layout) {
    m.set("layout.n_segments", layout.n_segments);
    m.set("layout.segment_frames", layout.segment_frames);
    m.set("layout.overlap", layout.overlap);
    m.set("layout.total_frames", layout.total_frames());
    std::string ranges;
    for (std::size_t i = 0; i < layout.n_segments; ++i) {
        if (i) ranges += " ";
        ranges += "[" + std::to_string(layout.start(i)) + "," + std::to_string(layout.start(i) + layout.segment_frames) + ")";
    }
    m.set("layout.ranges", ranges);
}

inline void describe_toggles(Manifest& m, const AblationToggles& t) {
    m.set("toggles.kv_sharing", t.kv_sharing);
    m.set("toggles.mask_guided", t.mask_guided);
    m.set("toggles.blending", t.blending);
    m.set("ablation.row", ablation_row(t));
}

inline void finish(Manifest& m, const fs::path& out) {
    m.digest_directory(out);
    m.write(out / "manifest.txt");
}

inline void write_config_copy(const fs::path& out, const RunConfig& cfg) {
    std::ofstream f(out / "config.json", std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::Io, "cannot write config.json");
    f << serialize_config(cfg) << "\n";
}

// Collects the last mask pair seen for every target segment.
struct MaskCollector {
    std::map<std::size_t, PairMasks> last;
    SampleObserver observer(SampleObserver base = {}) {
        base.on_masks = [this](const PairMasks& pm) { last[pm.target] = pm; };
        return base;
    }
    void write(const fs::path& dir) const {
        for (const auto& [target, pm] : last) {
            SemanticMask src = pm.source, cur = pm.current;
            src.branch = "pair" + std::to_string(target) + "src";
            cur.branch = "pair" + std::to_string(target) + "tgt";
            write_mask_pgms(dir, src);
            write_mask_pgms(dir, cur);
        }
    }
};

inline SampleObserver step_dumper(const fs::path& out, bool enabled, SampleObserver base = {}) {
    if (enabled)
        base.on_step = [out](std::size_t s, const LatentVideo& g) {
            write_tensor(out / ("latent_step" + std::to_string(s) + ".ditc"), g.tensor());
        };
    return base;
}

// ---------------------------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------------------------

struct RunOptions {
    std::optional<fs::path> config;
    fs::path out;
};

inline int cmd_generate(const RunOptions& o, std::ostream& log) {
    const RunConfig cfg = load_run_config(o.config);
    prepare_out_dir(o.out);
    const ModelParams params = ModelParams::generate(cfg.model);
    MaskCollector masks;
    SampleObserver obs = step_dumper(o.out, cfg.dump.latent_steps);
    if (cfg.dump.masks) obs = masks.observer(obs);
    const MultiPromptResult r = sample_multi_prompt(cfg.schedule, params, obs);
    write_tensor(o.out / "latent_final.ditc", r.global.tensor());
    write_weights_csv(o.out / weights_file_name(r.layout.segment_frames), r.layout.segment_frames);
    if (cfg.dump.masks) masks.write(o.out);
    write_config_copy(o.out, cfg);

    Manifest m = base_manifest("generate", cfg);
    describe_layout(m, r.layout);
    describe_toggles(m, {cfg.schedule.kv_sharing, cfg.schedule.control.mask_guided, cfg.schedule.blending});
    m.set("seam_discontinuity", seam_discontinuity(r.global, r.layout));
    finish(m, o.out);
    log << "generate: " << r.layout.total_frames() << " frames -> " << (o.out / "latent_final.ditc").string() << "\n";
    return kOk;
}

struct EditOptions : RunOptions {
    std::string mode = "swap";
    std::size_t token = 0;
    double factor = 1.0;
};

inline int cmd_edit(const EditOptions& o, std::ostream& log) {
    const RunConfig cfg = load_run_config(o.config);
    prepare_out_dir(o.out);
    const ModelParams params = ModelParams::generate(cfg.model);
    Manifest m = base_manifest("edit", cfg);
    m.set("edit.mode", o.mode);
    EditResult r;
    if (o.mode == "swap") {
        require(cfg.schedule.prompts.size() >= 2, ErrorKind::Config, "edit --mode swap needs two prompts (source, target)");
        r = word_swap_run(cfg.schedule.prompts[0], cfg.schedule.prompts[1], cfg.schedule, params);
        m.set("edit.source_prompt", cfg.schedule.prompts[0]);
        m.set("edit.target_prompt", cfg.schedule.prompts[1]);
    } else if (o.mode == "reweight") {
        r = reweight_run(cfg.schedule.prompts.at(0), Reweight{o.token, o.factor}, cfg.schedule, params);
        m.set("edit.prompt", cfg.schedule.prompts[0]);
        m.set("edit.token", o.token);
        m.set("edit.factor", o.factor);
    } else {
        fail(ErrorKind::Config, "unknown edit mode '" + o.mode + "' (expected swap or reweight)");
    }
    write_tensor(o.out / "latent_source.ditc", r.source.tensor());
    write_tensor(o.out / "latent_final.ditc", r.target.tensor());
    write_config_copy(o.out, cfg);
    finish(m, o.out);
    log << "edit (" << o.mode << "): mean |target - source| = ";
    double diff = 0.0;
    for (std::size_t i = 0; i < r.source.tensor().size(); ++i) diff += std::abs(r.target.tensor()[i] - r.source.tensor()[i]);
    log << diff / static_cast<double>(r.source.tensor().size()) << "\n";
    return kOk;
}

// "none", "all", or a comma list of kv_sharing | mask_guided | blending.
inline AblationToggles parse_toggles(const std::string& text) {
    if (text == "all") return {true, true, true};
    AblationToggles t{false, false, false};
    if (text == "none") return t;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "kv_sharing" || item == "kv") t.kv_sharing = true;
        else if (item == "mask_guided" || item == "mask") t.mask_guided = true;
        else if (item == "blending" || item == "blend") t.blending = true;
        else fail(ErrorKind::Config, "unknown toggle '" + item + "' (use none, all, or kv_sharing,mask_guided,blending)");
    }
    return t;
}

struct AblateOptions : RunOptions {
    std::string toggles = "all";
};

inline int cmd_ablate(const AblateOptions& o, std::ostream& log) {
    const RunConfig cfg = load_run_config(o.config);
    const AblationToggles toggles = parse_toggles(o.toggles);
    prepare_out_dir(o.out);
    const ModelParams params = ModelParams::generate(cfg.model);
    const AblationResult r = run_ablation(cfg.schedule, toggles, params);
    write_tensor(o.out / "latent_final.ditc", r.run.global.tensor());
    write_config_copy(o.out, cfg);
    Manifest m = base_manifest("ablate", cfg);
    describe_layout(m, r.run.layout);
    describe_toggles(m, toggles);
    m.set("seam_discontinuity", r.seam);
    finish(m, o.out);
    log << "ablate: " << r.row << " seam_discontinuity=" << r.seam << "\n";
    return kOk;
}

struct EvalOptions {
    std::optional<fs::path> embeddings;
    std::optional<std::string> synthetic;
    std::size_t frames = 16;
    std::uint64_t seed = 0;
    double lambda = kDefaultCscvLambda;
    std::optional<fs::path> export_csv;
    std::optional<fs::path> out;
};

inline int cmd_eval_cscv(const EvalOptions& o, std::ostream& log) {
    require(o.embeddings.has_value() != o.synthetic.has_value(), ErrorKind::Config,
            "eval-cscv needs exactly one of --embeddings or --synthetic");
    EmbeddingTrajectory traj;
    if (o.embeddings) {
        traj = import_trajectory(*o.embeddings);
    } else if (*o.synthetic == "smooth") {
        traj = synthetic_trajectory(TrajectoryKind::Smooth, o.frames, o.seed);
    } else if (*o.synthetic == "two_cluster") {
        traj = synthetic_trajectory(TrajectoryKind::TwoCluster, o.frames, o.seed);
    } else {
        fail(ErrorKind::Config, "unknown synthetic trajectory '" + *o.synthetic + "' (smooth or two_cluster)");
    }
    const SimilaritySeries series = adjacent_similarity(traj);
    const double score = cscv(series, o.lambda);
    if (o.export_csv) export_trajectory(*o.export_csv, traj);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", score);
    log << buf << "\n";
    if (o.out) {
        prepare_out_dir(*o.out);
        std::ofstream f(*o.out / "cscv.txt", std::ios::binary | std::ios::trunc);
        char line[160];
        std::snprintf(line, sizeof line, "score = %.17g\nmean = %.17g\nstddev = %.17g\nlambda = %.17g\nframes = %zu\n", score,
                      series.mean, series.stddev, o.lambda, traj.size());
        f << line;
    }
    return kOk;
}

struct DumpOptions : RunOptions {
    std::size_t segment = 0;
    std::size_t step = 0;
};

// Runs segment `segment` uncontrolled up to `step`, then records one forward pass there.
inline int cmd_dump_attention(const DumpOptions& o, std::ostream& log) {
    const RunConfig cfg = load_run_config(o.config);
    const auto& sch = cfg.schedule;
    require(o.segment < sch.prompts.size(), ErrorKind::Config, "--segment out of range");
    require(o.step < sch.steps, ErrorKind::Config, "--step out of range");
    require(!cfg.model.identity_denoiser, ErrorKind::Config, "dump-attention needs the transformer (identity_denoiser is set)");
    prepare_out_dir(o.out);
    const ModelParams params = ModelParams::generate(cfg.model);
    const SegmentLayout layout = plan_segments(sch.prompts.size(), sch.segment_frames, sch.blending ? sch.overlap : 0);
    const LatentVideo noise = initial_noise(layout, sch.height, sch.width, params.config.channels, sch.seed);
    LatentVideo x = noise.frames_slice(layout.start(o.segment), layout.segment_frames);
    const Tensor text = embed_text(sch.prompts[o.segment], params.config);
    const NoiseSchedule sched = noise_schedule(sch.steps);
    for (std::size_t s = 0; s < o.step; ++s) x = denoise_step(x, s, text, sched, params);
    ForwardTrace trace;
    predict_noise(x, text, sched.level_before(o.step), params, ForwardOptions{.record_attention = true}, &trace);
    const AttentionRecord& rec = *trace.record;
    for (std::size_t l = 0; l < rec.n_layers; ++l)
        for (std::size_t h = 0; h < rec.n_heads; ++h) write_tensor(o.out / attention_dump_name(l, h), rec.at(l, h));

    const std::string branch = "s" + std::to_string(o.segment);
    std::vector<std::size_t> tokens = {0};
    if (o.segment < sch.control.token_indices.size()) tokens = sch.control.token_indices[o.segment];
    const SemanticMap map = extract_semantic_map(rec, tokens, branch);
    write_tensor(o.out / ("semantic_map_" + branch + ".ditc"), map.values);
    write_mask_pgms(o.out, binarize(map, sch.control.mask_threshold));

    const DiagonalReport d = diagonal_diagnostics(rec);
    {
        std::ofstream f(o.out / "diagnostics.txt", std::ios::binary | std::ios::trunc);
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "raw_diagonal = %.17g\nv2v_frame_diagonal = %.17g\nv2v_temporal_diagonal = %.17g\n"
                      "t2t_diagonal = %.17g\nt2t_last_token = %.17g\n",
                      d.raw_diagonal, d.v2v_frame_diagonal, d.v2v_temporal_diagonal, d.t2t_diagonal, d.t2t_last_token);
        f << buf;
    }
    Manifest m = base_manifest("dump-attention", cfg);
    m.set("dump.segment", o.segment);
    m.set("dump.step", o.step);
    m.set("dump.n_text", rec.n_text);
    m.set("dump.sequence_length", rec.length());
    finish(m, o.out);
    log << "dump-attention: " << rec.n_layers * rec.n_heads << " attention maps (L=" << rec.length() << ") -> "
        << o.out.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"ditctrl: multi-prompt attention control for a toy MM-DiT"};
    app.require_subcommand(1);
    std::size_t threads = 1;
    app.add_option("--threads", threads, "worker threads for row-parallel kernels (results are identical)")
        ->check(CLI::PositiveNumber);

    auto add_run_opts = [](CLI::App* sub, RunOptions& o) {
        sub->add_option("--config", o.config, "run configuration (JSON)");
        sub->add_option("--out", o.out, "output directory")->required();
    };

    RunOptions gen;
    auto* g = app.add_subcommand("generate", "multi-prompt generation");
    add_run_opts(g, gen);

    EditOptions edit;
    auto* e = app.add_subcommand("edit", "word-swap or reweight editing");
    add_run_opts(e, edit);
    e->add_option("--mode", edit.mode, "swap | reweight")->check(CLI::IsMember({"swap", "reweight"}));
    e->add_option("--token", edit.token, "text-token index to reweight");
    e->add_option("--factor", edit.factor, "reweight factor")->check(CLI::NonNegativeNumber);

    AblateOptions abl;
    auto* a = app.add_subcommand("ablate", "component ablation run");
    add_run_opts(a, abl);
    a->add_option("--toggles", abl.toggles, "none | all | comma list of kv_sharing,mask_guided,blending");

    EvalOptions ev;
    auto* c = app.add_subcommand("eval-cscv", "CSCV smoothness of an embedding trajectory");
    c->add_option("--embeddings", ev.embeddings, "CSV with header frame,v0,...");
    c->add_option("--synthetic", ev.synthetic, "smooth | two_cluster");
    c->add_option("--frames", ev.frames, "frames of a synthetic trajectory");
    c->add_option("--seed", ev.seed, "seed of a synthetic trajectory");
    c->add_option("--lambda", ev.lambda, "CSCV lambda")->check(CLI::NonNegativeNumber);
    c->add_option("--export", ev.export_csv, "write the (normalized) trajectory as CSV");
    c->add_option("--out", ev.out, "output directory for cscv.txt");

    DumpOptions dump;
    auto* d = app.add_subcommand("dump-attention", "export attention maps, semantic map, masks and diagnostics");
    add_run_opts(d, dump);
    d->add_option("--segment", dump.segment, "segment (prompt) index");
    d->add_option("--step", dump.step, "sampler step at which to record");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& pe) {
        const int rc = app.exit(pe, out, err);
        return rc == 0 ? kOk : kUsage;
    }

    set_thread_count(threads);
    try {
        if (*g) return cmd_generate(gen, out);
        if (*e) return cmd_edit(edit, out);
        if (*a) return cmd_ablate(abl, out);
        if (*c) return cmd_eval_cscv(ev, out);
        if (*d) return cmd_dump_attention(dump, out);
    } catch (const Error& ex) {
        err << "error (" << to_string(ex.kind()) << "): " << ex.what() << "\n";
        return exit_code_for(ex.kind());
    } catch (const std::exception& ex) {
        err << "internal error: " << ex.what() << "\n";
        return kInternal;
    }
    return kUsage;
}

} // namespace ditctrl::cli
