#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ditctrl/attention_control.hpp"
#include "ditctrl/blending.hpp"
#include "ditctrl/error.hpp"
#include "ditctrl/latent.hpp"
#include "ditctrl/model.hpp"
#include "ditctrl/rng.hpp"

namespace ditctrl {

// ---------------------------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------------------------

// Deterministic DDIM-style schedule with linearly increasing signal level.
//   start level        a_init  = 0.02
//   after step s       a_s     = a_init + (1 - a_init) * (s + 1) / S,   s = 0 .. S-1
// so the levels are strictly increasing and the last one is exactly 1.
struct NoiseSchedule {
    static constexpr double kInitialAlpha = 0.02;

    double initial = kInitialAlpha;
    std::vector<double> alphas;

    std::size_t steps() const { return alphas.size(); }
    double level_before(std::size_t s) const { return s == 0 ? initial : alphas.at(s - 1); }
    double level_after(std::size_t s) const { return alphas.at(s); }

    // x' = (x - c1 * eps) / c2 is the eta = 0 DDIM update from level_before(s) to level_after(s).
    double c2(std::size_t s) const { return std::sqrt(level_before(s) / level_after(s)); }
    double c1(std::size_t s) const {
        return std::sqrt(1.0 - level_before(s)) - c2(s) * std::sqrt(1.0 - level_after(s));
    }
};

inline NoiseSchedule noise_schedule(std::size_t steps) {
    require(steps >= 1, ErrorKind::Invalid, "noise_schedule: need at least one step");
    NoiseSchedule sched;
    sched.alphas.resize(steps);
    for (std::size_t s = 0; s < steps; ++s)
        sched.alphas[s] = NoiseSchedule::kInitialAlpha +
                          (1.0 - NoiseSchedule::kInitialAlpha) * static_cast<double>(s + 1) / static_cast<double>(steps);
    return sched;
}

inline LatentVideo apply_update(const LatentVideo& x, const LatentVideo& eps, const NoiseSchedule& sched, std::size_t s) {
    require(x.same_shape(eps), ErrorKind::Shape, "denoise_step: noise prediction shape mismatch");
    const double c1 = sched.c1(s), c2 = sched.c2(s);
    LatentVideo out = x;
    for (std::size_t i = 0; i < out.tensor().size(); ++i)
        out.tensor()[i] = (x.tensor()[i] - c1 * eps.tensor()[i]) / c2;
    return out;
}

inline LatentVideo denoise_step(const LatentVideo& x, std::size_t s, const Tensor& text_embed, const NoiseSchedule& sched,
                                const ModelParams& params, const ForwardOptions& opts = {},
                                ForwardTrace* trace = nullptr) {
    require(s < sched.steps(), ErrorKind::Invalid, "denoise_step: step out of range");
    const LatentVideo eps = predict_noise(x, text_embed, sched.level_before(s), params, opts, trace);
    return apply_update(x, eps, sched, s);
}

// Uncontrolled sampling of one clip from a given initial latent.
inline LatentVideo sample_plain(const LatentVideo& init, const Tensor& text_embed, std::size_t steps,
                                const ModelParams& params) {
    const NoiseSchedule sched = noise_schedule(steps);
    LatentVideo x = init;
    for (std::size_t s = 0; s < steps; ++s) x = denoise_step(x, s, text_embed, sched, params);
    return x;
}

// ---------------------------------------------------------------------------------------------
// Multi-prompt orchestration
// ---------------------------------------------------------------------------------------------

struct PromptSchedule {
    std::vector<std::string> prompts;
    std::size_t segment_frames = 13; // T
    std::size_t overlap = 6;         // O
    std::size_t steps = 50;          // S
    std::size_t height = 4;
    std::size_t width = 4;
    std::uint64_t seed = 0;
    ControlConfig control;
    bool kv_sharing = true;
    bool blending = true;

    void validate(const ModelConfig& model) const {
        require(!prompts.empty(), ErrorKind::Config, "prompts must contain at least one prompt");
        require(segment_frames >= 1, ErrorKind::Config, "segment_frames must be positive");
        require(overlap < segment_frames, ErrorKind::Config,
                "overlap (" + std::to_string(overlap) + ") must be smaller than segment_frames (" +
                    std::to_string(segment_frames) + ")");
        require(steps >= 1, ErrorKind::Config, "steps must be positive");
        require(height >= 1 && width >= 1, ErrorKind::Config, "height and width must be positive");
        control.validate(steps, model.layers);
        if (kv_sharing && control.mask_guided && prompts.size() > 1) {
            require(control.token_indices.size() == prompts.size(), ErrorKind::Config,
                    "token_indices must list one index set per prompt (" + std::to_string(prompts.size()) +
                        " prompts, " + std::to_string(control.token_indices.size()) + " sets)");
            for (std::size_t i = 0; i < prompts.size(); ++i) {
                const std::size_t n_text = tokenize(prompts[i]).size();
                require(!control.token_indices[i].empty(), ErrorKind::Config,
                        "token_indices[" + std::to_string(i) + "] is empty");
                for (std::size_t j : control.token_indices[i])
                    require(j < n_text, ErrorKind::Config,
                            "token_indices[" + std::to_string(i) + "] contains " + std::to_string(j) +
                                " but prompt " + std::to_string(i) + " has " + std::to_string(n_text) + " tokens");
            }
        }
    }
};

inline std::uint64_t noise_seed(std::uint64_t seed) { return mix_seed(seed, 1); }

// Initial noise is drawn once over the global frame range, so overlapping frames start equal.
inline LatentVideo initial_noise(const SegmentLayout& layout, std::size_t height, std::size_t width,
                                 std::size_t channels, std::uint64_t seed) {
    return gaussian_latent(layout.total_frames(), height, width, channels, noise_seed(seed));
}

struct PairMasks {
    std::size_t step = 0;
    std::size_t target = 0; // segment index; source is target - 1
    SemanticMask source, current;
};

struct SampleObserver {
    std::function<void(std::size_t step, const LatentVideo& global)> on_step;
    std::function<void(const PairMasks&)> on_masks;
};

struct MultiPromptResult {
    LatentVideo global;
    SegmentLayout layout;
};

namespace detail {

inline std::string branch_name(std::size_t segment) { return "s" + std::to_string(segment); }

inline SemanticMask mask_from(const AttentionRecord& rec, const std::vector<std::size_t>& tokens, double threshold,
                              std::size_t segment) {
    return binarize(extract_semantic_map(rec, tokens, branch_name(segment)), threshold);
}

// The current-branch mask comes from this branch's most recent recorded pass (the previous
// step). When there is none yet, an uncontrolled probe pass at the current step provides it.
inline const AttentionRecord& current_record(const std::optional<AttentionRecord>& previous, const LatentVideo& x,
                                             const Tensor& text, double alpha, const ModelParams& params,
                                             std::optional<AttentionRecord>& probe_slot) {
    if (previous) return *previous;
    ForwardTrace probe;
    predict_noise(x, text, alpha, params, ForwardOptions{.record_attention = true}, &probe);
    probe_slot = std::move(probe.record);
    return *probe_slot;
}

} // namespace detail

// Per step: segments run in order; segment i >= 1 shares video K/V from segment i-1 inside the
// control window (mask-guided when enabled); then all segment latents are blended into the
// global latent and re-sliced for the next step.
inline MultiPromptResult sample_multi_prompt(const PromptSchedule& sch, const ModelParams& params,
                                             const SampleObserver& observer = {}) {
    sch.validate(params.config);
    const std::size_t n = sch.prompts.size();
    const SegmentLayout layout = plan_segments(n, sch.segment_frames, sch.blending ? sch.overlap : 0);
    const NoiseSchedule sched = noise_schedule(sch.steps);
    const ControlConfig& ctl = sch.control;

    std::vector<Tensor> texts;
    for (const auto& p : sch.prompts) texts.push_back(embed_text(p, params.config));

    LatentVideo global = initial_noise(layout, sch.height, sch.width, params.config.channels, sch.seed);
    std::vector<LatentVideo> segs = reslice(global, layout);

    const bool control_on = sch.kv_sharing && n >= 2 && !ctl.kv_share_steps.empty() && !ctl.kv_share_layers.empty() &&
                            !params.config.identity_denoiser;
    const bool need_records = control_on && ctl.mask_guided;
    std::vector<std::optional<AttentionRecord>> previous(n);

    for (std::size_t s = 0; s < sched.steps(); ++s) {
        const double alpha = sched.level_before(s);
        const bool step_active = control_on && ctl.kv_share_steps.contains(s);
        std::vector<ForwardTrace> traces(n);
        for (std::size_t i = 0; i < n; ++i) {
            ForwardOptions opts;
            opts.record_attention = need_records;
            opts.capture_kv = step_active && i + 1 < n;
            std::optional<ControlHook> hook;
            if (step_active && i >= 1) {
                hook.emplace(ctl, s, detail::branch_name(i));
                hook->share_from(traces[i - 1].kv);
                if (ctl.mask_guided) {
                    std::optional<AttentionRecord> probe;
                    const AttentionRecord& cur_rec =
                        detail::current_record(previous[i], segs[i], texts[i], alpha, params, probe);
                    PairMasks pm{s, i, detail::mask_from(*traces[i - 1].record, ctl.token_indices[i - 1], ctl.mask_threshold, i - 1),
                                 detail::mask_from(cur_rec, ctl.token_indices[i], ctl.mask_threshold, i)};
                    hook->with_masks(pm.source, pm.current);
                    if (observer.on_masks) observer.on_masks(pm);
                }
                opts.hook = &*hook;
            }
            const LatentVideo eps = predict_noise(segs[i], texts[i], alpha, params, opts, &traces[i]);
            segs[i] = apply_update(segs[i], eps, sched, s);
        }
        if (need_records)
            for (std::size_t i = 0; i < n; ++i) previous[i] = std::move(traces[i].record);
        global = blend(segs, layout);
        segs = reslice(global, layout);
        require(global.frames() == layout.total_frames(), ErrorKind::Shape, "global latent lost frames");
        if (observer.on_step) observer.on_step(s, global);
    }
    return {std::move(global), layout};
}

inline MultiPromptResult sample_single_prompt_long(const std::string& prompt, std::size_t n_segments,
                                                   PromptSchedule base, const ModelParams& params,
                                                   const SampleObserver& observer = {}) {
    require(n_segments >= 1, ErrorKind::Invalid, "sample_single_prompt_long: need at least one segment");
    base.prompts.assign(n_segments, prompt);
    if (!base.control.token_indices.empty())
        base.control.token_indices.assign(n_segments, base.control.token_indices.front());
    return sample_multi_prompt(base, params, observer);
}

// ---------------------------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------------------------

struct AblationToggles {
    bool kv_sharing = true;
    bool mask_guided = true;
    bool blending = true;

    friend bool operator==(const AblationToggles&, const AblationToggles&) = default;
};

// Row names of the component ablation; mask guidance only matters when KV-sharing is on.
inline std::string ablation_row(const AblationToggles& t) {
    if (!t.kv_sharing) return t.blending ? "DiTCtrl(w/o kv-sharing)" : "Isolated";
    if (!t.blending) return "custom(kv-sharing without blending)";
    return t.mask_guided ? "DiTCtrl(full)" : "DiTCtrl(w/o mask-guided)";
}

inline PromptSchedule apply_toggles(PromptSchedule sch, const AblationToggles& t) {
    sch.kv_sharing = t.kv_sharing;
    if (!t.kv_sharing) {
        sch.control.kv_share_steps = {0, 0};
        sch.control.kv_share_layers = {0, 0};
    }
    sch.control.mask_guided = t.mask_guided;
    sch.blending = t.blending;
    if (!t.blending) sch.overlap = 0;
    return sch;
}

// Mean |z[g] - z[g-1]| over every consecutive-frame step that crosses a segment transition,
// averaged over adjacent segment pairs. For pair (i, i+1) the transition spans global frames
// start_{i+1} .. start_i + T, i.e. O + 1 steps; with O = 0 it is the single concatenation seam.
inline double seam_discontinuity(const LatentVideo& global, const SegmentLayout& layout) {
    require(global.frames() == layout.total_frames(), ErrorKind::Shape, "seam_discontinuity: layout mismatch");
    if (layout.n_segments < 2) return 0.0;
    const std::size_t fs = global.frame_size();
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < layout.n_segments; ++i) {
        const std::size_t first = layout.start(i + 1), last = layout.start(i) + layout.segment_frames;
        double pair = 0.0;
        for (std::size_t g = first; g <= last; ++g) {
            const auto a = global.frame(g - 1), b = global.frame(g);
            double diff = 0.0;
            for (std::size_t k = 0; k < fs; ++k) diff += std::abs(b[k] - a[k]);
            pair += diff / static_cast<double>(fs);
        }
        total += pair / static_cast<double>(last - first + 1);
    }
    return total / static_cast<double>(layout.n_segments - 1);
}

struct AblationResult {
    MultiPromptResult run;
    AblationToggles toggles;
    std::string row;
    double seam = 0.0;
};

inline AblationResult run_ablation(const PromptSchedule& sch, const AblationToggles& toggles, const ModelParams& params,
                                   const SampleObserver& observer = {}) {
    AblationResult r;
    r.run = sample_multi_prompt(apply_toggles(sch, toggles), params, observer);
    r.toggles = toggles;
    r.row = ablation_row(toggles);
    r.seam = seam_discontinuity(r.run.global, r.run.layout);
    return r;
}

// ---------------------------------------------------------------------------------------------
// Editing
// ---------------------------------------------------------------------------------------------

struct EditResult {
    LatentVideo source;
    LatentVideo target;
};

// Source and target branches start from the same noise. The target shares video K/V from the
// source inside the control window (mask-guided when enabled). No latent blending.
// `sch.prompts` is unused; token_indices[0] / [1] name the source / target object tokens.
inline EditResult word_swap_run(const std::string& source_prompt, const std::string& target_prompt,
                                const PromptSchedule& sch, const ModelParams& params) {
    const auto src_tokens = tokenize(source_prompt), dst_tokens = tokenize(target_prompt);
    require(src_tokens.size() == dst_tokens.size(), ErrorKind::Invalid,
            "word_swap_run: prompts tokenize to different lengths (" + std::to_string(src_tokens.size()) + " vs " +
                std::to_string(dst_tokens.size()) + ")");
    PromptSchedule check = sch;
    check.prompts = {source_prompt, target_prompt};
    check.blending = false;
    check.validate(params.config);

    const ControlConfig& ctl = sch.control;
    const NoiseSchedule sched = noise_schedule(sch.steps);
    const Tensor src_text = embed_text(source_prompt, params.config);
    const Tensor dst_text = embed_text(target_prompt, params.config);
    const SegmentLayout one = plan_segments(1, sch.segment_frames, 0);
    LatentVideo src = initial_noise(one, sch.height, sch.width, params.config.channels, sch.seed);
    LatentVideo dst = src;

    const bool control_on = sch.kv_sharing && !ctl.kv_share_steps.empty() && !ctl.kv_share_layers.empty() &&
                            !params.config.identity_denoiser;
    const bool masked = control_on && ctl.mask_guided;
    std::optional<AttentionRecord> dst_previous;
    for (std::size_t s = 0; s < sched.steps(); ++s) {
        const double alpha = sched.level_before(s);
        const bool active = control_on && ctl.kv_share_steps.contains(s);
        ForwardTrace src_trace, dst_trace;
        const LatentVideo src_eps = predict_noise(
            src, src_text, alpha, params, ForwardOptions{.record_attention = masked && active, .capture_kv = active},
            &src_trace);
        ForwardOptions opts{.record_attention = masked};
        std::optional<ControlHook> hook;
        if (active) {
            hook.emplace(ctl, s, "target");
            hook->share_from(src_trace.kv);
            if (masked) {
                std::optional<AttentionRecord> probe;
                const AttentionRecord& cur = detail::current_record(dst_previous, dst, dst_text, alpha, params, probe);
                hook->with_masks(detail::mask_from(*src_trace.record, ctl.token_indices.at(0), ctl.mask_threshold, 0),
                                 detail::mask_from(cur, ctl.token_indices.at(1), ctl.mask_threshold, 1));
            }
            opts.hook = &*hook;
        }
        const LatentVideo dst_eps = predict_noise(dst, dst_text, alpha, params, opts, &dst_trace);
        src = apply_update(src, src_eps, sched, s);
        dst = apply_update(dst, dst_eps, sched, s);
        if (masked) dst_previous = std::move(dst_trace.record);
    }
    return {std::move(src), std::move(dst)};
}

// Baseline and reweighted runs of one prompt from the same noise. The reweight acts inside the
// control window.
inline EditResult reweight_run(const std::string& prompt, Reweight rw, const PromptSchedule& sch,
                               const ModelParams& params) {
    const std::size_t n_text = tokenize(prompt).size();
    require(rw.token < n_text, ErrorKind::Invalid,
            "reweight_run: token " + std::to_string(rw.token) + " out of range for a prompt of " +
                std::to_string(n_text) + " tokens");
    require(rw.factor >= 0.0, ErrorKind::Invalid, "reweight_run: factor must be non-negative");
    sch.control.validate(sch.steps, params.config.layers);
    const NoiseSchedule sched = noise_schedule(sch.steps);
    const Tensor text = embed_text(prompt, params.config);
    const SegmentLayout one = plan_segments(1, sch.segment_frames, 0);
    const LatentVideo init = initial_noise(one, sch.height, sch.width, params.config.channels, sch.seed);
    LatentVideo base = init, edited = init;
    for (std::size_t s = 0; s < sched.steps(); ++s) {
        base = denoise_step(base, s, text, sched, params);
        ControlHook hook(sch.control, s, "reweight");
        hook.with_reweight(rw);
        edited = denoise_step(edited, s, text, sched, params, ForwardOptions{.hook = &hook});
    }
    return {std::move(base), std::move(edited)};
}

} // namespace ditctrl
