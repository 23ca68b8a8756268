#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ditctrl/error.hpp"
#include "ditctrl/latent.hpp"
#include "ditctrl/rng.hpp"
#include "ditctrl/tensor.hpp"
#include "ditctrl/tensor_io.hpp"

namespace ditctrl {

// ---------------------------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------------------------

struct ModelConfig {
    std::size_t layers = 30;
    std::size_t heads = 2;
    std::size_t d_model = 16;
    std::size_t channels = 4;
    std::uint64_t seed = 0;
    // Predicts zero noise regardless of input; makes the sampler recursion closed-form.
    bool identity_denoiser = false;

    std::size_t d_head() const { return d_model / heads; }

    void validate() const {
        require(layers > 0, ErrorKind::Config, "model.layers must be positive");
        require(heads > 0, ErrorKind::Config, "model.heads must be positive");
        require(d_model > 0 && d_model % 2 == 0, ErrorKind::Config, "model.d_model must be positive and even");
        require(d_model % heads == 0, ErrorKind::Config,
                "model.d_model (" + std::to_string(d_model) + ") must be divisible by model.heads (" +
                    std::to_string(heads) + ")");
        require(channels > 0, ErrorKind::Config, "model.channels must be positive");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    Tensor wq, wk, wv, wo; // each d_model x d_model
};

// Toy MM-DiT weights, all drawn from uniform(-0.1, 0.1) with one seeded generator in a fixed
// order: per layer (W_Q, W_K, W_V, W_O), then the patch embedding, then the output projection.
struct ModelParams {
    ModelConfig config;
    std::vector<LayerWeights> layers;
    Tensor patch_embed; // channels x d_model
    Tensor output_proj; // d_model x channels

    static ModelParams generate(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.config = cfg;
        Rng rng(mix_seed(cfg.seed, 0x5eedull));
        auto draw = [&](std::size_t r, std::size_t c) {
            Tensor t({r, c});
            for (auto& v : t.values()) v = rng.uniform(-0.1, 0.1);
            return t;
        };
        const std::size_t d = cfg.d_model;
        p.layers.reserve(cfg.layers);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            LayerWeights w;
            w.wq = draw(d, d);
            w.wk = draw(d, d);
            w.wv = draw(d, d);
            w.wo = draw(d, d);
            p.layers.push_back(std::move(w));
        }
        p.patch_embed = draw(cfg.channels, d);
        p.output_proj = draw(d, cfg.channels);
        return p;
    }
};

// ---------------------------------------------------------------------------------------------
// Toy text embedder
// ---------------------------------------------------------------------------------------------

// Lower-cased alphanumeric words followed by an end-of-sequence token.
inline std::vector<std::string> tokenize(std::string_view prompt) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : prompt) {
        const auto uc = static_cast<unsigned char>(ch);
        if (std::isalnum(uc)) {
            cur += static_cast<char>(std::tolower(uc));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    words.emplace_back("<eos>");
    return words;
}

// Each word maps to a standard-normal vector seeded by FNV-1a(word) mixed with the model seed,
// so equal words embed identically wherever they appear.
inline Tensor embed_text(std::string_view prompt, const ModelConfig& cfg) {
    const auto words = tokenize(prompt);
    Tensor out({words.size(), cfg.d_model});
    for (std::size_t j = 0; j < words.size(); ++j) {
        Rng rng(mix_seed(cfg.seed ^ 0x7e47ull, fnv1a64(words[j])));
        for (std::size_t c = 0; c < cfg.d_model; ++c) out(j, c) = rng.normal();
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Unified sequence
// ---------------------------------------------------------------------------------------------

// Text tokens followed by video tokens; video token (f, h, w) sits at n_text + (f*H + h)*W + w.
struct UnifiedSequence {
    Tensor tokens; // L x d_model
    std::size_t n_text = 0;
    std::size_t frames = 0, height = 0, width = 0;

    std::size_t length() const { return tokens.rows(); }
    std::size_t n_video() const { return frames * height * width; }
    std::size_t video_index(std::size_t f, std::size_t h, std::size_t w) const {
        return n_text + (f * height + h) * width + w;
    }
};

inline UnifiedSequence build_unified_sequence(const Tensor& text_embed, const LatentVideo& latent,
                                              const ModelParams& params) {
    const std::size_t d = params.config.d_model;
    require(latent.channels() == params.config.channels, ErrorKind::Shape,
            "build_unified_sequence: latent has " + std::to_string(latent.channels()) + " channels, model expects " +
                std::to_string(params.config.channels));
    if (!text_embed.empty())
        require(text_embed.rank() == 2 && text_embed.cols() == d, ErrorKind::Shape,
                "build_unified_sequence: text embedding must be n_text x " + std::to_string(d));
    const std::size_t n_video = latent.frames() * latent.height() * latent.width();
    const Tensor pixels = latent.tensor().reshaped({n_video, latent.channels()});
    UnifiedSequence seq;
    seq.tokens = concat_rows(text_embed, matmul(pixels, params.patch_embed));
    seq.n_text = text_embed.empty() ? 0 : text_embed.rows();
    seq.frames = latent.frames();
    seq.height = latent.height();
    seq.width = latent.width();
    return seq;
}

// Smooth per-axis code: frequency pi/extent halving per pair of channels, so the slowest-moving
// channel is monotone over the axis. `phase` separates the three video axes.
inline void add_axis_encoding(std::span<double> row, double pos, double extent, double phase) {
    const std::size_t half = row.size() / 2;
    double omega = std::numbers::pi / extent;
    for (std::size_t i = 0; i < half; ++i, omega *= 0.5) {
        row[2 * i] += std::sin(pos * omega + phase);
        row[2 * i + 1] += std::cos(pos * omega + phase);
    }
}

// Classic transformer sinusoid with base 10000.
inline void add_sinusoid(std::span<double> row, double pos) {
    const std::size_t half = row.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(row.size()));
        row[2 * i] += std::sin(pos * omega);
        row[2 * i + 1] += std::cos(pos * omega);
    }
}

// Timestep embedding at t = 1000 * (1 - alpha_bar).
inline void add_time_encoding(UnifiedSequence& seq, double alpha_bar) {
    for (std::size_t r = 0; r < seq.length(); ++r) add_sinusoid(seq.tokens.row(r), 1000.0 * (1.0 - alpha_bar));
}

inline void add_position_encoding(UnifiedSequence& seq) {
    for (std::size_t j = 0; j < seq.n_text; ++j) add_sinusoid(seq.tokens.row(j), static_cast<double>(j));
    for (std::size_t f = 0; f < seq.frames; ++f)
        for (std::size_t h = 0; h < seq.height; ++h)
            for (std::size_t w = 0; w < seq.width; ++w) {
                auto row = seq.tokens.row(seq.video_index(f, h, w));
                add_axis_encoding(row, static_cast<double>(f), static_cast<double>(seq.frames), 0.0);
                add_axis_encoding(row, static_cast<double>(h), static_cast<double>(seq.height), std::numbers::pi / 4);
                add_axis_encoding(row, static_cast<double>(w), static_cast<double>(seq.width), std::numbers::pi / 2);
            }
}

// ---------------------------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------------------------

struct HeadOutput {
    Tensor output; // queries x d_head
    Tensor probs;  // queries x keys, post-softmax (post-hook)
};

// softmax(q kᵀ * scale [masked]) v. Every attention variant in the library routes through this
// function, so substituting a branch's own K/V reproduces vanilla attention bitwise.
inline HeadOutput attention_head(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                                 std::span<const std::uint8_t> key_mask = {}) {
    require(k.rows() == v.rows(), ErrorKind::Shape, "attention_head: key/value count mismatch");
    Tensor logits = matmul_transposed(q, k);
    for (auto& x : logits.values()) x *= scale;
    HeadOutput out;
    out.probs = key_mask.empty() ? softmax_rows(logits) : masked_softmax_rows(logits, key_mask);
    out.output = matmul(out.probs, v);
    return out;
}

struct HeadInputs {
    std::size_t layer;
    std::size_t head;
    std::size_t n_text;
    const Tensor& q; // L x d_head
    const Tensor& k;
    const Tensor& v;
    double scale;
};

// Control seam. attend() returns nullopt to run vanilla attention for that (layer, head).
class AttentionHook {
public:
    virtual ~AttentionHook() = default;
    virtual std::optional<HeadOutput> attend(const HeadInputs& in) = 0;
};

// Post-softmax attention per (layer, head) over the unified sequence.
struct AttentionRecord {
    std::size_t n_layers = 0, n_heads = 0, n_text = 0;
    std::size_t frames = 0, height = 0, width = 0;
    std::vector<Tensor> probs; // index layer * n_heads + head; absent tensor = not recorded

    AttentionRecord() = default;
    AttentionRecord(std::size_t layers, std::size_t heads, const UnifiedSequence& seq)
        : n_layers(layers), n_heads(heads), n_text(seq.n_text), frames(seq.frames), height(seq.height),
          width(seq.width), probs(layers * heads) {}

    std::size_t length() const { return n_text + n_video(); }
    std::size_t n_video() const { return frames * height * width; }

    const Tensor& at(std::size_t layer, std::size_t head) const {
        require(layer < n_layers && head < n_heads, ErrorKind::Shape,
                "attention record index (" + std::to_string(layer) + ", " + std::to_string(head) + ") out of range");
        return probs[layer * n_heads + head];
    }
    Tensor& at(std::size_t layer, std::size_t head) {
        require(layer < n_layers && head < n_heads, ErrorKind::Shape, "attention record index out of range");
        return probs[layer * n_heads + head];
    }

    bool complete() const {
        if (probs.empty()) return false;
        return std::all_of(probs.begin(), probs.end(), [&](const Tensor& t) {
            return t.rank() == 2 && t.rows() == length() && t.cols() == length();
        });
    }
};

// Per-(layer, head) keys and values of one forward pass, L x d_head each.
struct KvCapture {
    std::size_t n_layers = 0, n_heads = 0, n_text = 0;
    std::vector<Tensor> keys, values;

    const Tensor& key(std::size_t layer, std::size_t head) const { return keys.at(layer * n_heads + head); }
    const Tensor& value(std::size_t layer, std::size_t head) const { return values.at(layer * n_heads + head); }
    bool empty() const { return keys.empty(); }
};

struct ForwardOptions {
    bool record_attention = false;
    bool capture_kv = false;
    AttentionHook* hook = nullptr;
};

struct ForwardTrace {
    std::optional<AttentionRecord> record;
    KvCapture kv;
};

// One MM-DiT block: multi-head full attention over the unified sequence with residual add.
inline UnifiedSequence full_attention(const UnifiedSequence& seq, std::size_t layer, const ModelParams& params,
                                      AttentionHook* hook = nullptr, ForwardTrace* trace = nullptr) {
    const auto& cfg = params.config;
    require(layer < cfg.layers, ErrorKind::Shape,
            "full_attention: layer " + std::to_string(layer) + " >= " + std::to_string(cfg.layers));
    const LayerWeights& w = params.layers[layer];
    const std::size_t dh = cfg.d_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Tensor q_all = matmul(seq.tokens, w.wq);
    const Tensor k_all = matmul(seq.tokens, w.wk);
    const Tensor v_all = matmul(seq.tokens, w.wv);
    Tensor heads_out({seq.length(), cfg.d_model});

    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const Tensor q = slice_cols(q_all, h * dh, (h + 1) * dh);
        const Tensor k = slice_cols(k_all, h * dh, (h + 1) * dh);
        const Tensor v = slice_cols(v_all, h * dh, (h + 1) * dh);
        std::optional<HeadOutput> res;
        if (hook) res = hook->attend(HeadInputs{layer, h, seq.n_text, q, k, v, scale});
        if (!res) res = attention_head(q, k, v, scale);
        require(res->output.rows() == seq.length() && res->output.cols() == dh, ErrorKind::Shape,
                "full_attention: hook returned a malformed head output");
        for (std::size_t r = 0; r < seq.length(); ++r)
            for (std::size_t c = 0; c < dh; ++c) heads_out(r, h * dh + c) = res->output(r, c);
        if (trace) {
            if (trace->record) trace->record->at(layer, h) = std::move(res->probs);
            if (!trace->kv.keys.empty()) {
                trace->kv.keys[layer * cfg.heads + h] = k;
                trace->kv.values[layer * cfg.heads + h] = v;
            }
        }
    }

    UnifiedSequence out = seq;
    const Tensor proj = matmul(heads_out, w.wo);
    for (std::size_t i = 0; i < out.tokens.size(); ++i) out.tokens[i] += proj[i];
    return out;
}

// Runs every block on an already position/time-encoded sequence.
inline UnifiedSequence forward_tokens(UnifiedSequence seq, const ModelParams& params, const ForwardOptions& opts = {},
                                      ForwardTrace* trace = nullptr) {
    const auto& cfg = params.config;
    ForwardTrace local;
    ForwardTrace* tr = trace ? trace : &local;
    if (opts.record_attention) tr->record.emplace(cfg.layers, cfg.heads, seq);
    if (opts.capture_kv) {
        tr->kv.n_layers = cfg.layers;
        tr->kv.n_heads = cfg.heads;
        tr->kv.n_text = seq.n_text;
        tr->kv.keys.assign(cfg.layers * cfg.heads, Tensor{});
        tr->kv.values.assign(cfg.layers * cfg.heads, Tensor{});
    }
    const bool tracing = opts.record_attention || opts.capture_kv;
    for (std::size_t l = 0; l < cfg.layers; ++l) seq = full_attention(seq, l, params, opts.hook, tracing ? tr : nullptr);
    return seq;
}

// Noise prediction. The transformer reads out a clean-latent estimate x0 through the output
// projection; it is converted to noise as eps = (x - sqrt(a) x0) / sqrt(1 - a), where
// a = alpha_bar is the cumulative signal level of `latent`.
inline LatentVideo predict_noise(const LatentVideo& latent, const Tensor& text_embed, double alpha_bar,
                                 const ModelParams& params, const ForwardOptions& opts = {},
                                 ForwardTrace* trace = nullptr) {
    require(alpha_bar > 0.0 && alpha_bar < 1.0, ErrorKind::Invalid,
            "predict_noise: alpha_bar must lie in (0, 1), got " + std::to_string(alpha_bar));
    require(latent.channels() == params.config.channels, ErrorKind::Shape, "predict_noise: channel mismatch");
    if (params.config.identity_denoiser)
        return LatentVideo(latent.frames(), latent.height(), latent.width(), latent.channels());

    UnifiedSequence seq = build_unified_sequence(text_embed, latent, params);
    add_position_encoding(seq);
    add_time_encoding(seq, alpha_bar);
    const UnifiedSequence out = forward_tokens(std::move(seq), params, opts, trace);

    const Tensor video = slice_rows(out.tokens, out.n_text, out.length());
    const Tensor x0 = matmul(video, params.output_proj);
    LatentVideo eps(latent.frames(), latent.height(), latent.width(), latent.channels());
    const double sa = std::sqrt(alpha_bar), sb = std::sqrt(1.0 - alpha_bar);
    for (std::size_t i = 0; i < eps.tensor().size(); ++i)
        eps.tensor()[i] = (latent.tensor()[i] - sa * x0[i]) / sb;
    require(eps.tensor().all_finite(), ErrorKind::NonFinite, "predict_noise: non-finite output");
    return eps;
}

// ---------------------------------------------------------------------------------------------
// Region analysis
// ---------------------------------------------------------------------------------------------

// The four sub-blocks of an attention matrix at the text/video boundary. Empty regions are
// absent tensors.
struct RegionViews {
    Tensor t2t, t2v, v2t, v2v;
};

inline RegionViews region_views(const AttentionRecord& rec, std::size_t layer, std::size_t head) {
    const Tensor& a = rec.at(layer, head);
    require(a.rank() == 2, ErrorKind::Shape, "region_views: attention for this layer/head was not recorded");
    const std::size_t n = rec.n_text, L = a.rows();
    return RegionViews{block(a, 0, n, 0, n), block(a, 0, n, n, L), block(a, n, L, 0, n), block(a, n, L, n, L)};
}

inline Tensor reassemble(const RegionViews& v, std::size_t n_text, std::size_t length) {
    Tensor a({length, length});
    auto put = [&](const Tensor& src, std::size_t r0, std::size_t c0) {
        if (src.empty()) return;
        for (std::size_t r = 0; r < src.rows(); ++r)
            for (std::size_t c = 0; c < src.cols(); ++c) a(r0 + r, c0 + c) = src(r, c);
    };
    put(v.t2t, 0, 0);
    put(v.t2v, 0, n_text);
    put(v.v2t, n_text, 0);
    put(v.v2v, n_text, n_text);
    return a;
}

// Diagnostic numbers averaged over every recorded layer and head.
//   raw_diagonal          mean over all rows of A[r, r]
//   v2v_frame_diagonal    share of a video query's same-frame attention that lands on itself
//   v2v_temporal_diagonal share of a video query's same-position (all frames) attention on itself
//   t2t_diagonal          share of a text query's text attention on itself
//   t2t_last_token        share of a text query's text attention on the final text token
// Statistics over an empty region are reported as 0.
struct DiagonalReport {
    double raw_diagonal = 0.0;
    double v2v_frame_diagonal = 0.0;
    double v2v_temporal_diagonal = 0.0;
    double t2t_diagonal = 0.0;
    double t2t_last_token = 0.0;

    friend bool operator==(const DiagonalReport&, const DiagonalReport&) = default;
};

inline DiagonalReport diagonal_diagnostics(const AttentionRecord& rec) {
    require(rec.complete(), ErrorKind::Invalid, "diagonal_diagnostics: attention record is incomplete");
    const std::size_t n = rec.n_text, L = rec.length(), H = rec.height, W = rec.width, F = rec.frames;
    const std::size_t hw = H * W;
    DiagonalReport r;
    double raw = 0, frame = 0, temporal = 0, tdiag = 0, tlast = 0;
    for (const Tensor& a : rec.probs) {
        for (std::size_t i = 0; i < L; ++i) raw += a(i, i);
        for (std::size_t q = 0; q < rec.n_video(); ++q) {
            const std::size_t f = q / hw, p = q % hw, row = n + q;
            double same_frame = 0.0, same_pos = 0.0;
            for (std::size_t k = 0; k < hw; ++k) same_frame += a(row, n + f * hw + k);
            for (std::size_t g = 0; g < F; ++g) same_pos += a(row, n + g * hw + p);
            if (same_frame > 0) frame += a(row, row) / same_frame;
            if (same_pos > 0) temporal += a(row, row) / same_pos;
        }
        for (std::size_t j = 0; j < n; ++j) {
            double text_mass = 0.0;
            for (std::size_t k = 0; k < n; ++k) text_mass += a(j, k);
            if (text_mass > 0) {
                tdiag += a(j, j) / text_mass;
                tlast += a(j, n - 1) / text_mass;
            }
        }
    }
    const double mats = static_cast<double>(rec.probs.size());
    r.raw_diagonal = raw / (mats * static_cast<double>(L));
    if (rec.n_video() > 0) {
        r.v2v_frame_diagonal = frame / (mats * static_cast<double>(rec.n_video()));
        r.v2v_temporal_diagonal = temporal / (mats * static_cast<double>(rec.n_video()));
    }
    if (n > 0) {
        r.t2t_diagonal = tdiag / (mats * static_cast<double>(n));
        r.t2t_last_token = tlast / (mats * static_cast<double>(n));
    }
    return r;
}

inline std::string attention_dump_name(std::size_t layer, std::size_t head) {
    return "attn_L" + std::to_string(layer) + "_H" + std::to_string(head) + ".ditc";
}

} // namespace ditctrl
