#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ditctrl/error.hpp"
#include "ditctrl/model.hpp"
#include "ditctrl/tensor.hpp"
#include "ditctrl/tensor_io.hpp"

namespace ditctrl {

// Half-open index window [lo, hi).
struct Window {
    std::size_t lo = 0;
    std::size_t hi = 0;

    bool contains(std::size_t x) const { return lo <= x && x < hi; }
    bool empty() const { return hi <= lo; }

    friend bool operator==(const Window&, const Window&) = default;
};

struct ControlConfig {
    Window kv_share_steps{2, 25};
    Window kv_share_layers{25, 30};
    double mask_threshold = 0.3;
    bool mask_guided = true;
    // Foreground-object text-token positions, one list per prompt.
    std::vector<std::vector<std::size_t>> token_indices;

    void validate(std::size_t total_steps, std::size_t n_layers) const {
        auto check = [](const Window& w, std::size_t total, const char* name) {
            require(w.lo <= w.hi, ErrorKind::Config,
                    std::string(name) + " window [" + std::to_string(w.lo) + ", " + std::to_string(w.hi) +
                        ") has lo > hi");
            require(w.hi <= total, ErrorKind::Config,
                    std::string(name) + " window [" + std::to_string(w.lo) + ", " + std::to_string(w.hi) +
                        ") exceeds total " + std::to_string(total));
        };
        check(kv_share_steps, total_steps, "kv_share_steps");
        check(kv_share_layers, n_layers, "kv_share_layers");
        require(mask_threshold > 0.0 && mask_threshold < 1.0, ErrorKind::Config,
                "mask_threshold must lie in (0, 1), got " + std::to_string(mask_threshold));
    }

    friend bool operator==(const ControlConfig&, const ControlConfig&) = default;
};

inline bool window_active(std::size_t step, std::size_t layer, const ControlConfig& cfg) {
    return cfg.kv_share_steps.contains(step) && cfg.kv_share_layers.contains(layer);
}

// ---------------------------------------------------------------------------------------------
// Semantic maps and masks
// ---------------------------------------------------------------------------------------------

struct SemanticMap {
    Tensor values; // F x H x W, each frame min-max normalized to [0, 1]
    std::vector<std::size_t> tokens;
    std::string branch;
};

struct SemanticMask {
    Tensor bits; // F x H x W, values 0 or 1
    double threshold = 0.0;
    std::string branch;

    std::size_t size() const { return bits.size(); }
    std::vector<std::uint8_t> key_bits() const {
        std::vector<std::uint8_t> out(bits.size());
        for (std::size_t i = 0; i < bits.size(); ++i) out[i] = bits[i] != 0.0 ? 1 : 0;
        return out;
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (double b : bits.values()) n += b != 0.0;
        return n;
    }
};

// Per video token v: mean over layers, heads and j in `token_indices` of
// (T2V[j, v] + V2T[v, j]) / 2, then min-max normalized within each frame. A frame whose raw
// scores are all equal normalizes to 0.
inline SemanticMap extract_semantic_map(const AttentionRecord& rec, const std::vector<std::size_t>& token_indices,
                                        std::string branch = {}) {
    require(!token_indices.empty(), ErrorKind::Invalid, "extract_semantic_map: empty token set");
    require(rec.complete(), ErrorKind::Invalid, "extract_semantic_map: attention record is missing layers");
    for (std::size_t j : token_indices)
        require(j < rec.n_text, ErrorKind::Invalid,
                "extract_semantic_map: token index " + std::to_string(j) + " >= n_text " + std::to_string(rec.n_text));
    const std::size_t n = rec.n_text, nv = rec.n_video();
    std::vector<double> raw(nv, 0.0);
    for (std::size_t l = 0; l < rec.n_layers; ++l)
        for (std::size_t h = 0; h < rec.n_heads; ++h) {
            const Tensor& a = rec.at(l, h);
            for (std::size_t j : token_indices)
                for (std::size_t v = 0; v < nv; ++v) raw[v] += (a(j, n + v) + a(n + v, j)) / 2.0;
        }
    const double count = static_cast<double>(rec.n_layers * rec.n_heads * token_indices.size());
    for (double& x : raw) x /= count;

    SemanticMap map;
    map.values = Tensor({rec.frames, rec.height, rec.width});
    map.tokens = token_indices;
    map.branch = std::move(branch);
    const std::size_t hw = rec.height * rec.width;
    for (std::size_t f = 0; f < rec.frames; ++f) {
        const auto first = raw.begin() + static_cast<std::ptrdiff_t>(f * hw);
        const auto [mn, mx] = std::minmax_element(first, first + static_cast<std::ptrdiff_t>(hw));
        const double lo = *mn, span = *mx - *mn;
        for (std::size_t p = 0; p < hw; ++p)
            map.values[f * hw + p] = span > 0.0 ? (raw[f * hw + p] - lo) / span : 0.0;
    }
    return map;
}

// bit = 1 iff value >= threshold.
inline SemanticMask binarize(const SemanticMap& map, double threshold) {
    require(threshold > 0.0 && threshold < 1.0, ErrorKind::Invalid,
            "binarize: threshold must lie in (0, 1), got " + std::to_string(threshold));
    SemanticMask m;
    m.bits = Tensor(map.values.dims());
    for (std::size_t i = 0; i < map.values.size(); ++i) m.bits[i] = map.values[i] >= threshold ? 1.0 : 0.0;
    m.threshold = threshold;
    m.branch = map.branch;
    return m;
}

inline std::string mask_file_name(const std::string& branch, std::size_t frame) {
    return "mask_" + branch + "_f" + std::to_string(frame) + ".pgm";
}

// One P5 image per frame, 0 for background and 255 for foreground.
inline void write_mask_pgms(const std::filesystem::path& dir, const SemanticMask& mask) {
    require(mask.bits.rank() == 3, ErrorKind::Shape, "write_mask_pgms: mask must be F x H x W");
    const std::size_t F = mask.bits.dim(0), H = mask.bits.dim(1), W = mask.bits.dim(2);
    for (std::size_t f = 0; f < F; ++f) {
        GrayImage img{W, H, std::vector<std::uint8_t>(H * W)};
        for (std::size_t p = 0; p < H * W; ++p) img.pixels[p] = mask.bits[f * H * W + p] != 0.0 ? 255 : 0;
        write_pgm(dir / mask_file_name(mask.branch, f), img);
    }
}

inline SemanticMask read_mask_pgms(const std::filesystem::path& dir, const std::string& branch, std::size_t frames) {
    SemanticMask m;
    m.branch = branch;
    std::vector<double> bits;
    std::size_t H = 0, W = 0;
    for (std::size_t f = 0; f < frames; ++f) {
        const GrayImage img = read_pgm(dir / mask_file_name(branch, f));
        if (f == 0) {
            H = img.height;
            W = img.width;
        }
        require(img.height == H && img.width == W, ErrorKind::Io, "read_mask_pgms: frame size mismatch");
        for (auto px : img.pixels) {
            require(px == 0 || px == 255, ErrorKind::Io, "read_mask_pgms: mask pixels must be 0 or 255");
            bits.push_back(px == 255 ? 1.0 : 0.0);
        }
    }
    m.bits = Tensor({frames, H, W}, std::move(bits));
    return m;
}

// ---------------------------------------------------------------------------------------------
// KV-sharing and mask-guided fusion
// ---------------------------------------------------------------------------------------------

// Keys/values for one head. Rows [0, n_text) are text tokens, the rest video tokens.
struct KeyValues {
    Tensor keys;
    Tensor values;
    std::size_t n_text = 0;
};

// Current-branch text K/V followed by source-branch video K/V.
inline KeyValues assemble_shared_kv(const Tensor& k_cur, const Tensor& v_cur, std::size_t n_text_cur,
                                    const Tensor& k_src, const Tensor& v_src, std::size_t n_text_src) {
    require(k_cur.rows() - n_text_cur == k_src.rows() - n_text_src, ErrorKind::Shape,
            "assemble_shared_kv: source and target have different video token counts");
    require(k_cur.cols() == k_src.cols() && v_cur.cols() == v_src.cols(), ErrorKind::Shape,
            "assemble_shared_kv: head dimension mismatch");
    KeyValues kv;
    kv.keys = concat_rows(slice_rows(k_cur, 0, n_text_cur), slice_rows(k_src, n_text_src, k_src.rows()));
    kv.values = concat_rows(slice_rows(v_cur, 0, n_text_cur), slice_rows(v_src, n_text_src, v_src.rows()));
    kv.n_text = n_text_cur;
    return kv;
}

// softmax(Q K_srcᵀ · scale) V_src over the assembled key set.
inline HeadOutput kv_share(const Tensor& q, const KeyValues& kv, double scale) {
    require(q.cols() == kv.keys.cols(), ErrorKind::Shape, "kv_share: query/key head dimension mismatch");
    return attention_head(q, kv.keys, kv.values, scale);
}

namespace detail {

inline void check_fusion_masks(std::span<const std::uint8_t> m_src, std::size_t video_keys,
                               std::span<const std::uint8_t> m_cur, std::size_t video_queries) {
    require(m_src.size() == video_keys, ErrorKind::Shape,
            "mask_guided_fusion: source mask covers " + std::to_string(m_src.size()) + " tokens, expected " +
                std::to_string(video_keys));
    require(m_cur.size() == video_queries, ErrorKind::Shape,
            "mask_guided_fusion: current mask covers " + std::to_string(m_cur.size()) + " tokens, expected " +
                std::to_string(video_queries));
    const auto ones = static_cast<std::size_t>(std::count_if(m_src.begin(), m_src.end(), [](auto b) { return b != 0; }));
    require(ones > 0, ErrorKind::DegenerateMask, "mask_guided_fusion: source mask is all background, foreground branch has no keys");
    require(ones < m_src.size(), ErrorKind::DegenerateMask,
            "mask_guided_fusion: source mask is all foreground, background branch has no keys");
}

} // namespace detail

// Attention probabilities of the mask-guided fusion. Text queries use plain shared attention.
// Video query v attends to text keys plus the source foreground keys when m_cur[v] = 1
// (f_o), or text keys plus the source background keys when m_cur[v] = 0 (f_b).
inline Tensor mask_guided_probs(const Tensor& q, const KeyValues& kv, std::span<const std::uint8_t> m_src,
                                std::span<const std::uint8_t> m_cur, double scale) {
    const std::size_t n = kv.n_text;
    require(q.rows() >= n, ErrorKind::Shape, "mask_guided_fusion: fewer queries than text tokens");
    detail::check_fusion_masks(m_src, kv.keys.rows() - n, m_cur, q.rows() - n);

    Tensor logits = matmul_transposed(q, kv.keys);
    for (auto& x : logits.values()) x *= scale;

    std::vector<std::uint8_t> fg(kv.keys.rows(), 1), bg(kv.keys.rows(), 1);
    for (std::size_t k = 0; k < m_src.size(); ++k) {
        fg[n + k] = m_src[k] ? 1 : 0;
        bg[n + k] = m_src[k] ? 0 : 1;
    }
    Tensor probs({q.rows(), kv.keys.rows()});
    if (n > 0) {
        const Tensor text = softmax_rows(slice_rows(logits, 0, n));
        std::copy(text.values().begin(), text.values().end(), probs.values().begin());
    }
    if (q.rows() > n) {
        const Tensor video_logits = slice_rows(logits, n, q.rows());
        const Tensor f_o = masked_softmax_rows(video_logits, fg);
        const Tensor f_b = masked_softmax_rows(video_logits, bg);
        for (std::size_t v = 0; v < video_logits.rows(); ++v) {
            const auto src = m_cur[v] ? f_o.row(v) : f_b.row(v);
            std::copy(src.begin(), src.end(), probs.row(n + v).begin());
        }
    }
    return probs;
}

// f = f_o * M_cur + f_b * (1 - M_cur) with f_o / f_b the source-foreground / source-background
// restricted attentions. M_cur is binary, so each video row is exactly one of the two.
inline HeadOutput mask_guided_fusion(const Tensor& q, const KeyValues& kv, std::span<const std::uint8_t> m_src,
                                     std::span<const std::uint8_t> m_cur, double scale) {
    HeadOutput out;
    out.probs = mask_guided_probs(q, kv, m_src, m_cur, scale);
    out.output = matmul(out.probs, kv.values);
    return out;
}

inline HeadOutput mask_guided_fusion(const Tensor& q, const KeyValues& kv, const SemanticMask& m_src,
                                     const SemanticMask& m_cur, double scale) {
    const auto src = m_src.key_bits(), cur = m_cur.key_bits();
    return mask_guided_fusion(q, kv, src, cur, scale);
}

// ---------------------------------------------------------------------------------------------
// Editing primitives
// ---------------------------------------------------------------------------------------------

// Scales the T2V row and the V2T column of `token` by `factor` in post-softmax probabilities.
// Rows are not renormalized.
inline Tensor reweight_region(const Tensor& probs, std::size_t n_text, std::size_t token, double factor) {
    require(factor >= 0.0, ErrorKind::Invalid, "reweight_region: factor must be non-negative");
    require(token < n_text, ErrorKind::Invalid,
            "reweight_region: token " + std::to_string(token) + " is not a text token (n_text " +
                std::to_string(n_text) + ")");
    Tensor out = probs;
    for (std::size_t c = n_text; c < out.cols(); ++c) out(token, c) *= factor;
    for (std::size_t r = n_text; r < out.rows(); ++r) out(r, token) *= factor;
    return out;
}

struct Reweight {
    std::size_t token = 0;
    double factor = 1.0;
};

// Per-step control hook for one branch. Inside the (step, layer) window it substitutes source
// video K/V (plain or mask-guided) and/or reweights a token; outside it defers to vanilla.
class ControlHook : public AttentionHook {
public:
    ControlHook(const ControlConfig& cfg, std::size_t step, std::string branch = {})
        : cfg_(cfg), step_(step), branch_(std::move(branch)) {}

    ControlHook& share_from(const KvCapture& source) {
        source_ = &source;
        return *this;
    }
    ControlHook& with_masks(SemanticMask source_mask, SemanticMask current_mask) {
        src_bits_ = source_mask.key_bits();
        cur_bits_ = current_mask.key_bits();
        masked_ = true;
        return *this;
    }
    ControlHook& with_reweight(Reweight rw) {
        reweight_ = rw;
        return *this;
    }

    std::optional<HeadOutput> attend(const HeadInputs& in) override {
        if (!window_active(step_, in.layer, cfg_)) return std::nullopt;
        if (!source_ && !reweight_) return std::nullopt;
        try {
            KeyValues kv = source_ ? assemble_shared_kv(in.k, in.v, in.n_text, source_->key(in.layer, in.head),
                                                        source_->value(in.layer, in.head), source_->n_text)
                                   : KeyValues{in.k, in.v, in.n_text};
            if (!reweight_) {
                if (source_ && masked_) return mask_guided_fusion(in.q, kv, src_bits_, cur_bits_, in.scale);
                return kv_share(in.q, kv, in.scale);
            }
            Tensor probs = (source_ && masked_) ? mask_guided_probs(in.q, kv, src_bits_, cur_bits_, in.scale)
                                                : attention_head(in.q, kv.keys, kv.values, in.scale).probs;
            probs = reweight_region(probs, in.n_text, reweight_->token, reweight_->factor);
            HeadOutput out;
            out.output = matmul(probs, kv.values);
            out.probs = std::move(probs);
            return out;
        } catch (const Error& e) {
            throw Error(e.kind(), std::string(e.what()) + " (step " + std::to_string(step_) + ", layer " +
                                      std::to_string(in.layer) + ", branch " + branch_ + ")");
        }
    }

private:
    const ControlConfig& cfg_;
    std::size_t step_;
    std::string branch_;
    const KvCapture* source_ = nullptr;
    bool masked_ = false;
    std::vector<std::uint8_t> src_bits_, cur_bits_;
    std::optional<Reweight> reweight_;
};

} // namespace ditctrl
