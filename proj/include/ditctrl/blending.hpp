#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ditctrl/error.hpp"
#include "ditctrl/latent.hpp"

namespace ditctrl {

// n segments of T frames placed at stride T - O on the global frame axis.
struct SegmentLayout {
    std::size_t n_segments = 1;
    std::size_t segment_frames = 1; // T
    std::size_t overlap = 0;        // O

    std::size_t stride() const { return segment_frames - overlap; }
    std::size_t start(std::size_t i) const { return i * stride(); }
    std::size_t total_frames() const { return segment_frames + (n_segments - 1) * stride(); }

    // Segments whose range contains global frame g, in ascending order.
    std::vector<std::size_t> covering(std::size_t g) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < n_segments; ++i)
            if (start(i) <= g && g < start(i) + segment_frames) out.push_back(i);
        return out;
    }

    friend bool operator==(const SegmentLayout&, const SegmentLayout&) = default;
};

inline SegmentLayout plan_segments(std::size_t n, std::size_t T, std::size_t O) {
    require(n >= 1, ErrorKind::Invalid, "plan_segments: need at least one segment");
    require(T >= 1, ErrorKind::Invalid, "plan_segments: segment length must be positive");
    require(O < T, ErrorKind::Invalid,
            "plan_segments: overlap " + std::to_string(O) + " must be smaller than segment length " + std::to_string(T));
    return SegmentLayout{n, T, O};
}

// w(t) = min(2(t + 0.5)/T, 2 - 2(t + 0.5)/T), evaluated as min(2t + 1, 2T - 2t - 1) / T so
// that w(t) and w(T - 1 - t) are bitwise equal.
inline double position_weight(std::size_t t, std::size_t T) {
    require(t < T, ErrorKind::Invalid,
            "position_weight: local frame " + std::to_string(t) + " outside segment of " + std::to_string(T));
    const double rising = static_cast<double>(2 * t + 1);
    const double falling = static_cast<double>(2 * T - 2 * t - 1);
    return std::min(rising, falling) / static_cast<double>(T);
}

inline std::vector<double> blend_weights(std::size_t T) {
    std::vector<double> w(T);
    for (std::size_t t = 0; t < T; ++t) w[t] = position_weight(t, T);
    return w;
}

// Global frame g = sum_i c_i z_i(g - start_i) with c_i = w_i / sum_j w_j over the segments
// covering g, evaluated as z_a + sum_{i != a} c_i (z_i - z_a) for the first contributor a.
// Equal contributions therefore reproduce their value exactly, and a frame with a single
// contributor is copied as-is.
inline LatentVideo blend(const std::vector<LatentVideo>& segments, const SegmentLayout& layout) {
    require(segments.size() == layout.n_segments, ErrorKind::Shape,
            "blend: " + std::to_string(segments.size()) + " segment latents for a layout of " +
                std::to_string(layout.n_segments));
    const LatentVideo& first = segments.front();
    for (const auto& s : segments) {
        require(s.frames() == layout.segment_frames, ErrorKind::Shape,
                "blend: segment has " + std::to_string(s.frames()) + " frames, layout expects " +
                    std::to_string(layout.segment_frames));
        require(s.height() == first.height() && s.width() == first.width() && s.channels() == first.channels(),
                ErrorKind::Shape, "blend: segment spatial/channel shapes differ");
    }
    const std::size_t T = layout.segment_frames, fs = first.frame_size();
    LatentVideo out(layout.total_frames(), first.height(), first.width(), first.channels());
    for (std::size_t g = 0; g < layout.total_frames(); ++g) {
        const auto cover = layout.covering(g);
        auto dst = out.frame(g);
        if (cover.size() == 1) {
            const auto src = segments[cover[0]].frame(g - layout.start(cover[0]));
            std::copy(src.begin(), src.end(), dst.begin());
            continue;
        }
        double denom = 0.0;
        for (std::size_t i : cover) denom += position_weight(g - layout.start(i), T);
        const auto anchor = segments[cover[0]].frame(g - layout.start(cover[0]));
        std::copy(anchor.begin(), anchor.end(), dst.begin());
        for (std::size_t j = 1; j < cover.size(); ++j) {
            const std::size_t i = cover[j];
            const double c = position_weight(g - layout.start(i), T) / denom;
            const auto src = segments[i].frame(g - layout.start(i));
            for (std::size_t k = 0; k < fs; ++k) dst[k] += c * (src[k] - anchor[k]);
        }
    }
    return out;
}

// Segment i's view [start_i, start_i + T) of a global latent.
inline std::vector<LatentVideo> reslice(const LatentVideo& global, const SegmentLayout& layout) {
    require(global.frames() == layout.total_frames(), ErrorKind::Shape,
            "reslice: global latent has " + std::to_string(global.frames()) + " frames, layout needs " +
                std::to_string(layout.total_frames()));
    std::vector<LatentVideo> out;
    out.reserve(layout.n_segments);
    for (std::size_t i = 0; i < layout.n_segments; ++i)
        out.push_back(global.frames_slice(layout.start(i), layout.segment_frames));
    return out;
}

inline std::string weights_file_name(std::size_t T) { return "weights_T" + std::to_string(T) + ".csv"; }

// Rows "t,w" with a header line.
inline void write_weights_csv(const std::filesystem::path& path, std::size_t T) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out << "t,w\n";
    char buf[64];
    for (std::size_t t = 0; t < T; ++t) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", t, position_weight(t, T));
        out << buf;
    }
}

} // namespace ditctrl
