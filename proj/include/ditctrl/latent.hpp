#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ditctrl/error.hpp"
#include "ditctrl/rng.hpp"
#include "ditctrl/tensor.hpp"

namespace ditctrl {

// Diffusion state: frames x height x width x channels.
class LatentVideo {
public:
    LatentVideo() = default;

    LatentVideo(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
        : t_({frames, height, width, channels}, fill) {}

    explicit LatentVideo(Tensor t) : t_(std::move(t)) {
        require(t_.rank() == 4, ErrorKind::Shape, "LatentVideo expects a rank-4 tensor, got " + dims_to_string(t_.dims()));
    }

    std::size_t frames() const { return t_.dim(0); }
    std::size_t height() const { return t_.dim(1); }
    std::size_t width() const { return t_.dim(2); }
    std::size_t channels() const { return t_.dim(3); }
    std::size_t frame_size() const { return height() * width() * channels(); }

    const Tensor& tensor() const noexcept { return t_; }
    Tensor& tensor() noexcept { return t_; }

    double& at(std::size_t f, std::size_t h, std::size_t w, std::size_t c) {
        return t_[((f * height() + h) * width() + w) * channels() + c];
    }
    double at(std::size_t f, std::size_t h, std::size_t w, std::size_t c) const {
        return t_[((f * height() + h) * width() + w) * channels() + c];
    }

    std::span<double> frame(std::size_t f) { return t_.values().subspan(f * frame_size(), frame_size()); }
    std::span<const double> frame(std::size_t f) const { return t_.values().subspan(f * frame_size(), frame_size()); }

    bool same_shape(const LatentVideo& o) const { return t_.dims() == o.t_.dims(); }

    // Frames [begin, begin + count).
    LatentVideo frames_slice(std::size_t begin, std::size_t count) const {
        require(count > 0 && begin + count <= frames(), ErrorKind::Shape, "frames_slice: range out of bounds");
        const auto src = t_.values().subspan(begin * frame_size(), count * frame_size());
        return LatentVideo(Tensor({count, height(), width(), channels()}, std::vector<double>(src.begin(), src.end())));
    }

    friend bool operator==(const LatentVideo&, const LatentVideo&) = default;

private:
    Tensor t_;
};

inline LatentVideo gaussian_latent(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
                                   std::uint64_t seed) {
    LatentVideo z(frames, height, width, channels);
    Rng rng(seed);
    for (auto& v : z.tensor().values()) v = rng.normal();
    return z;
}

inline LatentVideo concat_frames(const std::vector<LatentVideo>& parts) {
    require(!parts.empty(), ErrorKind::Shape, "concat_frames: no parts");
    std::size_t frames = 0;
    for (const auto& p : parts) {
        require(p.height() == parts[0].height() && p.width() == parts[0].width() && p.channels() == parts[0].channels(),
                ErrorKind::Shape, "concat_frames: spatial/channel mismatch");
        frames += p.frames();
    }
    std::vector<double> data;
    data.reserve(frames * parts[0].frame_size());
    for (const auto& p : parts) data.insert(data.end(), p.tensor().values().begin(), p.tensor().values().end());
    return LatentVideo(Tensor({frames, parts[0].height(), parts[0].width(), parts[0].channels()}, std::move(data)));
}

} // namespace ditctrl
