#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "ditctrl/ditctrl.hpp"

namespace ditctrl::testing {

// Unique scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("ditctrl_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline ModelConfig toy_model(std::size_t layers = 4, std::uint64_t seed = 0) {
    ModelConfig c;
    c.layers = layers;
    c.heads = 2;
    c.d_model = 16;
    c.channels = 4;
    c.seed = seed;
    return c;
}

// Small two-prompt schedule for fast pipeline tests.
inline PromptSchedule toy_schedule(std::size_t steps = 8) {
    PromptSchedule s;
    s.prompts = {"a white suv drives on a steep dirt road", "a white suv drives through deep snow"};
    s.control.token_indices = {{2}, {2}};
    s.segment_frames = 5;
    s.overlap = 2;
    s.steps = steps;
    s.height = 2;
    s.width = 2;
    s.control.kv_share_steps = {1, steps - 1};
    s.control.kv_share_layers = {2, 4};
    return s;
}

inline Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t({r, c});
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

} // namespace ditctrl::testing
