#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ditctrl/error.hpp"
#include "ditctrl/rng.hpp"

namespace ditctrl {

// Per-frame embeddings, L2-normalized on construction so adjacent dot products are cosines.
class EmbeddingTrajectory {
public:
    EmbeddingTrajectory() = default;

    explicit EmbeddingTrajectory(std::vector<std::vector<double>> frames, std::string source = {})
        : source_(std::move(source)) {
        require(!frames.empty() && !frames.front().empty(), ErrorKind::Invalid,
                "EmbeddingTrajectory: embedding dimension must be positive");
        const std::size_t d = frames.front().size();
        for (std::size_t i = 0; i < frames.size(); ++i) {
            auto& x = frames[i];
            require(x.size() == d, ErrorKind::Shape,
                    "EmbeddingTrajectory: frame " + std::to_string(i) + " has dimension " + std::to_string(x.size()) +
                        ", expected " + std::to_string(d));
            double sq = 0.0;
            for (double v : x) {
                require(std::isfinite(v), ErrorKind::NonFinite, "EmbeddingTrajectory: non-finite value in frame " + std::to_string(i));
                sq += v * v;
            }
            require(sq > 0.0, ErrorKind::Invalid, "EmbeddingTrajectory: frame " + std::to_string(i) + " is the zero vector");
            const double norm = std::sqrt(sq);
            for (double& v : x) v /= norm;
        }
        frames_ = std::move(frames);
    }

    std::size_t size() const { return frames_.size(); }
    std::size_t dim() const { return frames_.empty() ? 0 : frames_.front().size(); }
    const std::vector<double>& operator[](std::size_t i) const { return frames_[i]; }
    const std::vector<std::vector<double>>& frames() const { return frames_; }
    const std::string& source() const { return source_; }

private:
    std::vector<std::vector<double>> frames_;
    std::string source_;
};

// s_i = x_iᵀ x_{i+1} with mean and population standard deviation.
struct SimilaritySeries {
    std::vector<double> s;
    double mean = 0.0;
    double stddev = 0.0;

    double cv() const { return stddev / mean; }
};

inline SimilaritySeries series_from(std::vector<double> s) {
    require(!s.empty(), ErrorKind::Invalid, "similarity series is empty");
    SimilaritySeries out;
    double sum = 0.0;
    for (double v : s) sum += v;
    out.mean = sum / static_cast<double>(s.size());
    // A constant series has zero spread exactly, regardless of rounding in the sum.
    if (std::all_of(s.begin(), s.end(), [&](double v) { return v == s.front(); })) out.mean = s.front();
    double var = 0.0;
    for (double v : s) var += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(var / static_cast<double>(s.size()));
    out.s = std::move(s);
    return out;
}

inline SimilaritySeries adjacent_similarity(const EmbeddingTrajectory& traj) {
    require(traj.size() >= 2, ErrorKind::Invalid,
            "adjacent_similarity: need at least 2 frames, got " + std::to_string(traj.size()));
    std::vector<double> s(traj.size() - 1);
    for (std::size_t i = 0; i + 1 < traj.size(); ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < traj.dim(); ++k) dot += traj[i][k] * traj[i + 1][k];
        s[i] = dot;
    }
    return series_from(std::move(s));
}

inline constexpr double kDefaultCscvLambda = 10.0;

// score = 1 / (1 + lambda * sigma / mu)
inline double cscv(const SimilaritySeries& series, double lambda = kDefaultCscvLambda) {
    require(lambda >= 0.0, ErrorKind::Invalid, "cscv: lambda must be non-negative");
    require(series.mean > 0.0, ErrorKind::Metric, "non-positive mean similarity; CSCV undefined");
    return 1.0 / (1.0 + lambda * series.stddev / series.mean);
}

inline double cscv(const EmbeddingTrajectory& traj, double lambda = kDefaultCscvLambda) {
    return cscv(adjacent_similarity(traj), lambda);
}

enum class TrajectoryKind { Smooth, TwoCluster };

struct TrajectoryOptions {
    std::size_t dim = 8;
    double jitter = 0.05;
    double arc = std::numbers::pi / 2; // total angle swept by a smooth trajectory
};

namespace detail {

// Two orthonormal directions from seeded Gaussian draws (Gram-Schmidt).
inline std::pair<std::vector<double>, std::vector<double>> orthonormal_pair(Rng& rng, std::size_t d) {
    require(d >= 2, ErrorKind::Invalid, "synthetic trajectories need dimension >= 2");
    std::vector<double> a(d), b(d);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    auto normalize = [](std::vector<double>& x) {
        double sq = 0.0;
        for (double v : x) sq += v * v;
        const double n = std::sqrt(sq);
        for (double& v : x) v /= n;
    };
    normalize(a);
    double proj = 0.0;
    for (std::size_t k = 0; k < d; ++k) proj += a[k] * b[k];
    for (std::size_t k = 0; k < d; ++k) b[k] -= proj * a[k];
    normalize(b);
    return {a, b};
}

} // namespace detail

// smooth:      points evenly spaced along a great-circle arc, plus seeded jitter.
// two_cluster: first m/2 points at one direction, the rest at an orthogonal one, plus jitter.
inline EmbeddingTrajectory synthetic_trajectory(TrajectoryKind kind, std::size_t m, std::uint64_t seed,
                                                const TrajectoryOptions& opt = {}) {
    require(m >= 4, ErrorKind::Invalid, "synthetic_trajectory: need at least 4 frames");
    Rng rng(mix_seed(seed, kind == TrajectoryKind::Smooth ? 11 : 12));
    const auto [e1, e2] = detail::orthonormal_pair(rng, opt.dim);
    std::vector<std::vector<double>> frames(m, std::vector<double>(opt.dim));
    for (std::size_t i = 0; i < m; ++i) {
        double c1, c2;
        if (kind == TrajectoryKind::Smooth) {
            const double theta = opt.arc * static_cast<double>(i) / static_cast<double>(m - 1);
            c1 = std::cos(theta);
            c2 = std::sin(theta);
        } else {
            const bool second = i >= m / 2;
            c1 = second ? 0.0 : 1.0;
            c2 = second ? 1.0 : 0.0;
        }
        for (std::size_t k = 0; k < opt.dim; ++k) frames[i][k] = c1 * e1[k] + c2 * e2[k];
        if (opt.jitter > 0.0)
            for (auto& v : frames[i]) v += opt.jitter * rng.normal();
    }
    return EmbeddingTrajectory(std::move(frames), kind == TrajectoryKind::Smooth ? "synthetic:smooth" : "synthetic:two_cluster");
}

// ---------------------------------------------------------------------------------------------
// CSV: header "frame,v0,...,v{d-1}", one row per frame, 17 significant digits.
// ---------------------------------------------------------------------------------------------

inline std::string trajectory_csv(const EmbeddingTrajectory& traj) {
    require(traj.dim() > 0, ErrorKind::Invalid, "export_trajectory: embedding dimension must be positive");
    std::string out = "frame";
    for (std::size_t k = 0; k < traj.dim(); ++k) out += ",v" + std::to_string(k);
    out += "\n";
    char buf[40];
    for (std::size_t i = 0; i < traj.size(); ++i) {
        out += std::to_string(i);
        for (double v : traj[i]) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

inline void export_trajectory(const std::filesystem::path& path, const EmbeddingTrajectory& traj) {
    const std::string text = trajectory_csv(traj);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out << text;
    require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

// Raw (un-normalized) rows of an embedding CSV. Rejects bad headers and ragged rows.
inline std::vector<std::vector<double>> parse_embedding_csv(std::istream& in, const std::string& name = "<csv>") {
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorKind::Io, name + ": empty embedding file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    require(header.size() >= 2 && header[0] == "frame", ErrorKind::Io,
            name + ": header must be frame,v0,...,v{d-1}");
    for (std::size_t k = 1; k < header.size(); ++k)
        require(header[k] == "v" + std::to_string(k - 1), ErrorKind::Io,
                name + ": header column " + std::to_string(k) + " should be v" + std::to_string(k - 1));
    const std::size_t d = header.size() - 1;
    std::vector<std::vector<double>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            if (first) {
                first = false;
                continue;
            }
            try {
                std::size_t used = 0;
                row.push_back(std::stod(cell, &used));
                require(used == cell.size(), ErrorKind::Io, name + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
            } catch (const std::logic_error&) {
                fail(ErrorKind::Io, name + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
            }
        }
        require(row.size() == d, ErrorKind::Io,
                name + ":" + std::to_string(lineno) + ": expected " + std::to_string(d) + " values, got " +
                    std::to_string(row.size()));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline EmbeddingTrajectory import_trajectory(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
    return EmbeddingTrajectory(parse_embedding_csv(in, path.string()), path.string());
}

} // namespace ditctrl
