#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ditctrl/error.hpp"
#include "ditctrl/parallel.hpp"

namespace ditctrl {

using Dims = std::vector<std::size_t>;

inline std::string dims_to_string(const Dims& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

// Dense row-major tensor of doubles. A default-constructed tensor has rank 0 and no data and
// is used as an "absent" marker; every other tensor has positive extents.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Dims dims, double fill = 0.0) : dims_(std::move(dims)) {
        data_.assign(checked_size(dims_), fill);
    }

    Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
        require(checked_size(dims_) == data_.size(), ErrorKind::Shape,
                "tensor data length " + std::to_string(data_.size()) + " does not match dims " +
                    dims_to_string(dims_));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
        return Tensor({rows, cols}, std::vector<double>(values));
    }

    const Dims& dims() const noexcept { return dims_; }
    std::size_t rank() const noexcept { return dims_.size(); }
    std::size_t dim(std::size_t i) const {
        require(i < dims_.size(), ErrorKind::Shape, "axis out of range");
        return dims_[i];
    }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // rank-2 access
    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * dims_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * dims_[1] + c]; }

    std::size_t rows() const { return dim(0); }
    std::size_t cols() const { return dim(1); }

    std::span<double> row(std::size_t r) { return {data_.data() + r * dims_[1], dims_[1]}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * dims_[1], dims_[1]}; }

    Tensor reshaped(Dims dims) const {
        require(checked_size(dims) == data_.size(), ErrorKind::Shape,
                "cannot reshape " + dims_to_string(dims_) + " to " + dims_to_string(dims));
        return Tensor(std::move(dims), data_);
    }

    bool all_finite() const noexcept {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    static std::size_t checked_size(const Dims& dims) {
        std::size_t n = 1;
        for (std::size_t d : dims) {
            require(d > 0, ErrorKind::Shape, "tensor extents must be positive, got " + dims_to_string(dims));
            n *= d;
        }
        return dims.empty() ? 0 : n;
    }

    Dims dims_;
    std::vector<double> data_;
};

// Bitwise comparison (distinguishes -0.0 from 0.0 and compares NaN payloads).
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.dims() != b.dims()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        std::uint64_t x, y;
        const double av = a[i], bv = b[i];
        std::memcpy(&x, &av, sizeof x);
        std::memcpy(&y, &bv, sizeof y);
        if (x != y) return false;
    }
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.dims() == b.dims(), ErrorKind::Shape, "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

namespace detail {

inline void require_rank2(const Tensor& m, const char* op) {
    require(m.rank() == 2, ErrorKind::Shape,
            std::string(op) + ": expected a rank-2 tensor, got " + dims_to_string(m.dims()));
}

inline void require_finite(const Tensor& m, const char* op) {
    require(m.all_finite(), ErrorKind::NonFinite, std::string(op) + ": non-finite input");
}

// Softmax over the included entries of each row; excluded entries get exactly 0.
// mask == empty means every key is included.
inline Tensor softmax_impl(const Tensor& m, std::span<const std::uint8_t> mask) {
    const std::size_t rows = m.rows(), cols = m.cols();
    Tensor out({rows, cols});
    parallel_rows(rows, [&](std::size_t begin, std::size_t end) {
        for (std::size_t r = begin; r < end; ++r) {
            const auto in = m.row(r);
            auto o = out.row(r);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < cols; ++c)
                if (mask.empty() || mask[c]) mx = std::max(mx, in[c]);
            double sum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                if (mask.empty() || mask[c]) {
                    o[c] = std::exp(in[c] - mx);
                    sum += o[c];
                } else {
                    o[c] = 0.0;
                }
            }
            for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
        }
    });
    return out;
}

} // namespace detail

// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& m) {
    detail::require_rank2(m, "softmax_rows");
    detail::require_finite(m, "softmax_rows");
    return detail::softmax_impl(m, {});
}

// Row-wise softmax restricted to columns with key_mask[c] != 0. Excluded columns are exactly 0.
// An all-zero mask is rejected: it means an upstream semantic mask is broken.
inline Tensor masked_softmax_rows(const Tensor& m, std::span<const std::uint8_t> key_mask) {
    detail::require_rank2(m, "masked_softmax_rows");
    detail::require_finite(m, "masked_softmax_rows");
    require(key_mask.size() == m.cols(), ErrorKind::Shape,
            "masked_softmax_rows: mask length " + std::to_string(key_mask.size()) + " != columns " +
                std::to_string(m.cols()));
    bool any = false;
    for (auto b : key_mask) any = any || b;
    require(any, ErrorKind::DegenerateMask, "masked_softmax_rows: key mask excludes every column");
    return detail::softmax_impl(m, key_mask);
}

// C = A·B with each C[i][j] accumulated over k in ascending order. Parallel over rows of C only.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    require(a.cols() == b.rows(), ErrorKind::Shape,
            "matmul: inner dimensions disagree " + dims_to_string(a.dims()) + " x " + dims_to_string(b.dims()));
    const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
    Tensor c({n, m});
    parallel_rows(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double* crow = c.data() + i * m;
            const double* arow = a.data() + i * inner;
            for (std::size_t k = 0; k < inner; ++k) {
                const double aik = arow[k];
                const double* brow = b.data() + k * m;
                for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
            }
        }
    });
    require(c.all_finite(), ErrorKind::NonFinite, "matmul: non-finite result");
    return c;
}

// A·Bᵀ, used for attention logits. Same ascending reduction order over the shared axis.
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_transposed");
    detail::require_rank2(b, "matmul_transposed");
    require(a.cols() == b.cols(), ErrorKind::Shape,
            "matmul_transposed: inner dimensions disagree " + dims_to_string(a.dims()) + " x " +
                dims_to_string(b.dims()) + "^T");
    const std::size_t n = a.rows(), inner = a.cols(), m = b.rows();
    Tensor c({n, m});
    parallel_rows(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const double* arow = a.data() + i * inner;
            for (std::size_t j = 0; j < m; ++j) {
                const double* brow = b.data() + j * inner;
                double acc = 0.0;
                for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
                c(i, j) = acc;
            }
        }
    });
    require(c.all_finite(), ErrorKind::NonFinite, "matmul_transposed: non-finite result");
    return c;
}

inline Tensor transpose(const Tensor& m) {
    detail::require_rank2(m, "transpose");
    Tensor t({m.cols(), m.rows()});
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
    return t;
}

inline Tensor scaled(const Tensor& m, double s) {
    Tensor out = m;
    for (auto& v : out.values()) v *= s;
    return out;
}

// Rows [begin, end) of a rank-2 tensor. Returns an absent tensor for an empty range.
inline Tensor slice_rows(const Tensor& m, std::size_t begin, std::size_t end) {
    detail::require_rank2(m, "slice_rows");
    require(begin <= end && end <= m.rows(), ErrorKind::Shape, "slice_rows: range out of bounds");
    if (begin == end) return {};
    std::vector<double> data(m.data() + begin * m.cols(), m.data() + end * m.cols());
    return Tensor({end - begin, m.cols()}, std::move(data));
}

// Columns [begin, end) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& m, std::size_t begin, std::size_t end) {
    detail::require_rank2(m, "slice_cols");
    require(begin < end && end <= m.cols(), ErrorKind::Shape, "slice_cols: range out of bounds");
    Tensor out({m.rows(), end - begin});
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = m(r, c);
    return out;
}

// Sub-block rows [r0, r1) x cols [c0, c1). Empty ranges give an absent tensor.
inline Tensor block(const Tensor& m, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    detail::require_rank2(m, "block");
    require(r0 <= r1 && r1 <= m.rows() && c0 <= c1 && c1 <= m.cols(), ErrorKind::Shape, "block: out of bounds");
    if (r0 == r1 || c0 == c1) return {};
    Tensor out({r1 - r0, c1 - c0});
    for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) out(r - r0, c - c0) = m(r, c);
    return out;
}

// Stacks rank-2 tensors with equal column counts; absent parts are skipped.
inline Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
    if (top.empty()) return bottom;
    if (bottom.empty()) return top;
    require(top.cols() == bottom.cols(), ErrorKind::Shape, "concat_rows: column mismatch");
    std::vector<double> data(top.values().begin(), top.values().end());
    data.insert(data.end(), bottom.values().begin(), bottom.values().end());
    return Tensor({top.rows() + bottom.rows(), top.cols()}, std::move(data));
}

} // namespace ditctrl
