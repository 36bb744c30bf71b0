#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitdec {

using NodeId = int64_t;
constexpr NodeId kNoNode = -1;

/// Dense row-major float32 array. `node` points back into the tape that
/// produced it (kNoNode for plain values).
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;
    NodeId node = kNoNode;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0f) {}
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<size_t>(numel_of(shape)) != data.size())
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape.at(i); }
    int ndim() const { return static_cast<int>(shape.size()); }

    // 2-D accessors; most tape tensors are (rows, cols).
    int rows() const { return shape.size() == 2 ? shape[0] : (shape.size() == 1 ? 1 : throw_rank()); }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : throw_rank()); }
    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static std::string shape_str(const std::vector<int>& s) {
        std::string out = "(";
        for (size_t i = 0; i < s.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(s[i]);
        }
        return out + ")";
    }
    std::string shape_str() const { return shape_str(shape); }

private:
    [[noreturn]] static int throw_rank() { throw std::invalid_argument("tensor: expected rank <= 2 here"); }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

inline bool all_finite(const Tensor& t) {
    for (float v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

inline double l2_norm(const Tensor& t) {
    double s = 0.0;
    for (float v : t.data) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

inline double l2_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("l2_diff: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        s += d * d;
    }
    return std::sqrt(s);
}

/// In-place accumulate, fixed ascending-index order.
inline void add_into(Tensor& acc, const Tensor& t) {
    if (!acc.same_shape(t)) throw std::invalid_argument("add_into: shape mismatch");
    for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += t.data[i];
}

} // namespace vitdec
