#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <vector>

#include "phenocd/common.hpp"

namespace phenocd::nn {

// Dense row-major tensor, rank 1..4. float for training, double for the
// 64-bit verification mode; int for label maps.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
        validate_shape(shape);
        data.assign(static_cast<size_t>(count(shape)), fill);
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s), T(0)); }
    static Tensor full(std::vector<int> s, T v) { return Tensor(std::move(s), v); }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int e : s) n *= e;
        return n;
    }

    static void validate_shape(const std::vector<int>& s) {
        if (s.empty() || s.size() > 4)
            throw ShapeError("tensor rank must be 1..4, got rank " + std::to_string(s.size()));
        for (int e : s)
            if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + to_string(s));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    T& at4(int n, int c, int h, int w) {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const T& at4(int n, int c, int h, int w) const {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    static std::string to_string(const std::vector<int>& s) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << "]";
        return os.str();
    }
    std::string shape_str() const { return to_string(shape); }
};

template <typename T>
inline void require_shape(const char* op, const Tensor<T>& t, const std::vector<int>& want) {
    if (t.shape != want)
        throw ShapeError(std::string(op) + ": expected shape " + Tensor<T>::to_string(want) +
                         ", got " + t.shape_str());
}

}  // namespace phenocd::nn
