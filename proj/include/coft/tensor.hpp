#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "coft/common.hpp"

namespace coft {

enum class DType { F32, F64 };

inline const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

// Dense row-major tensor. Shape is immutable after construction;
// product(shape) always equals data.size().
template <typename R>
struct TensorT {
    using value_type = R;

    std::vector<int64_t> shape;
    std::vector<R> data;

    TensorT() = default;

    explicit TensorT(std::vector<int64_t> shp) : shape(std::move(shp)) {
        data.assign(size_t(numel_of(shape)), R(0));
    }

    TensorT(std::vector<int64_t> shp, std::vector<R> values) : shape(std::move(shp)), data(std::move(values)) {
        if (numel_of(shape) != int64_t(data.size()))
            throw ShapeMismatch("tensor data length " + std::to_string(data.size()) +
                                " does not match shape (" + shape_str() + ")");
    }

    static constexpr DType dtype() { return sizeof(R) == 4 ? DType::F32 : DType::F64; }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d <= 0) throw ShapeMismatch("nonpositive dimension " + std::to_string(d));
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int ndim() const { return int(shape.size()); }

    int64_t rows() const { return shape.size() == 2 ? shape[0] : throw_dim_(); }
    int64_t cols() const { return shape.size() == 2 ? shape[1] : throw_dim_(); }

    R& at(int64_t i, int64_t j) { return data[size_t(i * shape[1] + j)]; }
    R at(int64_t i, int64_t j) const { return data[size_t(i * shape[1] + j)]; }

    R* row_ptr(int64_t i) { return data.data() + i * shape.back(); }
    const R* row_ptr(int64_t i) const { return data.data() + i * shape.back(); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s;
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s;
    }

    template <typename R2>
    TensorT<R2> cast() const {
        TensorT<R2> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = R2(data[i]);
        return out;
    }

private:
    int64_t throw_dim_() const { throw DimMismatch("expected 2-d tensor, got " + shape_str()); }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename R>
TensorT<R> full_like(const TensorT<R>& t, R v) {
    TensorT<R> out(t.shape);
    std::fill(out.data.begin(), out.data.end(), v);
    return out;
}

} // namespace coft
