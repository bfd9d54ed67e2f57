#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <iosfwd>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include "phenokit/common.hpp"

namespace phenokit {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr Dtype dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
}

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape);

// Dense row-major tensor. A plain value type: no view aliasing, no implicit
// broadcasting. Rank 0 is a scalar with one element.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0))
        : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {
        validate_shape();
    }

    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        validate_shape();
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw InvariantError("tensor: data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }

    static Tensor scalar(T v) { return Tensor({}, std::vector<T>{v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    template <typename... Ix>
    T& operator()(Ix... idx) {
        return data[static_cast<std::size_t>(flat_index(idx...))];
    }
    template <typename... Ix>
    const T& operator()(Ix... idx) const {
        return data[static_cast<std::size_t>(flat_index(idx...))];
    }

    template <typename... Ix>
    std::int64_t flat_index(Ix... idx) const {
        const std::int64_t ix[] = {static_cast<std::int64_t>(idx)...};
        const int n = sizeof...(Ix);
        std::int64_t flat = 0;
        for (int k = 0; k < n; ++k) flat = flat * shape[static_cast<std::size_t>(k)] + ix[k];
        return flat;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out[i] = static_cast<U>(data[i]);
        return Tensor<U>(shape, std::move(out));
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

  private:
    void validate_shape() const {
        for (auto d : shape)
            if (d <= 0) throw InvariantError("tensor: non-positive dim in shape " + shape_str(shape));
    }
};

template <typename T>
void check_finite(const Tensor<T>& t, const char* what) {
    for (const T v : t.data)
        if (!std::isfinite(v))
            throw InvariantError(std::string("non-finite value produced by '") + what + "'");
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        T x = a[i], y = b[i];
        if (std::memcmp(&x, &y, sizeof(T)) != 0) return false;
    }
    return true;
}

// "PTNS1" binary layout: magic (5 bytes), u8 dtype code (0=f32, 1=f64),
// u8 rank, rank x u32 little-endian dims, row-major little-endian scalars.
template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t);

template <typename T>
Tensor<T> read_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load_tensor(const std::string& path);

}  // namespace phenokit
