#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace polyssm {

using Shape = std::vector<std::size_t>;

enum class DType { f32, f64 };

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "tensors hold float or double");
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

std::string to_string(DType dtype);
DType parse_dtype(const std::string& name);

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN or Inf produced by a public operation, or an argument outside an
/// operation's numeric domain.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

std::string to_string(const Shape& shape);

/// Resolves a possibly negative axis against `rank`.
std::size_t normalize_axis(long axis, std::size_t rank);

/// Dense row-major array. Rank 0 (empty shape) is a scalar.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() : shape_{}, data_(1, T{0}) {}

    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(polyssm::numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (polyssm::numel(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + to_string(shape_));
        }
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    static Tensor from(std::initializer_list<T> values) {
        return Tensor(Shape{values.size()}, std::vector<T>(values));
    }

    static Tensor from(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<T> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(long axis) const { return shape_[normalize_axis(axis, rank())]; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
    const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

    T item() const {
        if (data_.size() != 1) {
            throw DimensionError("item() on tensor of shape " + to_string(shape_));
        }
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (polyssm::numel(shape) != numel()) {
            throw DimensionError("cannot reshape " + to_string(shape_) + " to " +
                                 to_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        // exponent bits all set means Inf or NaN; integer form vectorizes
        using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        constexpr Bits mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
        Bits bad = 0;
        for (T v : data_) {
            Bits b;
            std::memcpy(&b, &v, sizeof b);
            bad |= Bits((b & mask) == mask);
        }
        return bad == 0;
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

private:
    std::size_t offset(std::initializer_list<std::size_t> index) const {
        if (index.size() != shape_.size()) {
            throw DimensionError("index rank " + std::to_string(index.size()) +
                                 " for tensor of shape " + to_string(shape_));
        }
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : index) {
            if (i >= shape_[axis]) {
                throw DimensionError("index " + std::to_string(i) + " out of range on axis " +
                                     std::to_string(axis) + " of " + to_string(shape_));
            }
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

/// Largest elementwise |a - b|. Shapes must agree.
template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff shapes " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
    T m{0};
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace polyssm
