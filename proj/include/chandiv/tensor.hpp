#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace chandiv {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array. Plain value type; gradients live on Tensor.
template <typename T>
class Array {
   public:
    Array() = default;

    explicit Array(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(shape_numel(shape_), fill);
    }

    Array(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
        check_extents();
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("array of shape " + shape_str(shape_) + " cannot hold " +
                                 std::to_string(data_.size()) + " values");
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return shape_.empty(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size()) {
            throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
        }
        return shape_[axis];
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    template <typename... I>
    T& at(I... idx) {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }
    template <typename... I>
    const T& at(I... idx) const {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Array reshaped(Shape shape) const {
        return Array(std::move(shape), data_);
    }

    template <typename U>
    Array<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Array<U>(shape_, std::move(out));
    }

    bool operator==(const Array& other) const = default;

   private:
    void check_extents() const {
        for (auto e : shape_) {
            if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape_));
        }
    }

    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) {
            throw DimensionError("index rank " + std::to_string(idx.size()) + " does not match shape " +
                                 shape_str(shape_));
        }
        std::size_t off = 0;
        std::size_t axis = 0;
        for (auto i : idx) {
            if (i >= shape_[axis]) throw DimensionError("index out of range for shape " + shape_str(shape_));
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

}  // namespace chandiv
