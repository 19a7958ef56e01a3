#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmix {

// Ordered list of positive extents. Rank 0 denotes a scalar (one element).
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) { validate(); }
    explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) { validate(); }

    int rank() const { return static_cast<int>(dims_.size()); }
    std::int64_t operator[](int axis) const { return dims_.at(static_cast<std::size_t>(axis)); }
    const std::vector<std::int64_t>& dims() const { return dims_; }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (std::int64_t d : dims_) n *= d;
        return n;
    }

    bool operator==(const Shape& other) const = default;

    std::string str() const {
        if (dims_.empty()) return "scalar";
        std::string s;
        for (std::size_t i = 0; i < dims_.size(); ++i) {
            if (i) s += 'x';
            s += std::to_string(dims_[i]);
        }
        return s;
    }

private:
    void validate() const {
        std::int64_t n = 1;
        for (std::int64_t d : dims_) {
            if (d < 1) throw std::invalid_argument("Shape: extents must be >= 1, got " + std::to_string(d));
            if (n > std::numeric_limits<std::int64_t>::max() / d)
                throw std::invalid_argument("Shape: element count overflows");
            n *= d;
        }
    }

    std::vector<std::int64_t> dims_;
};

}  // namespace cmix
