// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fxq {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i)
        out += (i ? ", " : "") + std::to_string(s[i]);
    return out + "]";
}

/// Dense row-major tensor of doubles.
class Tensor
{
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
    {
        if (element_count(shape_) != data_.size())
            throw std::invalid_argument("tensor: shape " + to_string(shape_) + " does not match " +
                                        std::to_string(data_.size()) + " elements");
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const noexcept { return shape_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // Same data, new shape of equal element count.
    void reshape(Shape s)
    {
        if (element_count(s) != data_.size())
            throw std::invalid_argument("tensor: cannot reshape " + to_string(shape_) + " to " + to_string(s));
        shape_ = std::move(s);
    }

    bool all_finite() const noexcept
    {
        for (double v : data_)
            if (!std::isfinite(v))
                return false;
        return true;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

} // namespace fxq
