// SPDX-License-Identifier: Apache-2.0
//
// Signed sign-magnitude fixed-point numbers simulated on doubles.
//
// A representation (bw, f) spends one bit on the sign and bw - 1 bits on the
// magnitude; f places the radix point so that one LSB is worth 2^-f. f may be
// negative (LSB > 1) or exceed bw (all bits fractional). bw = 1 leaves only
// the sign bit, which can hold nothing but zero.
//
// Values are carried as the doubles they represent. For bw <= 53 every grid
// point is exactly representable, so quantize() is exact.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fxq {

inline constexpr int kMinBitwidth = 1;
inline constexpr int kMaxBitwidth = 53;

struct FixedPointRepr
{
    int bw = 1;
    int f = 0;

    friend constexpr bool operator==(const FixedPointRepr&, const FixedPointRepr&) = default;
    friend constexpr auto operator<=>(const FixedPointRepr&, const FixedPointRepr&) = default;

    constexpr bool valid() const noexcept { return bw >= kMinBitwidth && bw <= kMaxBitwidth; }

    // Largest integer code magnitude, 2^(bw-1) - 1; zero for the sign-only case.
    double threshold() const noexcept { return bw <= 1 ? 0.0 : std::ldexp(1.0, bw - 1) - 1.0; }

    double lsb() const noexcept { return std::ldexp(1.0, -f); }

    // Place value of the (virtual) bit just above the magnitude bits.
    double msb_value() const noexcept { return std::ldexp(1.0, bw - 1 - f); }

    double max_magnitude() const noexcept { return std::ldexp(threshold(), -f); }

    std::string str() const { return "(" + std::to_string(bw) + ", " + std::to_string(f) + ")"; }
};

inline void require_valid(const FixedPointRepr& r)
{
    if (!r.valid())
        throw std::invalid_argument("fixed-point bitwidth out of range [1, 53]: " + r.str());
}

constexpr double clip(double x, double a, double b) noexcept
{
    if (x <= a)
        return a;
    if (x >= b)
        return b;
    return x;
}

namespace detail {

// Rounded integer code before saturation. std::round breaks ties away from zero.
inline double code(double x, int f) noexcept { return std::round(std::ldexp(x, f)); }

// Unchecked kernel shared by the scalar and tensor paths.
inline double quantize_unchecked(double x, int f, double t) noexcept
{
    const double q = clip(code(x, f), -t, t);
    // + 0.0 folds -0 into +0
    return std::ldexp(q, -f) + 0.0;
}

} // namespace detail

inline double quantize(double x, const FixedPointRepr& r)
{
    require_valid(r);
    if (!std::isfinite(x))
        throw std::domain_error("quantize: non-finite input");
    return detail::quantize_unchecked(x, r.f, r.threshold());
}

inline void quantize_in_place(std::span<double> values, const FixedPointRepr& r)
{
    require_valid(r);
    const double t = r.threshold();
    const double up = std::ldexp(1.0, r.f), down = std::ldexp(1.0, -r.f);
    // Multiplying by a normal power of two rounds exactly like ldexp.
    const bool fast = std::isnormal(up) && std::isnormal(down);
    for (double& v : values) {
        if (!std::isfinite(v))
            throw std::domain_error("quantize: non-finite input");
        v = fast ? clip(std::round(v * up), -t, t) * down + 0.0 : detail::quantize_unchecked(v, r.f, t);
    }
}

inline std::vector<double> quantize_tensor(std::span<const double> values, const FixedPointRepr& r)
{
    std::vector<double> out(values.begin(), values.end());
    quantize_in_place(out, r);
    return out;
}

struct Range
{
    double lo;
    double hi;
};

inline Range repr_range(const FixedPointRepr& r)
{
    require_valid(r);
    const double m = r.max_magnitude();
    return {-m, m};
}

// Number of values whose rounded code exceeds the representable magnitude.
inline std::size_t clipped_count(std::span<const double> values, const FixedPointRepr& r)
{
    require_valid(r);
    const double t = r.threshold();
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [&](double x) {
        return std::abs(detail::code(x, r.f)) > t;
    }));
}

// Fractional offset that keeps every |x| <= max_abs unclipped at bitwidth bw0:
// F0 = bw0 - 1 - I with I the integer bits needed by max_abs. I is ceil(log2)
// plus one for exact powers of two (frexp's exponent gives both at once), and
// one more if rounding would still push max_abs onto 2^(bw0-1).
inline int no_clip_offset(int bw0, double max_abs)
{
    if (bw0 < 2 || bw0 > kMaxBitwidth)
        throw std::invalid_argument("no_clip_offset: bw0 must be in [2, 53]");
    if (!(max_abs >= 0.0) || !std::isfinite(max_abs))
        throw std::invalid_argument("no_clip_offset: max_abs must be finite and >= 0");
    if (max_abs == 0.0)
        return bw0 - 1;
    int integer_bits = 0;
    std::frexp(max_abs, &integer_bits);
    int f = bw0 - 1 - integer_bits;
    const FixedPointRepr r{bw0, f};
    if (detail::code(max_abs, f) > r.threshold())
        --f;
    return f;
}

inline double max_abs(std::span<const double> values) noexcept
{
    double m = 0.0;
    for (double v : values)
        m = std::max(m, std::abs(v));
    return m;
}

} // namespace fxq
