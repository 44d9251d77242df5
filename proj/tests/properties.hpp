// SPDX-License-Identifier: Apache-2.0
//
// Fixed-point property suite over pseudo-enumerated inputs. Each property
// reports how many cases it checked and how many failed.

#pragma once

#include "fxq/fixed_point.hpp"
#include "oracles.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace fxq::test {

struct PropertyResult
{
    std::string name;
    std::size_t checked = 0;
    std::size_t failures = 0;
};

// Case i of the enumeration: a dyadic value and a representation. Values
// cover exact rounding ties, exact powers of two and saturating magnitudes.
struct Case
{
    oracle::Dyadic x;
    FixedPointRepr r;
};

inline Case make_case(std::size_t i, std::mt19937_64& rng)
{
    const int bw = 1 + static_cast<int>(i % 20);
    const int f = static_cast<int>((i / 20) % 25) - 8;
    const int s = static_cast<int>(rng() % 30);
    std::int64_t k;
    switch (i % 4) {
    case 0: k = static_cast<std::int64_t>(rng() % (std::uint64_t{1} << 40)); break;
    case 1: k = static_cast<std::int64_t>(rng() % 4096); break;
    case 2: k = std::int64_t{1} << (rng() % 40); break;
    default: k = 2 * static_cast<std::int64_t>(rng() % 100000) + 1; break; // odd: ties when s = f + 1
    }
    if (rng() & 1)
        k = -k;
    return {{k, i % 4 == 3 ? f + 1 : s}, {bw, f}};
}

inline std::vector<PropertyResult> run_fixed_point_properties(std::size_t n)
{
    std::vector<PropertyResult> out;
    auto prop = [&](std::string name, auto&& check) {
        std::mt19937_64 rng(0x5eed);
        PropertyResult p{std::move(name)};
        for (std::size_t i = 0; i < n; ++i) {
            ++p.checked;
            if (!check(i, rng))
                ++p.failures;
        }
        out.push_back(p);
    };

    prop("matches integer oracle", [](std::size_t i, std::mt19937_64& rng) {
        const Case c = make_case(i, rng);
        return quantize(c.x.value(), c.r) == oracle::quantize(c.x, c.r.bw, c.r.f);
    });
    prop("boundedness", [](std::size_t i, std::mt19937_64& rng) {
        const Case c = make_case(i, rng);
        return std::abs(quantize(c.x.value(), c.r)) <= repr_range(c.r).hi;
    });
    prop("grid membership", [](std::size_t i, std::mt19937_64& rng) {
        const Case c = make_case(i, rng);
        const double code = std::ldexp(quantize(c.x.value(), c.r), c.r.f);
        return code == std::trunc(code) && std::abs(code) <= c.r.threshold();
    });
    prop("idempotence", [](std::size_t i, std::mt19937_64& rng) {
        const Case c = make_case(i, rng);
        const double q = quantize(c.x.value(), c.r);
        return quantize(q, c.r) == q;
    });
    prop("monotonicity", [](std::size_t i, std::mt19937_64& rng) {
        const Case a = make_case(i, rng);
        const Case b = make_case(i, rng);
        double x = a.x.value(), y = b.x.value();
        if (x > y)
            std::swap(x, y);
        return quantize(x, a.r) <= quantize(y, a.r);
    });
    prop("symmetry", [](std::size_t i, std::mt19937_64& rng) {
        const Case c = make_case(i, rng);
        const double q = quantize(-c.x.value(), c.r);
        return q == -quantize(c.x.value(), c.r) && !(q == 0.0 && std::signbit(q));
    });
    prop("bw=1 pruning", [](std::size_t i, std::mt19937_64& rng) {
        const Case c = make_case(i, rng);
        const double q = quantize(c.x.value(), {1, c.r.f});
        return q == 0.0 && !std::signbit(q);
    });
    prop("no-clip offset", [](std::size_t i, std::mt19937_64& rng) {
        const Case c = make_case(i, rng);
        const int bw0 = 2 + static_cast<int>(i % 24);
        // Every fourth case uses an exact power of two as the maximum.
        const double m = i % 4 == 2 ? std::ldexp(1.0, static_cast<int>(rng() % 40) - 20) : std::abs(c.x.value());
        std::vector<double> v{m, -m, m / 3.0, -m * 0.999, 0.0};
        const int f0 = no_clip_offset(bw0, m);
        return f0 == oracle::no_clip_offset(bw0, m) && clipped_count(v, {bw0, f0}) == 0;
    });
    prop("clipping monotone in bw", [](std::size_t i, std::mt19937_64& rng) {
        std::vector<double> v;
        for (int j = 0; j < 8; ++j)
            v.push_back(make_case(i + j, rng).x.value());
        const int f = static_cast<int>(i % 25) - 8;
        std::size_t prev = clipped_count(v, {1, f});
        for (int bw = 2; bw <= 24; ++bw) {
            const std::size_t c = clipped_count(v, {bw, f});
            if (c > prev)
                return false;
            prev = c;
        }
        return true;
    });
    return out;
}

} // namespace fxq::test
