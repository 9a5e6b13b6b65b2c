#pragma once

// Counter-based normal variates: Philox4x32-10 keyed by the seed, with the
// counter built from (path, step, axis pair). Any draw can be regenerated
// independently of the order in which paths are simulated.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace qfbsde {

class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;

    explicit Philox4x32(std::uint64_t seed) noexcept
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

    Counter operator()(Counter ctr) const noexcept {
        auto key = key_;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
            ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
                   static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
            key[0] += kW0;
            key[1] += kW1;
        }
        return ctr;
    }

private:
    static constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
    std::array<std::uint32_t, 2> key_;
};

/// Uniform in (0, 1) from 64 random bits.
inline double to_unit_open(std::uint32_t hi, std::uint32_t lo) noexcept {
    const std::uint64_t bits = (std::uint64_t{hi} << 32) | lo;
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal for (path, step, axis) via Box-Muller on one Philox block.
inline double normal_variate(const Philox4x32& gen, std::uint64_t path, std::uint64_t step, std::uint32_t axis) noexcept {
    const auto out = gen({static_cast<std::uint32_t>(path), static_cast<std::uint32_t>(path >> 32),
                          static_cast<std::uint32_t>(step), axis / 2});
    const double u1 = to_unit_open(out[0], out[1]);
    const double u2 = to_unit_open(out[2], out[3]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return axis % 2 == 0 ? r * std::cos(angle) : r * std::sin(angle);
}

}  // namespace qfbsde
