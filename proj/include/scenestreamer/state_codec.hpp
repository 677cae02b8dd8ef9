#pragma once

#include <array>
#include <string_view>

#include "scenestreamer/map_codec.hpp"
#include "scenestreamer/scenario.hpp"

namespace scenestreamer {

/// Relative-state fields in generation order.
enum class RsField : int { kLength = 0, kWidth, kHeight, kU, kV, kDeltaPsi, kVx, kVy };
inline constexpr int kNumRsFields = 8;
std::string_view to_string(RsField f);

struct FieldRange {
    double lo = 0.0;
    double hi = 1.0;
};

/// Per-field quantizer ranges and bin count.
struct QuantizerConfig {
    std::array<FieldRange, kNumRsFields> ranges{{
        {0.5, 10.0},          // length
        {0.5, 3.0},           // width
        {0.5, 4.0},           // height
        {-10.0, 10.0},        // u
        {-10.0, 10.0},        // v
        {-kPi / 2, kPi / 2},  // delta psi
        {0.0, 30.0},          // vx
        {-10.0, 10.0},        // vy
    }};
    int bins = 81;

    /// Throws ConfigError if any range is empty or bins < 2.
    void validate() const;
};

/// Nearest of `n` centers linearly spaced on [lo, hi] (inclusive); values are
/// clamped first and exact midpoints go to the lower bin.
int quantize(double value, double lo, double hi, int n = 81);
double dequantize(int bin, double lo, double hi, int n = 81);

/// Global agent state with shape, the input of the relative encoder.
struct GlobalAgentState {
    double x = 0.0;
    double y = 0.0;
    double psi = 0.0;
    double vx = 0.0;
    double vy = 0.0;
    AgentShape shape;
};

struct RelativeState {
    std::array<double, kNumRsFields> values{};  // l, w, h, u, v, dpsi, vx, vy
    std::array<int, kNumRsFields> bins{};
    bool clamped = false;

    double operator[](RsField f) const { return values[static_cast<std::size_t>(f)]; }
};

/// Expresses `s` in the frame of `segment` (center, heading) and quantizes.
/// Out-of-range fields are clamped and `clamped` is set.
RelativeState encode_relative(const GlobalAgentState& s, const MapSegment& segment,
                              const QuantizerConfig& cfg = {});

/// Same, without clamping the continuous values (bins are still clamped).
RelativeState encode_relative_unclamped(const GlobalAgentState& s, const MapSegment& segment,
                                        const QuantizerConfig& cfg = {});

/// Relative state whose continuous values are the bin centers of `bins`.
RelativeState from_bins(const std::array<int, kNumRsFields>& bins, const QuantizerConfig& cfg = {});

/// Maps the relative state back to a global pose and velocity.
GlobalAgentState decode_global(const RelativeState& r, const MapSegment& segment);

}  // namespace scenestreamer
