#include "scenestreamer/state_codec.hpp"

#include <algorithm>
#include <cmath>

#include "scenestreamer/errors.hpp"

namespace scenestreamer {

std::string_view to_string(RsField f) {
    static constexpr std::array<std::string_view, kNumRsFields> kNames{
        "length", "width", "height", "u", "v", "dpsi", "vx", "vy"};
    return kNames[static_cast<std::size_t>(f)];
}

void QuantizerConfig::validate() const {
    if (bins < 2) throw ConfigError("quantizer bins must be >= 2");
    for (int k = 0; k < kNumRsFields; ++k) {
        const auto& r = ranges[static_cast<std::size_t>(k)];
        if (!(r.lo < r.hi))
            throw ConfigError("quantizer range for " + std::string(to_string(static_cast<RsField>(k))) +
                              " must satisfy lo < hi");
    }
}

int quantize(double value, double lo, double hi, int n) {
    if (!(lo < hi) || n < 2) throw ConfigError("quantize: need lo < hi and n >= 2");
    const double v = std::clamp(value, lo, hi);
    const double t = (v - lo) / (hi - lo) * (n - 1);
    const int bin = static_cast<int>(std::ceil(t - 0.5));
    return std::clamp(bin, 0, n - 1);
}

double dequantize(int bin, double lo, double hi, int n) {
    if (!(lo < hi) || n < 2) throw ConfigError("dequantize: need lo < hi and n >= 2");
    bin = std::clamp(bin, 0, n - 1);
    return lo + bin * (hi - lo) / (n - 1);
}

namespace {

RelativeState encode(const GlobalAgentState& s, const MapSegment& segment,
                     const QuantizerConfig& cfg, bool clamp_values) {
    const double c = std::cos(segment.heading);
    const double sn = std::sin(segment.heading);
    const double dx = s.x - segment.center.x;
    const double dy = s.y - segment.center.y;
    RelativeState r;
    r.values = {s.shape.length,
                s.shape.width,
                s.shape.height,
                c * dx + sn * dy,
                -sn * dx + c * dy,
                wrap_angle(s.psi - segment.heading),
                c * s.vx + sn * s.vy,
                -sn * s.vx + c * s.vy};
    for (int k = 0; k < kNumRsFields; ++k) {
        const auto& range = cfg.ranges[static_cast<std::size_t>(k)];
        double& v = r.values[static_cast<std::size_t>(k)];
        if (v < range.lo || v > range.hi) {
            r.clamped = true;
            if (clamp_values) v = std::clamp(v, range.lo, range.hi);
        }
        r.bins[static_cast<std::size_t>(k)] = quantize(v, range.lo, range.hi, cfg.bins);
    }
    return r;
}

}  // namespace

RelativeState encode_relative(const GlobalAgentState& s, const MapSegment& segment,
                              const QuantizerConfig& cfg) {
    return encode(s, segment, cfg, true);
}

RelativeState encode_relative_unclamped(const GlobalAgentState& s, const MapSegment& segment,
                                        const QuantizerConfig& cfg) {
    return encode(s, segment, cfg, false);
}

RelativeState from_bins(const std::array<int, kNumRsFields>& bins, const QuantizerConfig& cfg) {
    RelativeState r;
    r.bins = bins;
    for (int k = 0; k < kNumRsFields; ++k) {
        const auto& range = cfg.ranges[static_cast<std::size_t>(k)];
        r.values[static_cast<std::size_t>(k)] =
            dequantize(bins[static_cast<std::size_t>(k)], range.lo, range.hi, cfg.bins);
    }
    return r;
}

GlobalAgentState decode_global(const RelativeState& r, const MapSegment& segment) {
    const double c = std::cos(segment.heading);
    const double s = std::sin(segment.heading);
    const double u = r[RsField::kU];
    const double v = r[RsField::kV];
    const double vx = r[RsField::kVx];
    const double vy = r[RsField::kVy];
    GlobalAgentState g;
    g.x = segment.center.x + u * c - v * s;
    g.y = segment.center.y + u * s + v * c;
    g.psi = wrap_angle(segment.heading + r[RsField::kDeltaPsi]);
    g.vx = vx * c - vy * s;
    g.vy = vx * s + vy * c;
    g.shape = {r[RsField::kLength], r[RsField::kWidth], r[RsField::kHeight]};
    return g;
}

}  // namespace scenestreamer
