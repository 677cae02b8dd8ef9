#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace scenestreamer {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double a) {
    double w = a - kTwoPi * std::floor((a + kPi) / kTwoPi);
    if (w >= kPi) w -= kTwoPi;
    if (w < -kPi) w += kTwoPi;
    return w;
}

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Vec2&, const Vec2&) = default;
};

struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    friend bool operator==(const Vec3&, const Vec3&) = default;
};

struct Pose2 {
    double x = 0.0;
    double y = 0.0;
    double psi = 0.0;

    friend bool operator==(const Pose2&, const Pose2&) = default;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Rotates `v` by angle `a` (counter-clockwise).
inline Vec2 rotate(Vec2 v, double a) {
    const double c = std::cos(a);
    const double s = std::sin(a);
    return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Oriented rectangle given by its center pose and full extents.
struct OrientedBox {
    Pose2 pose;
    double length = 0.0;
    double width = 0.0;
};

/// Corners ordered front-left, front-right, rear-right, rear-left.
inline std::array<Vec2, 4> corners(const OrientedBox& b) {
    const double c = std::cos(b.pose.psi);
    const double s = std::sin(b.pose.psi);
    const double hl = 0.5 * b.length;
    const double hw = 0.5 * b.width;
    const std::array<Vec2, 4> local{{{hl, hw}, {hl, -hw}, {-hl, -hw}, {-hl, hw}}};
    std::array<Vec2, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) {
        out[i] = {b.pose.x + c * local[i].x - s * local[i].y,
                  b.pose.y + s * local[i].x + c * local[i].y};
    }
    return out;
}

/// Separating-axis test. Boxes that only touch along an edge or corner do not
/// overlap; `tolerance` absorbs round-off on shared edges.
inline bool boxes_overlap(const OrientedBox& a, const OrientedBox& b, double tolerance = 1e-9) {
    const auto ca = corners(a);
    const auto cb = corners(b);
    const std::array<double, 4> axes_angle{a.pose.psi, a.pose.psi + kPi / 2, b.pose.psi,
                                           b.pose.psi + kPi / 2};
    for (double ang : axes_angle) {
        const Vec2 axis{std::cos(ang), std::sin(ang)};
        double amin = INFINITY, amax = -INFINITY, bmin = INFINITY, bmax = -INFINITY;
        for (const auto& p : ca) {
            const double d = p.x * axis.x + p.y * axis.y;
            amin = std::min(amin, d);
            amax = std::max(amax, d);
        }
        for (const auto& p : cb) {
            const double d = p.x * axis.x + p.y * axis.y;
            bmin = std::min(bmin, d);
            bmax = std::max(bmax, d);
        }
        if (!(amin < bmax - tolerance && bmin < amax - tolerance)) return false;
    }
    return true;
}

}  // namespace scenestreamer
