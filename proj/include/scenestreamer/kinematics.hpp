#pragma once

#include <array>
#include <optional>
#include <vector>

#include "scenestreamer/geometry.hpp"
#include "scenestreamer/scenario.hpp"

namespace scenestreamer {

struct KinState {
    double x = 0.0;
    double y = 0.0;
    double psi = 0.0;
    double v = 0.0;

    Pose2 pose() const { return {x, y, psi}; }
    friend bool operator==(const KinState&, const KinState&) = default;
};

/// Kinematic state of a sampled agent state: signed speed is the velocity
/// projected on the heading.
KinState kin_state_from(const AgentState& s);

/// First-order bicycle update. Heading and speed are advanced first and the
/// displacement uses the new values.
KinState step_bicycle(const KinState& s, double accel, double yaw_rate, double dt);

namespace motion {
inline constexpr int kBins = 33;
inline constexpr int kNumRegular = kBins * kBins;  // 1089
inline constexpr int kStart = kNumRegular;         // mu_start
inline constexpr int kVocabSize = kNumRegular + 1; // 1090
inline constexpr double kAccelMin = -10.0;
inline constexpr double kAccelMax = 10.0;
inline constexpr double kYawRateMax = kPi / 2;
}  // namespace motion

struct Control {
    double accel = 0.0;
    double yaw_rate = 0.0;

    friend bool operator==(const Control&, const Control&) = default;
};

/// Index into the motion vocabulary; flattening is accel_bin * 33 + yaw_bin.
class MotionLabel {
public:
    constexpr MotionLabel() = default;
    explicit MotionLabel(int index);
    static MotionLabel start() { return MotionLabel(motion::kStart); }
    static MotionLabel from_bins(int accel_bin, int yaw_bin);

    int index() const { return index_; }
    bool is_start() const { return index_ == motion::kStart; }
    int accel_bin() const { return index_ / motion::kBins; }
    int yaw_bin() const { return index_ % motion::kBins; }
    /// Throws std::logic_error for the start label.
    Control control() const;

    friend bool operator==(const MotionLabel&, const MotionLabel&) = default;

private:
    int index_ = motion::kStart;
};

double accel_value(int bin);
double yaw_rate_value(int bin);

/// The 1089 regular (accel, yaw rate) pairs in label order; mu_start has no
/// entry.
const std::vector<Control>& motion_vocab();

std::array<Vec2, 4> box_corners(Pose2 pose, double length, double width);

/// Average corner error: mean distance between corresponding corners.
double ace(const std::array<Vec2, 4>& candidate, const std::array<Vec2, 4>& truth);

struct MotionFit {
    MotionLabel label;
    double ace = 0.0;
    KinState next;
};

/// Exhaustive search for the label whose bicycle step lands closest (in ACE)
/// to `gt_next`; ties go to the lowest index.
MotionFit best_motion_label(const KinState& s, double length, double width, Pose2 gt_next,
                            double dt);

KinState apply_label(const KinState& s, MotionLabel label, double dt);

}  // namespace scenestreamer
