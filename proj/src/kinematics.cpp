#include "scenestreamer/kinematics.hpp"

#include <cmath>
#include <stdexcept>

namespace scenestreamer {

KinState kin_state_from(const AgentState& s) {
    const double speed = s.vx * std::cos(s.psi) + s.vy * std::sin(s.psi);
    return {s.x, s.y, s.psi, speed};
}

KinState step_bicycle(const KinState& s, double accel, double yaw_rate, double dt) {
    KinState n;
    n.psi = wrap_angle(s.psi + yaw_rate * dt);
    n.v = s.v + accel * dt;
    n.x = s.x + n.v * std::cos(n.psi) * dt;
    n.y = s.y + n.v * std::sin(n.psi) * dt;
    return n;
}

MotionLabel::MotionLabel(int index) : index_(index) {
    if (index < 0 || index >= motion::kVocabSize) {
        throw std::out_of_range("motion label index out of range");
    }
}

MotionLabel MotionLabel::from_bins(int accel_bin, int yaw_bin) {
    if (accel_bin < 0 || accel_bin >= motion::kBins || yaw_bin < 0 || yaw_bin >= motion::kBins) {
        throw std::out_of_range("motion bin out of range");
    }
    return MotionLabel(accel_bin * motion::kBins + yaw_bin);
}

double accel_value(int bin) {
    return motion::kAccelMin + bin * (motion::kAccelMax - motion::kAccelMin) / (motion::kBins - 1);
}

double yaw_rate_value(int bin) {
    return -motion::kYawRateMax + bin * (2.0 * motion::kYawRateMax) / (motion::kBins - 1);
}

const std::vector<Control>& motion_vocab() {
    static const std::vector<Control> vocab = [] {
        std::vector<Control> v;
        v.reserve(motion::kNumRegular);
        for (int i = 0; i < motion::kBins; ++i) {
            for (int j = 0; j < motion::kBins; ++j) v.push_back({accel_value(i), yaw_rate_value(j)});
        }
        return v;
    }();
    return vocab;
}

Control MotionLabel::control() const {
    if (is_start()) throw std::logic_error("mu_start carries no control");
    return motion_vocab()[static_cast<std::size_t>(index_)];
}

std::array<Vec2, 4> box_corners(Pose2 pose, double length, double width) {
    return corners(OrientedBox{pose, length, width});
}

double ace(const std::array<Vec2, 4>& candidate, const std::array<Vec2, 4>& truth) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) sum += distance(candidate[i], truth[i]);
    return sum / 4.0;
}

KinState apply_label(const KinState& s, MotionLabel label, double dt) {
    const Control c = label.control();
    return step_bicycle(s, c.accel, c.yaw_rate, dt);
}

MotionFit best_motion_label(const KinState& s, double length, double width, Pose2 gt_next,
                            double dt) {
    const auto truth = box_corners(gt_next, length, width);
    const auto& vocab = motion_vocab();
    MotionFit best;
    best.ace = INFINITY;
    for (int idx = 0; idx < motion::kNumRegular; ++idx) {
        const Control& c = vocab[static_cast<std::size_t>(idx)];
        const KinState next = step_bicycle(s, c.accel, c.yaw_rate, dt);
        const double err = ace(box_corners(next.pose(), length, width), truth);
        if (err < best.ace) {
            best.ace = err;
            best.label = MotionLabel(idx);
            best.next = next;
        }
    }
    return best;
}

}  // namespace scenestreamer
