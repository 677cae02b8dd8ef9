#include "doctest.h"

#include <cmath>

#include "scenestreamer/kinematics.hpp"
#include "scenestreamer/random.hpp"

using namespace scenestreamer;

TEST_CASE("step_bicycle examples") {
    auto s = step_bicycle({0, 0, 0, 5}, 0, 0, 0.5);
    CHECK(s == KinState{2.5, 0, 0, 5});
    s = step_bicycle({0, 0, 0, 0}, 10, 0, 0.5);
    CHECK(s.v == 5.0);
    CHECK(s.x == 2.5);
    s = step_bicycle({0, 0, 0, 2}, 0, kPi, 0.5);
    CHECK(s.psi == doctest::Approx(kPi / 2));
    CHECK(s.x == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s.y == doctest::Approx(1.0));
}

TEST_CASE("negative speed is not clamped") {
    const auto s = step_bicycle({0, 0, 0, 1}, -10, 0, 0.5);
    CHECK(s.v == -4.0);
    CHECK(s.x == -2.0);
}

TEST_CASE("motion vocabulary layout") {
    const auto& v = motion_vocab();
    REQUIRE(v.size() == 1089);
    CHECK(v[0].accel == -10.0);
    CHECK(v[0].yaw_rate == doctest::Approx(-kPi / 2));
    CHECK(v[544].accel == 0.0);
    CHECK(v[544].yaw_rate == 0.0);
    CHECK(v[1088].accel == 10.0);
    CHECK(v[1088].yaw_rate == doctest::Approx(kPi / 2));
    CHECK(MotionLabel(1089).is_start());
    CHECK_THROWS(MotionLabel(1089).control());
    CHECK_THROWS(MotionLabel(1090));
    CHECK(MotionLabel::from_bins(16, 16).index() == 544);
    CHECK(MotionLabel(35).accel_bin() == 1);
    CHECK(MotionLabel(35).yaw_bin() == 2);
}

TEST_CASE("box corners and ace") {
    auto c = box_corners({0, 0, 0}, 4, 2);
    CHECK(c[0] == Vec2{2, 1});
    CHECK(c[1] == Vec2{2, -1});
    CHECK(c[2] == Vec2{-2, -1});
    CHECK(c[3] == Vec2{-2, 1});
    c = box_corners({0, 0, kPi / 2}, 4, 2);
    const Vec2 want[4] = {{-1, 2}, {1, 2}, {1, -2}, {-1, -2}};
    for (int i = 0; i < 4; ++i) {
        CHECK(c[static_cast<std::size_t>(i)].x == doctest::Approx(want[i].x).epsilon(1e-12));
        CHECK(c[static_cast<std::size_t>(i)].y == doctest::Approx(want[i].y).epsilon(1e-12));
    }
    const auto a = box_corners({0, 0, 0}, 4, 2);
    CHECK(ace(a, a) == 0.0);
    CHECK(ace(a, box_corners({3, 4, 0}, 4, 2)) == doctest::Approx(5.0));
    CHECK(ace(a, box_corners({0, 0, kPi}, 4, 2)) == doctest::Approx(2 * std::sqrt(5.0)));
}

TEST_CASE("best_motion_label exact candidates") {
    const KinState s{1, 2, 0.3, 7};
    auto gt = step_bicycle(s, 0, 0, 0.5);
    auto fit = best_motion_label(s, 4.5, 2, gt.pose(), 0.5);
    CHECK(fit.label.index() == 544);
    CHECK(fit.ace == 0.0);
    gt = step_bicycle(s, 10, kPi / 2, 0.5);
    fit = best_motion_label(s, 4.5, 2, gt.pose(), 0.5);
    CHECK(fit.label.index() == 1088);
    CHECK(fit.ace == 0.0);
}

TEST_CASE("on-grid controls always give zero ace") {
    Rng rng(5);
    const auto& vocab = motion_vocab();
    for (int i = 0; i < 50; ++i) {
        const KinState s{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-kPi, kPi), rng.uniform(0, 20)};
        const int idx = static_cast<int>(rng.uniform_int(1089));
        const auto gt = step_bicycle(s, vocab[static_cast<std::size_t>(idx)].accel, vocab[static_cast<std::size_t>(idx)].yaw_rate, 0.5);
        const auto fit = best_motion_label(s, 4.0, 1.8, gt.pose(), 0.5);
        CHECK(fit.ace == 0.0);
        CHECK(fit.next == gt);
    }
}

TEST_CASE("ace is invariant to a joint shift") {
    const auto a = box_corners({1, 2, 0.4}, 4, 2);
    const auto b = box_corners({1.5, 2.2, 0.1}, 4, 2);
    auto shift = [](std::array<Vec2, 4> c) {
        for (auto& p : c) p = {p.x + 7, p.y - 3};
        return c;
    };
    CHECK(ace(shift(a), shift(b)) == doctest::Approx(ace(a, b)).epsilon(1e-12));
}
