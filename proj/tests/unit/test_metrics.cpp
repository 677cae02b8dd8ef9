#include <doctest.h>

#include <cmath>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/metrics.hpp"
#include "scenestreamer/random.hpp"

using namespace scenestreamer;

namespace {

SampleSet random_set(Rng& rng, int n, int dim) {
    SampleSet s;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v;
        for (int d = 0; d < dim; ++d) v.push_back(rng.normal());
        s.values.push_back(v);
    }
    return s;
}

Trajectory line(int n, double dy) {
    Trajectory t;
    for (int i = 0; i < n; ++i) t.push_back(Vec2{static_cast<double>(i), dy});
    return t;
}

}  // namespace

TEST_CASE("mmd: identical sets, point masses, symmetry") {
    Rng rng(1);
    const auto a = random_set(rng, 40, 2);
    CHECK(mmd(a, a) <= 1e-12);
    SampleSet p, q;
    p.values = {{0.0, 0.0}};
    q.values = {{3.0, 4.0}};
    CHECK(std::abs(mmd(p, q, 5.0) - (2.0 - 2.0 * std::exp(-0.5))) < 1e-12);
    CHECK(std::abs(mmd(p, q) - (2.0 - 2.0 * std::exp(-0.5))) < 1e-12);  // median of one distance
    const auto b = random_set(rng, 30, 2);
    CHECK(mmd(a, b) == doctest::Approx(mmd(b, a)).epsilon(1e-12));
    CHECK(mmd(a, b) >= 0.0);
    CHECK_THROWS_AS(mmd(SampleSet{}, a), MetricError);
    SampleSet c;
    c.values = {{1.0, 2.0, 3.0}};
    CHECK_THROWS_AS(mmd(a, c), MetricError);
}

TEST_CASE("displacement: hand-computed cases") {
    const auto gt = line(5, 0.0);
    auto m = displacement_metrics({line(5, 1.0), line(5, -1.0)}, gt);
    CHECK(m.ade_avg == doctest::Approx(1.0));
    CHECK(m.add == doctest::Approx(2.0));
    CHECK(m.fdd == doctest::Approx(2.0));
    CHECK(m.diversity_defined);

    m = displacement_metrics({line(5, 3.0)}, gt);
    CHECK(m.ade_avg == doctest::Approx(3.0));
    CHECK(m.fde_avg == doctest::Approx(3.0));
    CHECK(m.add == 0.0);
    CHECK_FALSE(m.diversity_defined);

    m = displacement_metrics({gt}, gt);
    CHECK(m.ade_avg == 0.0);
    CHECK(m.fde_min == 0.0);

    auto r = line(5, 2.0);
    r[4].reset();  // final step invalid: FDE uses step 3
    auto r2 = line(5, 0.5);
    m = displacement_metrics({r, r2}, gt);
    CHECK(m.fde_min == doctest::Approx(0.5));
    CHECK(m.ade_min <= m.ade_avg);
    CHECK(m.fde_min <= m.fde_avg);
}

TEST_CASE("displacement: rigid-transform invariance") {
    Rng rng(4);
    Trajectory gt, r1, r2;
    for (int i = 0; i < 6; ++i) {
        gt.push_back(Vec2{rng.normal(), rng.normal()});
        r1.push_back(Vec2{rng.normal(), rng.normal()});
        r2.push_back(Vec2{rng.normal(), rng.normal()});
    }
    auto move = [](Trajectory t) {
        for (auto& p : t) {
            const Vec2 q = rotate(*p, 0.7);
            p = Vec2{q.x + 10, q.y - 3};
        }
        return t;
    };
    const auto a = displacement_metrics({r1, r2}, gt);
    const auto b = displacement_metrics({move(r1), move(r2)}, move(gt));
    CHECK(a.ade_avg == doctest::Approx(b.ade_avg));
    CHECK(a.fdd == doctest::Approx(b.fdd));
}

TEST_CASE("collision check") {
    const OrientedBox a{{0, 0, 0}, 4, 2};
    CHECK(collision_check({a, {{10, 0, 0}, 4, 2}}).empty());
    CHECK(collision_check({a, a}) == std::vector<std::pair<int, int>>{{0, 1}});
    CHECK(collision_check({a, {{3.9, 0, 0}, 4, 2}}).size() == 1);
    CHECK(collision_check({a, {{4.0, 0, 0}, 4, 2}}).empty());  // touching edges
}

TEST_CASE("eval: ground truth against itself") {
    const auto gt = synth_scenario(SynthTemplate::kStraight, 3, 2);
    const auto rep = evaluate_scenarios({gt}, {gt}, EvalProtocol::kRelaxed);
    CHECK(rep.size() == 10);
    for (const char* k : {"ade_avg", "ade_min", "fde_avg", "fde_min", "add", "fdd"}) CHECK(rep.at(k) == 0.0);
    for (const char* k : {"mmd_position", "mmd_heading", "mmd_size", "mmd_velocity"}) CHECK(rep.at(k) <= 1e-12);
    auto other = gt;
    other.scenario_id = "nope";
    CHECK_THROWS_AS(evaluate_scenarios({other}, {gt}, EvalProtocol::kStrict), PairingError);
}

TEST_CASE("eval: strict protocol keeps nearby vehicles only") {
    auto s = synth_scenario(SynthTemplate::kStraight, 3, 2);
    s.agents[1].type = AgentType::kPedestrian;
    const Vec2 c{s.agents[0].states[0].x, s.agents[0].states[0].y};
    const auto strict = initial_state_samples(s, EvalProtocol::kStrict, c);
    const auto relaxed = initial_state_samples(s, EvalProtocol::kRelaxed, c);
    CHECK(relaxed.at(Attribute::kPosition).values.size() == 3);
    std::size_t expected = 0;
    for (const auto& a : s.agents)
        expected += a.type == AgentType::kVehicle && distance({a.states[0].x, a.states[0].y}, c) <= 50.0;
    CHECK(expected >= 1);
    CHECK(strict.at(Attribute::kPosition).values.size() == expected);
    const auto far = initial_state_samples(s, EvalProtocol::kStrict, Vec2{c.x + 1e4, c.y});
    CHECK(far.at(Attribute::kSize).values.empty());
}
