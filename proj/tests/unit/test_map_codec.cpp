#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/map_codec.hpp"

using namespace scenestreamer;

namespace {

ScenarioDescription with_polylines(std::vector<MapPolyline> p) {
    ScenarioDescription s;
    s.polylines = std::move(p);
    return s;
}

MapPolyline straight(const std::string& id, double length, double spacing) {
    MapPolyline p{id, MapType::kLane, {}};
    for (double x = 0; x <= length + 1e-9; x += spacing) p.points.push_back({x, 0, 0});
    return p;
}

}  // namespace

TEST_CASE("25 m polyline splits 10/10/5") {
    const auto segs = segment_polylines(with_polylines({straight("a", 25, 1)}), {});
    REQUIRE(segs.size() == 3);
    CHECK(segs[0].length == doctest::Approx(10));
    CHECK(segs[1].length == doctest::Approx(10));
    CHECK(segs[2].length == doctest::Approx(5));
    CHECK(segs[0].points.size() == 10);
    CHECK(segs[2].segment_id == 2);
    CHECK(segs[0].center.x == doctest::Approx(5));
}

TEST_CASE("short polyline is one segment and long edges are split") {
    CHECK(segment_polylines(with_polylines({straight("a", 1, 1)}), {}).size() == 1);
    const auto segs = segment_polylines(with_polylines({straight("b", 35, 35)}), {});
    CHECK(segs.size() == 4);
    for (const auto& s : segs) CHECK(s.length <= 10 + 1e-9);
}

TEST_CASE("point cap of 30 per segment") {
    const auto segs = segment_polylines(with_polylines({straight("a", 9, 0.1)}), {});
    REQUIRE(segs.size() == 3);
    CHECK(segs[0].points.size() == 30);
}

TEST_CASE("segment cap keeps the closest 3000") {
    std::vector<MapPolyline> polys;
    for (int i = 0; i < 3001; ++i) {
        const double gx = 3.0 * (i % 60);
        const double gy = 3.0 * (i / 60);
        polys.push_back({"p" + std::to_string(i), MapType::kLane, {{gx, gy, 0}, {gx + 1, gy, 0}}});
    }
    const auto segs = segment_polylines(with_polylines(polys), {0, 0});
    REQUIRE(segs.size() == 3000);
    // Oracle: full sort by center distance, drop the farthest.
    std::size_t far = 0;
    double far_d = -1;
    for (std::size_t i = 0; i < polys.size(); ++i) {
        const double d = std::hypot(polys[i].points[0].x + 0.5, polys[i].points[0].y);
        if (d > far_d) {
            far_d = d;
            far = i;
        }
    }
    for (const auto& s : segs) CHECK(s.polyline_id != polys[far].id);
    for (std::size_t i = 0; i < segs.size(); ++i) CHECK(segs[i].segment_id == static_cast<int>(i));
}

TEST_CASE("empty map is a map error") {
    CHECK_THROWS_AS(segment_polylines(ScenarioDescription{}, {}), MapError);
}

TEST_CASE("point features layout") {
    MapPolyline p{"a", MapType::kLane, {{0, 0, 0}, {1, 0, 0}}};
    const auto segs = segment_polylines(with_polylines({p}), {});
    const auto f = point_features(segs[0]);
    const double want[13] = {0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 0, 1, 1};
    for (int c = 0; c < 13; ++c) CHECK(f(0, c) == want[c]);
    CHECK(f(0, 13) == 1.0);
    for (int c = 14; c < 25; ++c) CHECK(f(0, c) == 0.0);
    CHECK(f(0, 25) == 1.0);
    CHECK(f(0, 26) == 1.0);
    for (int r = 1; r < 30; ++r) CHECK(f.row(r).isZero());

    const auto curved = segment_polylines(
        with_polylines({{"c", MapType::kCrosswalk, {{0, 0, 0}, {1, 1, 0}, {1, 3, 1}, {-1, 4, 0}}}}), {});
    const auto g = point_features(curved[0]);
    for (int r = 0; r < 3; ++r) {
        CHECK(g(r, 10) * g(r, 10) + g(r, 11) * g(r, 11) == doctest::Approx(1.0));
        CHECK(g(r, 13 + static_cast<int>(MapType::kCrosswalk)) == 1.0);
    }
}

TEST_CASE("nearest_valid_segment") {
    MapSegment a, b, c;
    a.segment_id = 0;
    a.center = {0, 0};
    b.segment_id = 1;
    b.center = {10, 0};
    c.segment_id = 2;
    c.center = {5, 0};
    c.heading = kPi;
    std::vector<MapSegment> segs{a, b, c};
    CHECK(nearest_valid_segment({10, 0, 0}, segs).segment_id == 1);
    CHECK(nearest_valid_segment({5, 0, 0}, segs).segment_id == 0);  // tie, lower id
    CHECK(nearest_valid_segment({5, 0, kPi}, segs).segment_id == 2);
    CHECK_FALSE(nearest_valid_segment({5, 0, 0}, segs).relaxed);

    std::vector<MapSegment> forward{a, b};
    const auto r = nearest_valid_segment({9, 1, kPi}, forward, AnchorPolicy::kRelaxed);
    CHECK(r.segment_id == 1);
    CHECK(r.relaxed);
    CHECK_THROWS_AS(nearest_valid_segment({9, 1, kPi}, forward, AnchorPolicy::kStrict), NoAnchorError);
    CHECK_THROWS_AS(nearest_valid_segment({0, 0, 0}, {}), MapError);
}

TEST_CASE("segments reproduce polyline order") {
    MapPolyline p{"a", MapType::kLane, {}};
    for (int i = 0; i < 40; ++i) p.points.push_back({i * 0.7, std::sin(i * 0.3), 0});
    const auto segs = segment_polylines(with_polylines({p}), {});
    std::size_t j = 0;
    for (const auto& s : segs) {
        for (const auto& e : s.points) {
            CHECK(e.start == p.points[j]);
            CHECK(e.end == p.points[j + 1]);
            ++j;
        }
    }
    CHECK(j + 1 == p.points.size());
}
