#include "scenestreamer/map_codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "scenestreamer/errors.hpp"

namespace scenestreamer {

namespace {

double edge_length(const PointRecord& r) {
    return std::sqrt((r.end.x - r.start.x) * (r.end.x - r.start.x) +
                     (r.end.y - r.start.y) * (r.end.y - r.start.y) +
                     (r.end.z - r.start.z) * (r.end.z - r.start.z));
}

Vec3 lerp(const Vec3& a, const Vec3& b, double u) {
    return {a.x + u * (b.x - a.x), a.y + u * (b.y - a.y), a.z + u * (b.z - a.z)};
}

MapSegment finish_segment(const MapPolyline& poly, std::vector<PointRecord> points) {
    MapSegment seg;
    seg.polyline_id = poly.id;
    seg.type = poly.type;
    seg.semantic[static_cast<std::size_t>(poly.type)] = true;
    double cx = 0.0, cy = 0.0, hs = 0.0, hc = 0.0;
    for (const auto& p : points) {
        cx += 0.5 * (p.start.x + p.end.x);
        cy += 0.5 * (p.start.y + p.end.y);
        const double h = std::atan2(p.end.y - p.start.y, p.end.x - p.start.x);
        hs += std::sin(h);
        hc += std::cos(h);
        seg.length += edge_length(p);
    }
    const double n = static_cast<double>(points.size());
    seg.center = {cx / n, cy / n};
    seg.heading = wrap_angle(std::atan2(hs, hc));
    seg.points = std::move(points);
    return seg;
}

}  // namespace

std::vector<MapSegment> segment_polylines(const ScenarioDescription& scenario, Vec2 reference) {
    if (scenario.polylines.empty()) throw MapError("scenario has no map polylines");
    std::vector<MapSegment> all;
    for (const auto& poly : scenario.polylines) {
        std::vector<PointRecord> edges;
        for (std::size_t j = 0; j + 1 < poly.points.size(); ++j) {
            const PointRecord e{poly.points[j], poly.points[j + 1]};
            const double len = edge_length(e);
            if (len <= map_codec::kSegmentLength) {
                edges.push_back(e);
                continue;
            }
            const int pieces = static_cast<int>(std::ceil(len / map_codec::kSegmentLength));
            for (int k = 0; k < pieces; ++k) {
                edges.push_back({lerp(e.start, e.end, static_cast<double>(k) / pieces),
                                 lerp(e.start, e.end, static_cast<double>(k + 1) / pieces)});
            }
        }
        std::vector<PointRecord> current;
        double current_len = 0.0;
        for (const auto& e : edges) {
            const double len = edge_length(e);
            if (!current.empty() &&
                (current_len + len > map_codec::kSegmentLength + 1e-9 ||
                 static_cast<int>(current.size()) == map_codec::kPointsPerSegment)) {
                all.push_back(finish_segment(poly, std::move(current)));
                current.clear();
                current_len = 0.0;
            }
            current.push_back(e);
            current_len += len;
        }
        if (!current.empty()) all.push_back(finish_segment(poly, std::move(current)));
    }
    if (all.empty()) throw MapError("map polylines produced no segments");

    if (static_cast<int>(all.size()) > map_codec::kMaxSegments) {
        std::vector<std::size_t> order(all.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return distance(all[a].center, reference) < distance(all[b].center, reference);
        });
        std::vector<bool> keep(all.size(), false);
        for (int i = 0; i < map_codec::kMaxSegments; ++i) keep[order[static_cast<std::size_t>(i)]] = true;
        std::vector<MapSegment> kept;
        kept.reserve(map_codec::kMaxSegments);
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (keep[i]) kept.push_back(std::move(all[i]));
        }
        all = std::move(kept);
    }
    for (std::size_t i = 0; i < all.size(); ++i) all[i].segment_id = static_cast<int>(i);
    return all;
}

Vec2 default_reference(const ScenarioDescription& scenario, int step) {
    if (scenario.sdc_index >= 0 && scenario.sdc_index < static_cast<int>(scenario.agents.size())) {
        const auto& states = scenario.agents[static_cast<std::size_t>(scenario.sdc_index)].states;
        if (step >= 0 && step < static_cast<int>(states.size()) && states[static_cast<std::size_t>(step)].valid) {
            return {states[static_cast<std::size_t>(step)].x, states[static_cast<std::size_t>(step)].y};
        }
    }
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& p : scenario.polylines) {
        for (const auto& pt : p.points) {
            xmin = std::min(xmin, pt.x);
            xmax = std::max(xmax, pt.x);
            ymin = std::min(ymin, pt.y);
            ymax = std::max(ymax, pt.y);
        }
    }
    if (!std::isfinite(xmin)) return {};
    return {0.5 * (xmin + xmax), 0.5 * (ymin + ymax)};
}

PointFeatures point_features(const MapSegment& segment) {
    PointFeatures f = PointFeatures::Zero();
    const int n = std::min<int>(static_cast<int>(segment.points.size()), map_codec::kPointsPerSegment);
    for (int j = 0; j < n; ++j) {
        const auto& p = segment.points[static_cast<std::size_t>(j)];
        const double dx = p.end.x - p.start.x;
        const double dy = p.end.y - p.start.y;
        const double dz = p.end.z - p.start.z;
        const double len = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double inv = len > 0.0 ? 1.0 / len : 0.0;
        const double heading = len > 0.0 ? std::atan2(dy, dx) : 0.0;
        auto row = f.row(j);
        row(0) = p.start.x;
        row(1) = p.start.y;
        row(2) = p.start.z;
        row(3) = p.end.x;
        row(4) = p.end.y;
        row(5) = p.end.z;
        row(6) = dx * inv;
        row(7) = dy * inv;
        row(8) = dz * inv;
        row(9) = heading;
        row(10) = std::sin(heading);
        row(11) = std::cos(heading);
        row(12) = len;
        for (int k = 0; k < kNumMapTypes; ++k) row(13 + k) = segment.semantic[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
        row(25) = segment.length;
        row(26) = 1.0;
    }
    return f;
}

AnchorResult nearest_valid_segment(Pose2 pose, const std::vector<MapSegment>& segments,
                                   AnchorPolicy policy) {
    if (segments.empty()) throw MapError("no map segments to anchor to");
    auto search = [&](bool filter) {
        int best = -1;
        double best_d = INFINITY;
        for (const auto& s : segments) {
            if (filter && std::abs(wrap_angle(pose.psi - s.heading)) >= kPi / 2) continue;
            const double d = distance({pose.x, pose.y}, s.center);
            if (d < best_d || (d == best_d && s.segment_id < best)) {
                best_d = d;
                best = s.segment_id;
            }
        }
        return best;
    };
    const int strict = search(true);
    if (strict >= 0) return {strict, false};
    if (policy == AnchorPolicy::kStrict)
        throw NoAnchorError("no map segment within 90 degrees of the agent heading");
    return {search(false), true};
}

double distance_to_segment(Vec2 p, const MapSegment& segment) {
    double best = INFINITY;
    for (const auto& e : segment.points) {
        const double ex = e.end.x - e.start.x;
        const double ey = e.end.y - e.start.y;
        const double len2 = ex * ex + ey * ey;
        double u = len2 > 0.0 ? ((p.x - e.start.x) * ex + (p.y - e.start.y) * ey) / len2 : 0.0;
        u = std::clamp(u, 0.0, 1.0);
        best = std::min(best, distance(p, {e.start.x + u * ex, e.start.y + u * ey}));
    }
    return best;
}

}  // namespace scenestreamer
