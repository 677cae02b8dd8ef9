#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scenestreamer/geometry.hpp"
#include "scenestreamer/scenario.hpp"

namespace scenestreamer {

namespace map_codec {
inline constexpr int kMaxSegments = 3000;
inline constexpr int kPointsPerSegment = 30;
inline constexpr int kFeatureDim = 27;
inline constexpr double kSegmentLength = 10.0;
}  // namespace map_codec

/// One polyline edge (start -> end).
struct PointRecord {
    Vec3 start;
    Vec3 end;
};

using PointFeatures =
    Eigen::Matrix<double, map_codec::kPointsPerSegment, map_codec::kFeatureDim, Eigen::RowMajor>;

struct MapSegment {
    int segment_id = 0;
    std::string polyline_id;
    MapType type = MapType::kLane;
    std::vector<PointRecord> points;  // at most 30
    Vec2 center;
    double heading = 0.0;
    double length = 0.0;
    std::array<bool, kNumMapTypes> semantic{};

    Pose2 pose() const { return {center.x, center.y, heading}; }
};

/// Slices every polyline into ~10 m runs of at most 30 edges. When more than
/// 3000 segments result, the 3000 with centers closest to `reference` are kept
/// (in their original order); ids are assigned 0..M-1 in that order.
std::vector<MapSegment> segment_polylines(const ScenarioDescription& scenario, Vec2 reference);

/// Reference point for the segment cap: the SDC position at `step` if the SDC
/// is valid there, otherwise the centroid of the map's bounding box.
Vec2 default_reference(const ScenarioDescription& scenario, int step = 0);

/// 30x27 per-point features: start xyz, end xyz, unit direction, heading with
/// sin/cos, edge length, 12 type one-hots, total segment length, valid flag.
/// Padding rows are zero.
PointFeatures point_features(const MapSegment& segment);

enum class AnchorPolicy { kStrict, kRelaxed };

struct AnchorResult {
    int segment_id = -1;
    bool relaxed = false;  // heading filter could not be satisfied
};

/// Closest segment center among segments whose heading is within 90 degrees of
/// `pose.psi`; ties go to the lowest id. With kRelaxed, falls back to the
/// closest center regardless of heading instead of throwing NoAnchorError.
AnchorResult nearest_valid_segment(Pose2 pose, const std::vector<MapSegment>& segments,
                                   AnchorPolicy policy = AnchorPolicy::kRelaxed);

/// Distance from `p` to the polyline geometry of `segment`.
double distance_to_segment(Vec2 p, const MapSegment& segment);

}  // namespace scenestreamer
