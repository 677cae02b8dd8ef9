#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "scenestreamer/geometry.hpp"

namespace scenestreamer {

enum class AgentType : int { kVehicle = 0, kPedestrian = 1, kCyclist = 2 };
inline constexpr int kNumAgentTypes = 3;

enum class SignalState : int { kUnknown = 0, kGreen = 1, kYellow = 2, kRed = 3 };
inline constexpr int kNumSignalStates = 4;

/// Map semantic categories, in feature-column order.
enum class MapType : int {
    kLane = 0,
    kSidewalk,
    kRoadBoundaryLine,
    kRoadLine,
    kBrokenLine,
    kSolidLine,
    kYellowLine,
    kWhiteLine,
    kDriveway,
    kCrosswalk,
    kSpeedBump,
    kStopSign,
};
inline constexpr int kNumMapTypes = 12;

std::string_view to_string(MapType t);
MapType map_type_from_string(std::string_view s);

struct MapPolyline {
    std::string id;
    MapType type = MapType::kLane;
    std::vector<Vec3> points;

    friend bool operator==(const MapPolyline&, const MapPolyline&) = default;
};

/// Per-step agent sample. Velocity is in the global frame.
struct AgentState {
    double x = 0.0;
    double y = 0.0;
    double psi = 0.0;
    double vx = 0.0;
    double vy = 0.0;
    bool valid = false;

    Pose2 pose() const { return {x, y, psi}; }
    friend bool operator==(const AgentState&, const AgentState&) = default;
};

struct AgentShape {
    double length = 4.5;
    double width = 2.0;
    double height = 1.6;

    friend bool operator==(const AgentShape&, const AgentShape&) = default;
};

struct AgentRecord {
    int id = 0;
    AgentType type = AgentType::kVehicle;
    AgentShape shape;
    std::vector<AgentState> states;

    friend bool operator==(const AgentRecord&, const AgentRecord&) = default;
};

struct TrafficLightRecord {
    int id = 0;
    int segment = 0;  // index into the retained map segments
    Vec2 stop_point;
    double heading = 0.0;
    std::vector<SignalState> states;

    friend bool operator==(const TrafficLightRecord&, const TrafficLightRecord&) = default;
};

struct ScenarioDescription {
    std::string scenario_id;
    double dt = 0.5;
    int num_steps = 19;
    std::vector<MapPolyline> polylines;
    std::vector<AgentRecord> agents;
    std::vector<TrafficLightRecord> traffic_lights;
    int sdc_index = 0;

    friend bool operator==(const ScenarioDescription&, const ScenarioDescription&) = default;
};

/// Throws ValidationError naming the offending field.
void validate(const ScenarioDescription& s);

/// Parses the JSON scenario document. Headings are wrapped into [-pi, pi).
ScenarioDescription parse_scenario(std::string_view json_text);
std::string serialize_scenario(const ScenarioDescription& s);

ScenarioDescription load_scenario(const std::filesystem::path& path);
void save_scenario(const ScenarioDescription& s, const std::filesystem::path& path);

enum class SynthTemplate { kStraight, kIntersection, kCurve };
SynthTemplate synth_template_from_string(std::string_view s);
std::string_view to_string(SynthTemplate t);

/// Deterministic synthetic scenario whose agents follow constant on-grid
/// controls of the bicycle model. Throws PlacementError when the template's
/// lanes cannot hold `num_agents`.
ScenarioDescription synth_scenario(SynthTemplate tmpl, int num_agents, std::uint64_t seed);

inline constexpr double kSynthMaxSpeed = 30.0;

}  // namespace scenestreamer
