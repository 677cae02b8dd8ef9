#include "scenestreamer/scenario.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/kinematics.hpp"
#include "scenestreamer/map_codec.hpp"
#include "scenestreamer/random.hpp"

namespace scenestreamer {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kNumMapTypes> kMapTypeNames{
    "lane",        "sidewalk",   "road_boundary_line", "road_line",
    "broken_line", "solid_line", "yellow_line",        "white_line",
    "driveway",    "crosswalk",  "speed_bump",         "stop_sign"};

bool all_finite(std::initializer_list<double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
}

std::size_t line_of(std::string_view text, std::size_t byte) {
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + byte, '\n'));
}

// Field access with the JSON path in the error message.
const json& field(const json& obj, const char* key, const std::string& path) {
    if (!obj.is_object()) throw FormatError(path + ": expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw FormatError(path + "." + key + ": missing field");
    return *it;
}

double number(const json& j, const std::string& path) {
    if (!j.is_number()) throw FormatError(path + ": expected a number");
    return j.get<double>();
}

int integer(const json& j, const std::string& path) {
    if (!j.is_number_integer()) throw FormatError(path + ": expected an integer");
    return j.get<int>();
}

const json& array(const json& j, const std::string& path) {
    if (!j.is_array()) throw FormatError(path + ": expected an array");
    return j;
}

}  // namespace

std::string_view to_string(MapType t) { return kMapTypeNames[static_cast<std::size_t>(t)]; }

MapType map_type_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kMapTypeNames.size(); ++i) {
        if (kMapTypeNames[i] == s) return static_cast<MapType>(i);
    }
    throw FormatError("unknown map type '" + std::string(s) + "'");
}

void validate(const ScenarioDescription& s) {
    if (!(s.dt > 0.0) || !std::isfinite(s.dt)) throw ValidationError("dt: must be > 0");
    if (s.num_steps < 1) throw ValidationError("num_steps: must be >= 1");
    for (std::size_t i = 0; i < s.polylines.size(); ++i) {
        const auto& p = s.polylines[i];
        const std::string path = "polylines[" + std::to_string(i) + "]";
        if (p.points.size() < 2) throw ValidationError(path + ".points: needs >= 2 points");
        for (const auto& pt : p.points) {
            if (!all_finite({pt.x, pt.y, pt.z}))
                throw ValidationError(path + ".points: non-finite coordinate");
        }
    }
    for (std::size_t i = 0; i < s.agents.size(); ++i) {
        const auto& a = s.agents[i];
        const std::string path = "agents[" + std::to_string(i) + "]";
        if (a.id != static_cast<int>(i)) throw ValidationError(path + ".id: must equal its index");
        if (!(a.shape.length > 0 && a.shape.width > 0 && a.shape.height > 0))
            throw ValidationError(path + ".shape: components must be > 0");
        if (static_cast<int>(a.states.size()) != s.num_steps)
            throw ValidationError(path + ".states: expected " + std::to_string(s.num_steps) +
                                  " entries, got " + std::to_string(a.states.size()));
        for (std::size_t t = 0; t < a.states.size(); ++t) {
            const auto& st = a.states[t];
            if (!st.valid) continue;
            const std::string spath = path + ".states[" + std::to_string(t) + "]";
            if (!all_finite({st.x, st.y, st.psi, st.vx, st.vy}))
                throw ValidationError(spath + ": valid state with non-finite values");
            if (st.psi < -kPi || st.psi >= kPi)
                throw ValidationError(spath + ".psi: heading not wrapped to [-pi, pi)");
        }
    }
    for (std::size_t i = 0; i < s.traffic_lights.size(); ++i) {
        const auto& l = s.traffic_lights[i];
        const std::string path = "traffic_lights[" + std::to_string(i) + "]";
        if (l.segment < 0) throw ValidationError(path + ".segment: must be >= 0");
        if (static_cast<int>(l.states.size()) != s.num_steps)
            throw ValidationError(path + ".states: expected " + std::to_string(s.num_steps) +
                                  " entries, got " + std::to_string(l.states.size()));
        for (auto st : l.states) {
            const int v = static_cast<int>(st);
            if (v < 0 || v >= kNumSignalStates) throw ValidationError(path + ".states: value out of range");
        }
        if (!all_finite({l.stop_point.x, l.stop_point.y, l.heading}))
            throw ValidationError(path + ": non-finite stop point or heading");
    }
    if (s.agents.empty()) {
        if (s.sdc_index != -1 && s.sdc_index != 0)
            throw ValidationError("sdc_index: no agents present");
    } else if (s.sdc_index < 0 || s.sdc_index >= static_cast<int>(s.agents.size())) {
        throw ValidationError("sdc_index: does not refer to an existing agent");
    }
}

ScenarioDescription parse_scenario(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError("line " + std::to_string(line_of(text, e.byte)) + ": " + e.what());
    }
    ScenarioDescription s;
    const std::string root = "$";
    const auto& sid = field(doc, "scenario_id", root);
    if (!sid.is_string()) throw FormatError("$.scenario_id: expected a string");
    s.scenario_id = sid.get<std::string>();
    s.dt = number(field(doc, "dt", root), "$.dt");
    s.num_steps = integer(field(doc, "num_steps", root), "$.num_steps");
    s.sdc_index = integer(field(doc, "sdc_index", root), "$.sdc_index");

    const auto& polys = array(field(doc, "polylines", root), "$.polylines");
    for (std::size_t i = 0; i < polys.size(); ++i) {
        const std::string path = "$.polylines[" + std::to_string(i) + "]";
        MapPolyline p;
        const auto& id = field(polys[i], "id", path);
        p.id = id.is_string() ? id.get<std::string>() : id.dump();
        const auto& type = field(polys[i], "type", path);
        if (!type.is_string()) throw FormatError(path + ".type: expected a string");
        try {
            p.type = map_type_from_string(type.get<std::string>());
        } catch (const FormatError& e) {
            throw FormatError(path + ".type: " + e.what());
        }
        const auto& pts = array(field(polys[i], "points", path), path + ".points");
        for (std::size_t k = 0; k < pts.size(); ++k) {
            const std::string ppath = path + ".points[" + std::to_string(k) + "]";
            const auto& pt = array(pts[k], ppath);
            if (pt.size() != 3 && pt.size() != 2) throw FormatError(ppath + ": expected [x,y,z]");
            p.points.push_back({number(pt[0], ppath), number(pt[1], ppath),
                                pt.size() == 3 ? number(pt[2], ppath) : 0.0});
        }
        s.polylines.push_back(std::move(p));
    }

    const auto& agents = array(field(doc, "agents", root), "$.agents");
    for (std::size_t i = 0; i < agents.size(); ++i) {
        const std::string path = "$.agents[" + std::to_string(i) + "]";
        AgentRecord a;
        a.id = integer(field(agents[i], "id", path), path + ".id");
        const int type = integer(field(agents[i], "type", path), path + ".type");
        if (type < 0 || type >= kNumAgentTypes) throw ValidationError(path + ".type: out of range");
        a.type = static_cast<AgentType>(type);
        const auto& shape = array(field(agents[i], "shape", path), path + ".shape");
        if (shape.size() != 3) throw FormatError(path + ".shape: expected [l,w,h]");
        a.shape = {number(shape[0], path + ".shape"), number(shape[1], path + ".shape"),
                   number(shape[2], path + ".shape")};
        const auto& states = array(field(agents[i], "states", path), path + ".states");
        for (std::size_t t = 0; t < states.size(); ++t) {
            const std::string spath = path + ".states[" + std::to_string(t) + "]";
            const auto& st = array(states[t], spath);
            if (st.size() != 6) throw FormatError(spath + ": expected [x,y,psi,vx,vy,valid]");
            AgentState as;
            as.x = number(st[0], spath);
            as.y = number(st[1], spath);
            as.psi = wrap_angle(number(st[2], spath));
            as.vx = number(st[3], spath);
            as.vy = number(st[4], spath);
            if (st[5].is_boolean()) {
                as.valid = st[5].get<bool>();
            } else if (st[5].is_number()) {
                as.valid = st[5].get<double>() != 0.0;
            } else {
                throw FormatError(spath + ".valid: expected a boolean");
            }
            a.states.push_back(as);
        }
        s.agents.push_back(std::move(a));
    }

    const auto& lights = array(field(doc, "traffic_lights", root), "$.traffic_lights");
    for (std::size_t i = 0; i < lights.size(); ++i) {
        const std::string path = "$.traffic_lights[" + std::to_string(i) + "]";
        TrafficLightRecord l;
        l.id = integer(field(lights[i], "id", path), path + ".id");
        l.segment = integer(field(lights[i], "segment", path), path + ".segment");
        const auto& sp = array(field(lights[i], "stop_point", path), path + ".stop_point");
        if (sp.size() != 2) throw FormatError(path + ".stop_point: expected [x,y]");
        l.stop_point = {number(sp[0], path), number(sp[1], path)};
        l.heading = wrap_angle(number(field(lights[i], "heading", path), path + ".heading"));
        const auto& states = array(field(lights[i], "states", path), path + ".states");
        for (std::size_t t = 0; t < states.size(); ++t) {
            const int v = integer(states[t], path + ".states[" + std::to_string(t) + "]");
            if (v < 0 || v >= kNumSignalStates)
                throw ValidationError(path + ".states[" + std::to_string(t) + "]: out of range");
            l.states.push_back(static_cast<SignalState>(v));
        }
        s.traffic_lights.push_back(std::move(l));
    }
    validate(s);
    return s;
}

std::string serialize_scenario(const ScenarioDescription& s) {
    json doc;
    doc["scenario_id"] = s.scenario_id;
    doc["dt"] = s.dt;
    doc["num_steps"] = s.num_steps;
    doc["sdc_index"] = s.sdc_index;
    doc["polylines"] = json::array();
    for (const auto& p : s.polylines) {
        json pts = json::array();
        for (const auto& pt : p.points) pts.push_back({pt.x, pt.y, pt.z});
        doc["polylines"].push_back({{"id", p.id}, {"type", to_string(p.type)}, {"points", pts}});
    }
    doc["agents"] = json::array();
    for (const auto& a : s.agents) {
        json states = json::array();
        for (const auto& st : a.states) states.push_back({st.x, st.y, st.psi, st.vx, st.vy, st.valid});
        doc["agents"].push_back({{"id", a.id},
                                 {"type", static_cast<int>(a.type)},
                                 {"shape", {a.shape.length, a.shape.width, a.shape.height}},
                                 {"states", states}});
    }
    doc["traffic_lights"] = json::array();
    for (const auto& l : s.traffic_lights) {
        json states = json::array();
        for (auto st : l.states) states.push_back(static_cast<int>(st));
        doc["traffic_lights"].push_back({{"id", l.id},
                                         {"segment", l.segment},
                                         {"stop_point", {l.stop_point.x, l.stop_point.y}},
                                         {"heading", l.heading},
                                         {"states", states}});
    }
    return doc.dump() + "\n";
}

ScenarioDescription load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open scenario file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_scenario(ss.str());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void save_scenario(const ScenarioDescription& s, const std::filesystem::path& path) {
    validate(s);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write scenario file " + path.string());
    out << serialize_scenario(s);
    if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic scenarios

SynthTemplate synth_template_from_string(std::string_view s) {
    if (s == "straight") return SynthTemplate::kStraight;
    if (s == "intersection") return SynthTemplate::kIntersection;
    if (s == "curve") return SynthTemplate::kCurve;
    throw ConfigError("unknown template '" + std::string(s) + "'");
}

std::string_view to_string(SynthTemplate t) {
    switch (t) {
        case SynthTemplate::kStraight: return "straight";
        case SynthTemplate::kIntersection: return "intersection";
        case SynthTemplate::kCurve: return "curve";
    }
    return "?";
}

namespace {

// Scene-local construction, mapped to the world by a rigid transform before
// trajectories are integrated (integration happens in world coordinates so
// that GT steps are exact bicycle steps).
struct Frame {
    double angle = 0.0;
    Vec2 offset;

    Vec2 apply(Vec2 p) const {
        const Vec2 r = rotate(p, angle);
        return {r.x + offset.x, r.y + offset.y};
    }
    double heading(double h) const { return wrap_angle(h + angle); }
};

MapPolyline line_polyline(const Frame& f, std::string id, MapType type, Vec2 a, Vec2 b) {
    MapPolyline p{std::move(id), type, {}};
    const double len = distance(a, b);
    const int n = std::max(1, static_cast<int>(std::ceil(len)));
    for (int i = 0; i <= n; ++i) {
        const double u = static_cast<double>(i) / n;
        const Vec2 w = f.apply({a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)});
        p.points.push_back({w.x, w.y, 0.0});
    }
    return p;
}

MapPolyline arc_polyline(const Frame& f, std::string id, MapType type, double radius,
                         double from, double to) {
    MapPolyline p{std::move(id), type, {}};
    const double len = radius * std::abs(to - from);
    const int n = std::max(1, static_cast<int>(std::ceil(len)));
    for (int i = 0; i <= n; ++i) {
        const double a = from + (to - from) * static_cast<double>(i) / n;
        const Vec2 w = f.apply({radius * std::cos(a), radius * std::sin(a)});
        p.points.push_back({w.x, w.y, 0.0});
    }
    return p;
}

struct Spawn {
    AgentType type = AgentType::kVehicle;
    AgentShape shape;
    KinState init;   // world frame
    int accel_bin = 16;
    int yaw_bin = 16;
};

AgentShape sample_shape(AgentType type, Rng& rng) {
    switch (type) {
        case AgentType::kVehicle:
            return {rng.uniform(4.2, 5.2), rng.uniform(1.8, 2.1), rng.uniform(1.4, 1.8)};
        case AgentType::kPedestrian:
            return {rng.uniform(0.6, 0.9), rng.uniform(0.6, 0.9), rng.uniform(1.6, 1.9)};
        case AgentType::kCyclist:
            return {rng.uniform(1.7, 1.9), rng.uniform(0.6, 0.8), rng.uniform(1.6, 1.8)};
    }
    return {};
}

AgentRecord integrate(const Spawn& sp, int id, int num_steps, double dt) {
    AgentRecord a;
    a.id = id;
    a.type = sp.type;
    a.shape = sp.shape;
    const Control c{accel_value(sp.accel_bin), yaw_rate_value(sp.yaw_bin)};
    KinState k = sp.init;
    k.psi = wrap_angle(k.psi);
    for (int t = 0; t < num_steps; ++t) {
        a.states.push_back({k.x, k.y, k.psi, k.v * std::cos(k.psi), k.v * std::sin(k.psi), true});
        k = step_bicycle(k, c.accel, c.yaw_rate, dt);
    }
    return a;
}

std::vector<SignalState> light_cycle(int num_steps, int green, int yellow, int red, int offset) {
    std::vector<SignalState> out;
    const int period = green + yellow + red;
    for (int t = 0; t < num_steps; ++t) {
        const int p = (t + offset) % period;
        out.push_back(p < green ? SignalState::kGreen
                                : (p < green + yellow ? SignalState::kYellow : SignalState::kRed));
    }
    return out;
}

void attach_light(ScenarioDescription& s, TrafficLightRecord light) {
    const auto segments = segment_polylines(s, default_reference(s));
    const auto anchor = nearest_valid_segment({light.stop_point.x, light.stop_point.y, light.heading},
                                              segments);
    light.segment = anchor.segment_id;
    s.traffic_lights.push_back(std::move(light));
}

// Types: mostly vehicles, the tail may be pedestrians/cyclists. Vehicles first.
std::vector<AgentType> sample_types(int n, Rng& rng, bool allow_vru) {
    std::vector<AgentType> types(static_cast<std::size_t>(n), AgentType::kVehicle);
    if (allow_vru && n >= 3) {
        const double r = rng.uniform();
        if (r < 0.35) types.back() = AgentType::kPedestrian;
        else if (r < 0.6) types.back() = AgentType::kCyclist;
    }
    return types;
}

constexpr double kLaneWidth = 3.5;
constexpr double kSlotSpacing = 12.0;

ScenarioDescription synth_straight(int n, Rng& rng, const Frame& f, int steps, double dt) {
    ScenarioDescription s;
    const int lanes = 2 + static_cast<int>(rng.uniform() < 0.5);
    const double half = rng.uniform(55.0, 70.0);
    for (int l = 0; l < lanes; ++l) {
        s.polylines.push_back(line_polyline(f, "lane_" + std::to_string(l), MapType::kLane,
                                            {-half, l * kLaneWidth}, {half, l * kLaneWidth}));
    }
    for (int l = 0; l + 1 < lanes; ++l) {
        const double y = (l + 0.5) * kLaneWidth;
        s.polylines.push_back(line_polyline(f, "divider_" + std::to_string(l), MapType::kBrokenLine,
                                            {-half, y}, {half, y}));
    }
    const double right = -0.5 * kLaneWidth;
    const double left = (lanes - 0.5) * kLaneWidth;
    s.polylines.push_back(line_polyline(f, "boundary_r", MapType::kRoadBoundaryLine, {-half, right}, {half, right}));
    s.polylines.push_back(line_polyline(f, "boundary_l", MapType::kRoadBoundaryLine, {-half, left}, {half, left}));
    s.polylines.push_back(line_polyline(f, "sidewalk_r", MapType::kSidewalk, {-half, right - 2.0}, {half, right - 2.0}));

    const auto types = sample_types(n, rng, true);
    const int slots_per_lane = static_cast<int>((half - 20.0) / kSlotSpacing) + 1;
    const int vehicle_capacity = lanes * slots_per_lane;
    std::vector<int> lane_fill(static_cast<std::size_t>(lanes), 0);
    int sidewalk_fill = 0;
    const int vehicles = static_cast<int>(std::count(types.begin(), types.end(), AgentType::kVehicle));
    if (vehicles > vehicle_capacity || n - vehicles > slots_per_lane)
        throw PlacementError("straight template holds at most " + std::to_string(vehicle_capacity) +
                             " vehicles");
    const double lane_speed_base = rng.uniform(7.0, 11.0);
    for (int i = 0; i < n; ++i) {
        Spawn sp;
        sp.type = types[static_cast<std::size_t>(i)];
        sp.shape = sample_shape(sp.type, rng);
        Vec2 local;
        double speed = 0.0;
        if (sp.type == AgentType::kPedestrian) {
            local = {-half + 5.0 + kSlotSpacing * sidewalk_fill++, right - 2.0};
            speed = rng.uniform(1.0, 1.5);
        } else {
            const int lane = (sp.type == AgentType::kCyclist) ? 0 : i % lanes;
            const int slot = lane_fill[static_cast<std::size_t>(lane)]++;
            if (slot >= slots_per_lane) throw PlacementError("lane capacity exceeded");
            local = {-half + 10.0 + kSlotSpacing * slot, lane * kLaneWidth};
            speed = sp.type == AgentType::kCyclist ? rng.uniform(3.0, 5.0)
                                                   : lane_speed_base + 1.5 * lane + rng.uniform(-0.5, 0.5);
            if (sp.type == AgentType::kVehicle) sp.accel_bin = 15 + static_cast<int>(rng.uniform_int(3));
        }
        const Vec2 w = f.apply(local);
        sp.init = {w.x, w.y, f.heading(0.0), speed};
        s.agents.push_back(integrate(sp, i, steps, dt));
    }
    const double stop_x = rng.uniform(10.0, 30.0);
    const Vec2 stop = f.apply({stop_x, 0.0});
    TrafficLightRecord light;
    light.id = 0;
    light.stop_point = stop;
    light.heading = f.heading(0.0);
    light.states = light_cycle(steps, 8, 2, 8, static_cast<int>(rng.uniform_int(18)));
    s.num_steps = steps;
    attach_light(s, light);
    return s;
}

ScenarioDescription synth_curve(int n, Rng& rng, const Frame& f, int steps, double dt) {
    ScenarioDescription s;
    const int lanes = 2;
    const double r0 = rng.uniform(60.0, 90.0);
    const double from = -kPi / 2;
    const double to = kPi / 2;
    for (int l = 0; l < lanes; ++l) {
        s.polylines.push_back(arc_polyline(f, "lane_" + std::to_string(l), MapType::kLane,
                                           r0 + l * kLaneWidth, from, to));
    }
    s.polylines.push_back(arc_polyline(f, "boundary_in", MapType::kRoadBoundaryLine, r0 - 0.5 * kLaneWidth, from, to));
    s.polylines.push_back(arc_polyline(f, "boundary_out", MapType::kRoadBoundaryLine, r0 + 1.5 * kLaneWidth, from, to));
    s.polylines.push_back(arc_polyline(f, "divider", MapType::kBrokenLine, r0 + 0.5 * kLaneWidth, from, to));

    const auto types = sample_types(n, rng, false);
    const double slot_angle = kSlotSpacing / r0;
    const int slots_per_lane = static_cast<int>((kPi / 2) / slot_angle);
    if (n > lanes * slots_per_lane) throw PlacementError("curve template lane capacity exceeded");
    const int yaw_bin = 17;  // constant left turn
    const double omega = yaw_rate_value(yaw_bin);
    for (int i = 0; i < n; ++i) {
        Spawn sp;
        sp.type = types[static_cast<std::size_t>(i)];
        sp.shape = sample_shape(sp.type, rng);
        const int lane = i % lanes;
        const int slot = i / lanes;
        const double radius = r0 + lane * kLaneWidth;
        const double phi = from + 0.05 + slot * slot_angle + (lane == 1 ? 0.5 * slot_angle : 0.0);
        // The discrete bicycle path is a polygon inscribed in a circle of
        // radius v*dt / (2 sin(omega*dt/2)); choose v so it matches the lane.
        const double speed = radius * 2.0 * std::sin(0.5 * omega * dt) / dt;
        const Vec2 w = f.apply({radius * std::cos(phi), radius * std::sin(phi)});
        sp.init = {w.x, w.y, f.heading(phi + kPi / 2 - 0.5 * omega * dt), speed};
        sp.yaw_bin = yaw_bin;
        s.agents.push_back(integrate(sp, i, steps, dt));
    }
    s.num_steps = steps;
    if (rng.uniform() < 0.5) {
        const double phi = 0.6;
        TrafficLightRecord light;
        light.id = 0;
        light.stop_point = f.apply({r0 * std::cos(phi), r0 * std::sin(phi)});
        light.heading = f.heading(phi + kPi / 2);
        light.states = light_cycle(steps, 6, 2, 6, static_cast<int>(rng.uniform_int(14)));
        attach_light(s, light);
    }
    return s;
}

ScenarioDescription synth_intersection(int n, Rng& rng, const Frame& f, int steps, double dt) {
    ScenarioDescription s;
    const double arm = rng.uniform(55.0, 65.0);
    const double h = 0.5 * kLaneWidth;
    // Inbound direction for approach k: heading k*pi/2; lane offset to the right.
    for (int k = 0; k < 4; ++k) {
        const double hd = k * kPi / 2;
        const Vec2 a = rotate({-arm, -h}, hd);
        const Vec2 b = rotate({arm, -h}, hd);
        s.polylines.push_back(line_polyline(f, "lane_" + std::to_string(k), MapType::kLane, a, b));
        const Vec2 c0 = rotate({-10.0, -2.0 * kLaneWidth}, hd);
        const Vec2 c1 = rotate({-10.0, 2.0 * kLaneWidth}, hd);
        s.polylines.push_back(line_polyline(f, "crosswalk_" + std::to_string(k), MapType::kCrosswalk, c0, c1));
        const Vec2 e0 = rotate({-arm, -2.0 * kLaneWidth}, hd);
        const Vec2 e1 = rotate({-12.0, -2.0 * kLaneWidth}, hd);
        s.polylines.push_back(line_polyline(f, "edge_" + std::to_string(k), MapType::kRoadBoundaryLine, e0, e1));
    }
    const int offset = static_cast<int>(rng.uniform_int(20));
    const int green = 8, yellow = 2, red = 10;
    std::array<std::vector<SignalState>, 4> phases;
    for (int k = 0; k < 4; ++k) phases[static_cast<std::size_t>(k)] = light_cycle(steps, green, yellow, red, offset + (k % 2) * 10);

    const auto types = sample_types(n, rng, false);
    const int slots_per_arm = static_cast<int>((arm - 20.0) / kSlotSpacing) + 1;
    if (n > 4 * slots_per_arm) throw PlacementError("intersection template capacity exceeded");
    const double speed = rng.uniform(6.0, 9.0);
    for (int i = 0; i < n; ++i) {
        Spawn sp;
        sp.type = types[static_cast<std::size_t>(i)];
        sp.shape = sample_shape(sp.type, rng);
        const int k = i % 4;
        const int slot = i / 4;
        const double hd = k * kPi / 2;
        const bool go = phases[static_cast<std::size_t>(k)][0] == SignalState::kGreen;
        const double dist = 14.0 + kSlotSpacing * slot;
        const Vec2 w = f.apply(rotate({-dist, -h}, hd));
        sp.init = {w.x, w.y, f.heading(hd), go ? speed : 0.0};
        s.agents.push_back(integrate(sp, i, steps, dt));
    }
    s.num_steps = steps;
    for (int k = 0; k < 4; ++k) {
        const double hd = k * kPi / 2;
        TrafficLightRecord light;
        light.id = k;
        light.stop_point = f.apply(rotate({-11.0, -h}, hd));
        light.heading = f.heading(hd);
        light.states = phases[static_cast<std::size_t>(k)];
        attach_light(s, light);
    }
    return s;
}

}  // namespace

ScenarioDescription synth_scenario(SynthTemplate tmpl, int num_agents, std::uint64_t seed) {
    if (num_agents < 1) throw ValidationError("num_agents: must be >= 1");
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(tmpl) + 1);
    constexpr int kSteps = 19;
    constexpr double kDt = 0.5;
    Frame frame{rng.uniform(-kPi, kPi), {rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0)}};
    ScenarioDescription s;
    switch (tmpl) {
        case SynthTemplate::kStraight: s = synth_straight(num_agents, rng, frame, kSteps, kDt); break;
        case SynthTemplate::kIntersection: s = synth_intersection(num_agents, rng, frame, kSteps, kDt); break;
        case SynthTemplate::kCurve: s = synth_curve(num_agents, rng, frame, kSteps, kDt); break;
    }
    s.scenario_id = std::string(to_string(tmpl)) + "_" + std::to_string(seed);
    s.dt = kDt;
    s.num_steps = kSteps;
    s.sdc_index = 0;
    validate(s);
    return s;
}

}  // namespace scenestreamer
