#include "scenestreamer/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/sequence.hpp"

namespace scenestreamer {

using nlohmann::json;

std::string_view to_string(RolloutMode m) {
    switch (m) {
        case RolloutMode::kMotionPrediction: return "motion_prediction";
        case RolloutMode::kFullGeneration: return "full_generation";
        case RolloutMode::kDensification: return "densification";
        case RolloutMode::kClosedLoop: return "closed_loop";
    }
    return "?";
}

RolloutMode rollout_mode_from_string(std::string_view s) {
    for (auto m : {RolloutMode::kMotionPrediction, RolloutMode::kFullGeneration, RolloutMode::kDensification,
                   RolloutMode::kClosedLoop}) {
        if (s == to_string(m)) return m;
    }
    throw ConfigError("unknown rollout mode '" + std::string(s) + "'");
}

void RolloutConfig::validate() const {
    if (horizon < 0) throw ConfigError("rollout.horizon: must be >= 1 (or 0 for the scenario length)");
    if (max_agents < 1) throw ConfigError("rollout.max_agents: must be >= 1");
    if (injection_retries < 0) throw ConfigError("rollout.injection_retries: must be >= 0");
    if (target_agents < 0) throw ConfigError("rollout.target_agents: must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("rollout.top_p: must be in (0, 1]");
    if (forced_motion_steps < 0) throw ConfigError("rollout.forced_motion_steps: must be >= 0");
    if (!(retire_margin > 0.0)) throw ConfigError("rollout.retire_margin: must be positive");
    if (layout == SequenceMode::kPretrain && mode != RolloutMode::kMotionPrediction)
        throw ConfigError("a model without agent-state tokens only supports motion_prediction");
    quantizer.validate();
}

struct RolloutEngine::StepEvent {
    json lights = json::array();
    json spawns = json::array();
    json overrides = json::array();
    json motion = json::array();
    json retired = json::array();
    json clamped = json::array();
    int injection_failures = 0;
    int rejections = 0;
};

namespace {

json state_json(const KinState& s) { return json::array({s.x, s.y, s.psi, s.v}); }

KinState state_from_json(const json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

OrientedBox box_of(const SimAgent& a) { return {a.state.pose(), a.shape.length, a.shape.width}; }

GlobalAgentState global_of(const SimAgent& a) {
    return {a.state.x, a.state.y, a.state.psi, a.state.v * std::cos(a.state.psi), a.state.v * std::sin(a.state.psi),
            a.shape};
}

}  // namespace

RolloutEngine::RolloutEngine(nn::Model<float>& model, const ScenarioDescription& scenario, RolloutConfig config)
    : model_(model),
      scenario_(scenario),
      cfg_(std::move(config)),
      segments_(segment_polylines(scenario, default_reference(scenario))),
      session_(model, segments_),
      rng_(cfg_.seed) {
    cfg_.validate();
    validate(scenario_);
    if (static_cast<int>(segments_.size()) > model.config().max_map_tokens)
        throw ConfigError("scene has more segments than the model's map-id table");
    for (const auto& l : scenario_.traffic_lights) {
        if (l.segment >= static_cast<int>(segments_.size()))
            throw ConsistencyError("traffic light " + std::to_string(l.id) + " references a missing segment");
    }
    horizon_ = cfg_.horizon > 0 ? cfg_.horizon : scenario_.num_steps;
    init();
}

std::optional<KinState> RolloutEngine::gt_state(int source_index, int step) const {
    if (source_index < 0 || step < 0 || step >= scenario_.num_steps) return std::nullopt;
    const auto& st = scenario_.agents[static_cast<std::size_t>(source_index)].states[static_cast<std::size_t>(step)];
    if (!st.valid) return std::nullopt;
    return kin_state_from(st);
}

void RolloutEngine::init() {
    sim_ = {};
    sim_.next_id = static_cast<int>(scenario_.agents.size());
    sim_.light_history.resize(scenario_.traffic_lights.size());
    json header{{"type", "header"},
                {"scenario_id", scenario_.scenario_id},
                {"mode", to_string(cfg_.mode)},
                {"seed", cfg_.seed},
                {"horizon", horizon_},
                {"dt", scenario_.dt}};
    log_.push_back(header.dump());
    if (cfg_.mode == RolloutMode::kFullGeneration) return;
    const auto ids = select_dynamic_agents(scenario_, cfg_.max_agents);
    for (int id : ids) {
        const auto st = gt_state(id, 0);
        if (!st) continue;
        const auto& rec = scenario_.agents[static_cast<std::size_t>(id)];
        SimAgent a;
        a.id = id;
        a.type = rec.type;
        a.shape = rec.shape;
        a.state = *st;
        a.source_index = id;
        a.ego = cfg_.mode == RolloutMode::kClosedLoop && id == scenario_.sdc_index;
        sim_.agents.push_back(a);
    }
}

int RolloutEngine::population_cap() const {
    if (cfg_.mode == RolloutMode::kDensification && cfg_.target_agents > 0)
        return std::min(cfg_.target_agents, cfg_.max_agents);
    return cfg_.max_agents;
}

bool RolloutEngine::injection_allowed() const {
    return cfg_.mode != RolloutMode::kMotionPrediction && cfg_.layout == SequenceMode::kFull;
}

bool RolloutEngine::state_force(int agent_id, const KinState& state, std::optional<Pose2> next,
                                std::optional<AgentType> type, std::optional<AgentShape> shape) {
    auto it = std::find_if(sim_.agents.begin(), sim_.agents.end(), [&](const SimAgent& a) { return a.id == agent_id; });
    if (it == sim_.agents.end()) {
        if (agent_id < 0) throw ConfigError("agent ids must be non-negative");
        SimAgent a;
        a.id = agent_id;
        a.type = type.value_or(AgentType::kVehicle);
        a.shape = shape.value_or(AgentShape{});
        a.state = state;
        a.source_index = agent_id < static_cast<int>(scenario_.agents.size()) ? agent_id : -1;
        sim_.next_id = std::max(sim_.next_id, agent_id + 1);
        it = sim_.agents.insert(std::upper_bound(sim_.agents.begin(), sim_.agents.end(), a,
                                                 [](const SimAgent& x, const SimAgent& y) { return x.id < y.id; }),
                                a);
        pending_spawns_.insert(agent_id);
    } else {
        if (type) it->type = *type;
        if (shape) it->shape = *shape;
    }
    forced_[agent_id] = {state, next};
    const auto anchor = nearest_valid_segment(state.pose(), segments_, AnchorPolicy::kRelaxed);
    SimAgent probe = *it;
    probe.state = state;
    return !encode_relative(global_of(probe), segments_[static_cast<std::size_t>(anchor.segment_id)], cfg_.quantizer)
                .clamped;
}

void RolloutEngine::phase_lights(StepEvent& ev) {
    const int t = sim_.step;
    std::vector<Token> toks;
    for (std::size_t i = 0; i < scenario_.traffic_lights.size(); ++i) {
        const auto& l = scenario_.traffic_lights[i];
        SignalState s = SignalState::kUnknown;
        const bool gt_ok = t < scenario_.num_steps;
        if (t == 0 || (cfg_.mode == RolloutMode::kMotionPrediction && gt_ok)) {
            s = gt_ok ? l.states[static_cast<std::size_t>(t)] : SignalState::kUnknown;
        } else {
            s = static_cast<SignalState>(sample(session_.tl_probs(tl_rows_[i]), cfg_.tl_strategy, rng_, cfg_.top_p));
        }
        sim_.light_history[i].push_back(s);
        ev.lights.push_back(static_cast<int>(s));
        toks.push_back(traffic_light_token(l, t, s));
    }
    const std::size_t first = session_.extend(toks);
    tl_rows_.clear();
    for (std::size_t i = 0; i < toks.size(); ++i) tl_rows_.push_back(first + i);
}

bool RolloutEngine::try_inject(int slot, StepEvent& ev) {
    const int t = sim_.step;
    const int id = sim_.next_id;
    for (int attempt = 0; attempt <= cfg_.injection_retries; ++attempt) {
        const std::size_t mark = session_.size();
        auto draft = agent_state_tokens(t, slot, id, AgentType::kVehicle, segments_[0], {}, {});
        std::size_t row = session_.extend({draft[0]});
        const auto type = static_cast<AgentType>(sample(session_.type_probs(row), cfg_.type_strategy, rng_, cfg_.top_p));
        draft = agent_state_tokens(t, slot, id, type, segments_[0], {}, {});
        row = session_.extend({draft[1]});
        const int seg = sample(session_.map_probs(row), cfg_.map_strategy, rng_, cfg_.top_p);
        const MapSegment& segment = segments_[static_cast<std::size_t>(seg)];
        draft = agent_state_tokens(t, slot, id, type, segment, {}, {});
        row = session_.extend({draft[2]});
        const auto bins = session_.sample_rs(row, cfg_.rs_strategy, rng_, cfg_.top_p);

        const RelativeState rel = from_bins(bins, cfg_.quantizer);
        const GlobalAgentState g = decode_global(rel, segment);
        SimAgent a;
        a.id = id;
        a.type = type;
        a.shape = g.shape;
        a.state = kin_state_from(AgentState{g.x, g.y, g.psi, g.vx, g.vy, true});
        a.anchor_segment = seg;
        bool ok = true;
        if (cfg_.reject_clamped) {
            const int last = cfg_.quantizer.bins - 1;
            for (auto f : {RsField::kU, RsField::kV}) {
                const int b = bins[static_cast<std::size_t>(f)];
                if (b == 0 || b == last) ok = false;
            }
        }
        if (ok && cfg_.reject_collisions) {
            const OrientedBox nb = box_of(a);
            for (const auto& o : sim_.agents) {
                if (boxes_overlap(nb, box_of(o))) {
                    ok = false;
                    break;
                }
            }
        }
        if (!ok) {
            session_.truncate(mark);
            ++ev.rejections;
            continue;
        }
        draft = agent_state_tokens(t, slot, id, type, segment, bins, a.state.pose());
        session_.extend({draft[3]});
        sim_.agents.push_back(a);
        ++sim_.next_id;
        std::vector<int> bv(bins.begin(), bins.end());
        ev.spawns.push_back({{"id", id},
                             {"type", static_cast<int>(type)},
                             {"shape", {a.shape.length, a.shape.width, a.shape.height}},
                             {"state", state_json(a.state)},
                             {"source", "sampled"},
                             {"segment", seg},
                             {"bins", bv},
                             {"attempts", attempt + 1}});
        ++injections_;
        return true;
    }
    ++ev.injection_failures;
    ++injection_failures_;
    return false;
}

void RolloutEngine::phase_agents(StepEvent& ev) {
    const int t = sim_.step;
    // External overrides and the closed-loop ego.
    for (auto& a : sim_.agents) {
        std::optional<KinState> over;
        if (auto f = forced_.find(a.id); f != forced_.end()) {
            over = f->second.state;
        } else if (a.ego && t > 0) {
            over = gt_state(a.source_index, t);
        }
        if (over) {
            a.state = *over;
            ev.overrides.push_back({{"id", a.id}, {"state", state_json(a.state)}});
        }
    }
    for (const auto& a : sim_.agents) {
        const bool fresh = !sim_.roster.count(a.id);
        if (fresh) {
            ev.spawns.push_back({{"id", a.id},
                                 {"type", static_cast<int>(a.type)},
                                 {"shape", {a.shape.length, a.shape.width, a.shape.height}},
                                 {"state", state_json(a.state)},
                                 {"source", pending_spawns_.count(a.id) ? "forced" : "scenario"}});
        }
    }
    pending_spawns_.clear();

    if (cfg_.layout == SequenceMode::kFull) {
        std::vector<Token> toks{agent_sentinel_token(TokenGroup::kAgentStart, t)};
        for (std::size_t k = 0; k < sim_.agents.size(); ++k) {
            auto& a = sim_.agents[k];
            const auto anchor = nearest_valid_segment(a.state.pose(), segments_, AnchorPolicy::kRelaxed);
            const auto& seg = segments_[static_cast<std::size_t>(anchor.segment_id)];
            const auto rel = encode_relative(global_of(a), seg, cfg_.quantizer);
            if (rel.clamped) ev.clamped.push_back(a.id);
            a.anchor_segment = anchor.segment_id;
            const auto as = agent_state_tokens(t, static_cast<int>(k), a.id, a.type, seg, rel.bins, a.state.pose());
            toks.insert(toks.end(), as.begin(), as.end());
        }
        const std::size_t first = session_.extend(toks);
        std::size_t gate_row = first + toks.size() - 1;
        if (injection_allowed()) {
            while (static_cast<int>(sim_.agents.size()) < population_cap()) {
                auto probs = session_.gate_probs(gate_row);
                const bool densify = cfg_.mode == RolloutMode::kDensification && cfg_.force_end_logit_off;
                if (densify) {
                    probs[kGateEnd] = 0.0;
                    if (probs[kGateContinue] <= 0.0) probs[kGateContinue] = 1.0;
                }
                if (sample(probs, cfg_.gate_strategy, rng_, cfg_.top_p) == kGateEnd) break;
                if (!try_inject(static_cast<int>(sim_.agents.size()), ev)) break;
                gate_row = session_.size() - 1;
            }
        }
        session_.extend({agent_sentinel_token(TokenGroup::kAgentEnd, t)});
    }
    for (const auto& a : sim_.agents) {
        auto& tr = sim_.trajectories[a.id];
        tr.resize(static_cast<std::size_t>(horizon_));
        tr[static_cast<std::size_t>(t)] = a.state;
        sim_.roster[a.id] = a;
    }
}

void RolloutEngine::phase_motion(StepEvent& ev) {
    const int t = sim_.step;
    std::vector<Token> toks;
    for (const auto& a : sim_.agents) {
        toks.push_back(motion_token(t, a.id, a.type, a.state.pose(),
                                    {a.state.v * std::cos(a.state.psi), a.state.v * std::sin(a.state.psi)}, a.shape,
                                    a.motion_input));
    }
    const std::size_t first = session_.extend(toks);
    if (t + 1 >= horizon_) return;
    for (std::size_t k = 0; k < sim_.agents.size(); ++k) {
        auto& a = sim_.agents[k];
        std::optional<Pose2> target;
        if (auto f = forced_.find(a.id); f != forced_.end() && f->second.next) {
            target = f->second.next;
        } else if (a.ego || (cfg_.mode == RolloutMode::kMotionPrediction && t < cfg_.forced_motion_steps)) {
            if (const auto gt = gt_state(a.source_index, t + 1)) target = gt->pose();
        }
        int label = 0;
        if (target) {
            label = best_motion_label(a.state, a.shape.length, a.shape.width, *target, scenario_.dt).label.index();
        } else {
            label = sample(session_.motion_probs(first + k), cfg_.motion_strategy, rng_, cfg_.top_p);
        }
        a.state = apply_label(a.state, MotionLabel(label), scenario_.dt);
        a.motion_input = label;
        ev.motion.push_back({{"id", a.id}, {"label", label}, {"forced", target.has_value()}});
    }
}

void RolloutEngine::retire(StepEvent& ev) {
    if (cfg_.mode == RolloutMode::kMotionPrediction || sim_.step + 1 >= horizon_) return;
    std::vector<SimAgent> kept;
    for (const auto& a : sim_.agents) {
        double best = INFINITY;
        const Vec2 p{a.state.x, a.state.y};
        for (const auto& s : segments_) {
            best = std::min(best, distance_to_segment(p, s));
            if (best <= cfg_.retire_margin) break;
        }
        if (a.ego || best <= cfg_.retire_margin) {
            kept.push_back(a);
        } else {
            ev.retired.push_back(a.id);
        }
    }
    sim_.agents.swap(kept);
}

bool RolloutEngine::step() {
    if (sim_.step >= horizon_) return false;
    StepEvent ev;
    phase_lights(ev);
    phase_agents(ev);
    phase_motion(ev);
    retire(ev);
    forced_.clear();
    json line{{"type", "step"},
              {"step", sim_.step},
              {"lights", ev.lights},
              {"spawns", ev.spawns},
              {"overrides", ev.overrides},
              {"motion", ev.motion},
              {"retired", ev.retired},
              {"clamped", ev.clamped},
              {"rejections", ev.rejections},
              {"injection_failures", ev.injection_failures}};
    log_.push_back(line.dump());
    ++sim_.step;
    return sim_.step < horizon_;
}

RolloutResult RolloutEngine::run() {
    while (step()) {
    }
    RolloutResult r;
    r.exported = export_scenario();
    r.log = log_;
    r.final_state = sim_;
    r.injections = injections_;
    r.injection_failures = injection_failures_;
    return r;
}

ScenarioDescription RolloutEngine::export_scenario() const {
    ScenarioDescription out;
    out.scenario_id = scenario_.scenario_id;
    out.dt = scenario_.dt;
    out.num_steps = horizon_;
    out.polylines = scenario_.polylines;
    const int n = std::max(static_cast<int>(scenario_.agents.size()), sim_.next_id);
    for (int id = 0; id < n; ++id) {
        AgentRecord rec;
        rec.id = id;
        if (auto it = sim_.roster.find(id); it != sim_.roster.end()) {
            rec.type = it->second.type;
            rec.shape = it->second.shape;
        } else if (id < static_cast<int>(scenario_.agents.size())) {
            rec.type = scenario_.agents[static_cast<std::size_t>(id)].type;
            rec.shape = scenario_.agents[static_cast<std::size_t>(id)].shape;
        }
        rec.states.assign(static_cast<std::size_t>(horizon_), AgentState{});
        if (auto it = sim_.trajectories.find(id); it != sim_.trajectories.end()) {
            for (int t = 0; t < horizon_; ++t) {
                const auto& s = it->second[static_cast<std::size_t>(t)];
                if (!s) continue;
                rec.states[static_cast<std::size_t>(t)] =
                    AgentState{s->x, s->y, s->psi, s->v * std::cos(s->psi), s->v * std::sin(s->psi), true};
            }
        }
        out.agents.push_back(std::move(rec));
    }
    for (std::size_t i = 0; i < scenario_.traffic_lights.size(); ++i) {
        TrafficLightRecord l = scenario_.traffic_lights[i];
        l.states = sim_.light_history[i];
        l.states.resize(static_cast<std::size_t>(horizon_), SignalState::kUnknown);
        out.traffic_lights.push_back(std::move(l));
    }
    if (out.agents.empty()) {
        out.sdc_index = -1;
    } else {
        out.sdc_index = (scenario_.sdc_index >= 0 && scenario_.sdc_index < n) ? scenario_.sdc_index : 0;
    }
    return out;
}

std::map<int, std::vector<std::optional<KinState>>> replay_log(const std::vector<std::string>& log) {
    if (log.empty()) throw FormatError("empty rollout log");
    json header;
    try {
        header = json::parse(log.front());
    } catch (const json::exception& e) {
        throw FormatError(std::string("rollout log header: ") + e.what());
    }
    const int horizon = header.at("horizon").get<int>();
    const double dt = header.at("dt").get<double>();
    std::map<int, std::vector<std::optional<KinState>>> out;
    std::map<int, KinState> cur;
    for (std::size_t i = 1; i < log.size(); ++i) {
        json ev;
        try {
            ev = json::parse(log[i]);
        } catch (const json::exception& e) {
            throw FormatError("rollout log line " + std::to_string(i + 1) + ": " + e.what());
        }
        const int t = ev.at("step").get<int>();
        if (t < 0 || t >= horizon) throw FormatError("rollout log step out of range");
        for (const auto& s : ev.at("spawns")) cur[s.at("id").get<int>()] = state_from_json(s.at("state"));
        for (const auto& s : ev.at("overrides")) cur[s.at("id").get<int>()] = state_from_json(s.at("state"));
        for (const auto& [id, st] : cur) {
            auto& tr = out[id];
            tr.resize(static_cast<std::size_t>(horizon));
            tr[static_cast<std::size_t>(t)] = st;
        }
        for (const auto& m : ev.at("motion")) {
            auto& st = cur.at(m.at("id").get<int>());
            st = apply_label(st, MotionLabel(m.at("label").get<int>()), dt);
        }
        for (const auto& r : ev.at("retired")) cur.erase(r.get<int>());
    }
    return out;
}

std::string render_svg(const ScenarioDescription& s) {
    double x0 = INFINITY, y0 = INFINITY, x1 = -INFINITY, y1 = -INFINITY;
    auto grow = [&](double x, double y) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
    };
    for (const auto& p : s.polylines)
        for (const auto& q : p.points) grow(q.x, q.y);
    for (const auto& a : s.agents)
        for (const auto& st : a.states)
            if (st.valid) grow(st.x, st.y);
    if (!std::isfinite(x0)) {
        x0 = y0 = 0;
        x1 = y1 = 1;
    }
    const double pad = 5.0;
    x0 -= pad;
    y0 -= pad;
    x1 += pad;
    y1 += pad;
    std::ostringstream os;
    os.precision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"" << x0 << ' ' << -y1 << ' ' << (x1 - x0) << ' '
       << (y1 - y0) << "\" width=\"800\" height=\"" << static_cast<int>(800 * (y1 - y0) / (x1 - x0)) << "\">\n";
    os << "<g transform=\"scale(1,-1)\" fill=\"none\">\n";
    for (const auto& p : s.polylines) {
        os << "<polyline stroke=\"" << (p.type == MapType::kLane ? "#bbbbbb" : "#555555")
           << "\" stroke-width=\"0.3\" points=\"";
        for (const auto& q : p.points) os << q.x << ',' << q.y << ' ';
        os << "\"/>\n";
    }
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c"};
    for (const auto& a : s.agents) {
        const char* c = colors[static_cast<int>(a.type) % 3];
        os << "<polyline stroke=\"" << c << "\" stroke-width=\"0.4\" points=\"";
        const AgentState* last = nullptr;
        for (const auto& st : a.states) {
            if (!st.valid) continue;
            os << st.x << ',' << st.y << ' ';
            last = &st;
        }
        os << "\"/>\n";
        if (last) {
            const auto cs = corners(OrientedBox{last->pose(), a.shape.length, a.shape.width});
            os << "<polygon fill=\"" << c << "\" fill-opacity=\"0.5\" points=\"";
            for (const auto& p : cs) os << p.x << ',' << p.y << ' ';
            os << "\"/>\n";
        }
    }
    os << "</g>\n</svg>\n";
    return os.str();
}

}  // namespace scenestreamer
