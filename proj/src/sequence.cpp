#include "scenestreamer/sequence.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/kinematics.hpp"

namespace scenestreamer {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 9> kGroupNames{
    "MAP", "TL", "AS_START", "AS_SOA", "AS_TYPE", "AS_MS", "AS_RS", "AS_END", "MO"};

}  // namespace

std::string_view to_string(TokenGroup g) { return kGroupNames[static_cast<std::size_t>(g)]; }

TokenGroup token_group_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kGroupNames.size(); ++i) {
        if (kGroupNames[i] == s) return static_cast<TokenGroup>(i);
    }
    throw FormatError("unknown token group '" + std::string(s) + "'");
}

GroupClass group_class(TokenGroup g) {
    switch (g) {
        case TokenGroup::kMap: return GroupClass::kMap;
        case TokenGroup::kTrafficLight: return GroupClass::kTrafficLight;
        case TokenGroup::kMotion: return GroupClass::kMotion;
        default: return GroupClass::kAgentState;
    }
}

std::string_view to_string(SequenceMode m) { return m == SequenceMode::kPretrain ? "pretrain" : "full"; }

SequenceMode sequence_mode_from_string(std::string_view s) {
    if (s == "pretrain") return SequenceMode::kPretrain;
    if (s == "full") return SequenceMode::kFull;
    throw ConfigError("unknown sequence mode '" + std::string(s) + "'");
}

int expected_step_tokens(SequenceMode mode, int num_lights, int num_agents) {
    if (mode == SequenceMode::kPretrain) return num_lights + num_agents;
    return num_lights + 2 + 4 * num_agents + num_agents;
}

std::vector<int> select_dynamic_agents(const ScenarioDescription& scenario, int max_agents) {
    std::vector<int> ids(scenario.agents.size());
    std::iota(ids.begin(), ids.end(), 0);
    if (max_agents < 0 || static_cast<int>(ids.size()) <= max_agents) return ids;
    std::vector<double> movement(ids.size(), 0.0);
    for (std::size_t i = 0; i < scenario.agents.size(); ++i) {
        const auto& st = scenario.agents[i].states;
        for (std::size_t t = 0; t + 1 < st.size(); ++t) {
            if (st[t].valid && st[t + 1].valid)
                movement[i] += distance({st[t].x, st[t].y}, {st[t + 1].x, st[t + 1].y});
        }
    }
    std::stable_sort(ids.begin(), ids.end(),
                     [&](int a, int b) { return movement[static_cast<std::size_t>(a)] > movement[static_cast<std::size_t>(b)]; });
    ids.resize(static_cast<std::size_t>(max_agents));
    std::sort(ids.begin(), ids.end());
    return ids;
}

Token traffic_light_token(const TrafficLightRecord& light, int step, SignalState state) {
    Token tok;
    tok.group = TokenGroup::kTrafficLight;
    tok.step = step;
    tok.owner_kind = OwnerKind::kLight;
    tok.owner_id = light.id;
    tok.anchor = Anchor{light.stop_point.x, light.stop_point.y, light.heading, static_cast<double>(step)};
    tok.signal = static_cast<int>(state);
    tok.map_id = light.segment;
    return tok;
}

std::array<Token, 4> agent_state_tokens(int step, int slot, int owner_id, AgentType type, const MapSegment& segment,
                                        const std::array<int, kNumRsFields>& bins, Pose2 pose) {
    const double tf = static_cast<double>(step);
    Token base;
    base.step = step;
    base.owner_kind = OwnerKind::kAgent;
    base.owner_id = owner_id;
    const int intra = 4 * slot;
    std::array<Token, 4> out{base, base, base, base};
    out[0].group = TokenGroup::kAgentSoa;
    out[0].intra_index = intra;
    for (int i = 1; i < 4; ++i) {
        out[static_cast<std::size_t>(i)].intra_index = intra + i;
        out[static_cast<std::size_t>(i)].agent_type = static_cast<int>(type);
    }
    out[1].group = TokenGroup::kAgentType;
    out[2].group = TokenGroup::kAgentMapSeg;
    out[2].map_id = segment.segment_id;
    out[2].anchor = Anchor{segment.center.x, segment.center.y, segment.heading, tf};
    out[3].group = TokenGroup::kAgentRelState;
    out[3].map_id = segment.segment_id;
    out[3].rs_bins = bins;
    out[3].anchor = Anchor{pose.x, pose.y, pose.psi, tf};
    return out;
}

Token agent_sentinel_token(TokenGroup group, int step) {
    Token tok;
    tok.group = group;
    tok.step = step;
    return tok;
}

Token motion_token(int step, int owner_id, AgentType type, Pose2 pose, Vec2 velocity, const AgentShape& shape,
                   int motion_input) {
    Token mo;
    mo.group = TokenGroup::kMotion;
    mo.step = step;
    mo.owner_kind = OwnerKind::kAgent;
    mo.owner_id = owner_id;
    mo.anchor = Anchor{pose.x, pose.y, pose.psi, static_cast<double>(step)};
    mo.agent_type = static_cast<int>(type);
    mo.motion = motion_input;
    const Vec2 vl = rotate(velocity, -pose.psi);
    mo.velocity_local = {vl.x, vl.y};
    mo.shape = {shape.length, shape.width, shape.height};
    return mo;
}

TokenSequence build_sequence(const ScenarioDescription& scenario,
                             const std::vector<MapSegment>& segments,
                             const SequenceOptions& options) {
    if (segments.empty()) throw ConsistencyError(scenario.scenario_id + ": no map segments");
    const int m = static_cast<int>(segments.size());
    for (const auto& l : scenario.traffic_lights) {
        if (l.segment >= m)
            throw ConsistencyError(scenario.scenario_id + ": traffic light " + std::to_string(l.id) +
                                   " references segment " + std::to_string(l.segment) +
                                   " but only " + std::to_string(m) + " segments exist");
    }
    const int steps = scenario.num_steps;
    TokenSequence seq;
    seq.scenario_id = scenario.scenario_id;
    seq.mode = options.mode;
    seq.num_map_tokens = m;
    seq.num_steps = steps;
    seq.selected_agents = select_dynamic_agents(scenario, options.max_agents);

    // Chained motion tokenization: each label is fit from the state the
    // previous labels reconstruct, restarting from GT at first appearance.
    struct MotionTrack {
        std::vector<int> input;
        std::vector<int> target;
        std::vector<double> ace;
    };
    std::vector<MotionTrack> tracks;
    for (int id : seq.selected_agents) {
        const auto& a = scenario.agents[static_cast<std::size_t>(id)];
        MotionTrack tr{std::vector<int>(static_cast<std::size_t>(steps), -1),
                       std::vector<int>(static_cast<std::size_t>(steps), -1),
                       std::vector<double>(static_cast<std::size_t>(steps), std::nan(""))};
        KinState kin;
        bool chained = false;
        for (int t = 0; t < steps; ++t) {
            const auto& st = a.states[static_cast<std::size_t>(t)];
            if (!st.valid) {
                chained = false;
                continue;
            }
            if (!chained) {
                kin = kin_state_from(st);
                tr.input[static_cast<std::size_t>(t)] = motion::kStart;
            } else {
                tr.input[static_cast<std::size_t>(t)] = tr.target[static_cast<std::size_t>(t - 1)];
            }
            if (t + 1 < steps && a.states[static_cast<std::size_t>(t + 1)].valid) {
                const auto fit = best_motion_label(kin, a.shape.length, a.shape.width,
                                                   a.states[static_cast<std::size_t>(t + 1)].pose(), scenario.dt);
                tr.target[static_cast<std::size_t>(t)] = fit.label.index();
                tr.ace[static_cast<std::size_t>(t)] = fit.ace;
                kin = fit.next;
                chained = true;
            } else {
                chained = false;
            }
        }
        tracks.push_back(std::move(tr));
    }

    for (int t = 0; t < steps; ++t) {
        seq.step_begin.push_back(static_cast<int>(seq.tokens.size()));
        for (const auto& l : scenario.traffic_lights) {
            Token tok = traffic_light_token(l, t, l.states[static_cast<std::size_t>(t)]);
            if (t + 1 < steps) tok.target = static_cast<int>(l.states[static_cast<std::size_t>(t + 1)]);
            seq.tokens.push_back(tok);
        }

        std::vector<std::size_t> active;  // positions in selected_agents
        for (std::size_t i = 0; i < seq.selected_agents.size(); ++i) {
            if (scenario.agents[static_cast<std::size_t>(seq.selected_agents[i])].states[static_cast<std::size_t>(t)].valid)
                active.push_back(i);
        }

        if (options.mode == SequenceMode::kFull) {
            Token start = agent_sentinel_token(TokenGroup::kAgentStart, t);
            start.target = active.empty() ? kGateEnd : kGateContinue;
            seq.tokens.push_back(start);
            for (std::size_t k = 0; k < active.size(); ++k) {
                const int id = seq.selected_agents[active[k]];
                const auto& a = scenario.agents[static_cast<std::size_t>(id)];
                const auto& st = a.states[static_cast<std::size_t>(t)];
                const auto anchor = nearest_valid_segment(st.pose(), segments, AnchorPolicy::kRelaxed);
                const auto& seg = segments[static_cast<std::size_t>(anchor.segment_id)];
                const auto rel = encode_relative({st.x, st.y, st.psi, st.vx, st.vy, a.shape}, seg,
                                                 options.quantizer);
                auto as = agent_state_tokens(t, static_cast<int>(k), id, a.type, seg, rel.bins, st.pose());
                as[0].target = static_cast<int>(a.type);
                as[1].target = anchor.segment_id;
                as[2].target_rs = rel.bins;
                as[3].target = (k + 1 < active.size()) ? kGateContinue : kGateEnd;
                seq.tokens.insert(seq.tokens.end(), as.begin(), as.end());
            }
            seq.tokens.push_back(agent_sentinel_token(TokenGroup::kAgentEnd, t));
        }

        for (std::size_t i : active) {
            const int id = seq.selected_agents[i];
            const auto& a = scenario.agents[static_cast<std::size_t>(id)];
            const auto& st = a.states[static_cast<std::size_t>(t)];
            Token mo = motion_token(t, id, a.type, st.pose(), {st.vx, st.vy}, a.shape,
                                    tracks[i].input[static_cast<std::size_t>(t)]);
            mo.target = tracks[i].target[static_cast<std::size_t>(t)];
            mo.target_ace = tracks[i].ace[static_cast<std::size_t>(t)];
            seq.tokens.push_back(mo);
        }
    }
    seq.step_begin.push_back(static_cast<int>(seq.tokens.size()));
    return seq;
}

// ---------------------------------------------------------------------------
// Masks

std::size_t AttentionMask::count() const {
    return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

bool group_rule_allows(const std::vector<Token>& tokens, std::size_t q, std::size_t k) {
    if (q == k) return true;
    const Token& a = tokens[q];
    const Token& b = tokens[k];
    if (b.step > a.step) return false;
    const GroupClass cq = group_class(a.group);
    const GroupClass ck = group_class(b.group);
    if (b.step == a.step) {
        if (cq == ck) return cq == GroupClass::kAgentState ? k < q : true;
        return static_cast<int>(ck) < static_cast<int>(cq);
    }
    if (b.step == a.step - 1) return true;
    return a.owner_kind != OwnerKind::kNone && a.owner_kind == b.owner_kind && a.owner_id == b.owner_id;
}

AttentionMask group_causal_mask(const std::vector<Token>& tokens) {
    AttentionMask mask(tokens.size());
    for (std::size_t q = 0; q < tokens.size(); ++q) {
        for (std::size_t k = 0; k < tokens.size(); ++k) mask.set(q, k, group_rule_allows(tokens, q, k));
    }
    return mask;
}

namespace {

double anchor_distance(const Anchor& a, const Anchor& b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Keeps the `k` nearest (distance, index) candidates; returns the dropped ones.
template <typename Candidates>
void keep_nearest(Candidates& c, int k) {
    if (static_cast<int>(c.size()) <= k) return;
    std::nth_element(c.begin(), c.begin() + k, c.end());
    c.resize(static_cast<std::size_t>(k));
}

}  // namespace

AttentionMask knn_mask(const std::vector<Token>& tokens, const AttentionMask& mask, int k) {
    if (k < 1) throw ConfigError("knn k must be >= 1");
    AttentionMask out = mask;
    for (std::size_t q = 0; q < tokens.size(); ++q) {
        if (!tokens[q].anchor) continue;
        std::vector<std::pair<double, std::size_t>> cand;
        for (std::size_t j = 0; j < tokens.size(); ++j) {
            if (mask(q, j) && tokens[j].anchor) cand.push_back({anchor_distance(*tokens[q].anchor, *tokens[j].anchor), j});
        }
        if (static_cast<int>(cand.size()) <= k) continue;
        auto kept = cand;
        keep_nearest(kept, k);
        for (const auto& c : cand) out.set(q, c.second, false);
        for (const auto& c : kept) out.set(q, c.second, true);
    }
    return out;
}

RelativeDelta relative_deltas(const Anchor& q, const Anchor& k) {
    const Vec2 d = rotate({k.x - q.x, k.y - q.y}, -q.psi);
    return {d.x, d.y, wrap_angle(k.psi - q.psi), k.t - q.t, true};
}

RelativeDelta relative_deltas(const Token& q, const Token& k) {
    if (!q.anchor || !k.anchor) return {};
    return relative_deltas(*q.anchor, *k.anchor);
}

void AttentionPattern::add(int key, const RelativeDelta* delta) {
    keys.push_back(key);
    if (delta) {
        pair.push_back(static_cast<int>(deltas.size()));
        deltas.push_back(*delta);
    } else {
        pair.push_back(-1);
    }
}

void PatternBuilder::sync(const std::vector<Token>& tokens) {
    if (tokens.size() < indexed_) {
        // The stream was replaced; rebuild from scratch.
        indexed_ = 0;
        step_begin_.clear();
        owner_tokens_.clear();
    }
    for (std::size_t i = indexed_; i < tokens.size(); ++i) {
        const Token& t = tokens[i];
        while (static_cast<int>(step_begin_.size()) <= t.step) step_begin_.push_back(static_cast<int>(i));
        if (t.owner_kind != OwnerKind::kNone)
            owner_tokens_[{static_cast<int>(t.owner_kind), t.owner_id}].push_back(static_cast<int>(i));
    }
    indexed_ = tokens.size();
}

void PatternBuilder::truncate(std::size_t n) {
    if (n >= indexed_) return;
    const int cut = static_cast<int>(n);
    for (auto it = owner_tokens_.begin(); it != owner_tokens_.end();) {
        auto& v = it->second;
        while (!v.empty() && v.back() >= cut) v.pop_back();
        it = v.empty() ? owner_tokens_.erase(it) : std::next(it);
    }
    while (!step_begin_.empty() && step_begin_.back() >= cut) step_begin_.pop_back();
    indexed_ = n;
}

AttentionPattern PatternBuilder::self_rows(const std::vector<Token>& tokens, std::size_t first) {
    sync(tokens);
    AttentionPattern pat;
    const int n = static_cast<int>(tokens.size());
    std::vector<int> keys;
    std::vector<std::pair<double, int>> anchored;
    for (std::size_t qi = first; qi < tokens.size(); ++qi) {
        const Token& q = tokens[qi];
        const int t = q.step;
        const int lo = step_begin_[static_cast<std::size_t>(std::max(t - 1, 0))];
        const int hi = (t + 1 < static_cast<int>(step_begin_.size())) ? step_begin_[static_cast<std::size_t>(t + 1)] : n;
        keys.clear();
        if (q.owner_kind != OwnerKind::kNone) {
            const auto& hist = owner_tokens_[{static_cast<int>(q.owner_kind), q.owner_id}];
            for (int k : hist) {
                if (k >= lo) break;
                keys.push_back(k);
            }
        }
        for (int k = lo; k < hi; ++k) {
            if (group_rule_allows(tokens, qi, static_cast<std::size_t>(k))) keys.push_back(k);
        }
        if (q.anchor) {
            anchored.clear();
            for (int k : keys) {
                if (tokens[static_cast<std::size_t>(k)].anchor)
                    anchored.push_back({anchor_distance(*q.anchor, *tokens[static_cast<std::size_t>(k)].anchor), k});
            }
            if (static_cast<int>(anchored.size()) > knn_k_) {
                keep_nearest(anchored, knn_k_);
                std::vector<int> kept;
                kept.reserve(anchored.size());
                for (const auto& a : anchored) kept.push_back(a.second);
                std::sort(kept.begin(), kept.end());
                std::vector<int> filtered;
                for (int k : keys) {
                    if (!tokens[static_cast<std::size_t>(k)].anchor || std::binary_search(kept.begin(), kept.end(), k))
                        filtered.push_back(k);
                }
                keys.swap(filtered);
            }
        }
        for (int k : keys) {
            const Token& kt = tokens[static_cast<std::size_t>(k)];
            if (q.anchor && kt.anchor) {
                const RelativeDelta d = relative_deltas(*q.anchor, *kt.anchor);
                pat.add(k, &d);
            } else {
                pat.add(k, nullptr);
            }
        }
        pat.end_row();
    }
    return pat;
}

Anchor map_anchor(const MapSegment& s) { return {s.center.x, s.center.y, s.heading, 0.0}; }

AttentionPattern map_cross_rows(const std::vector<Token>& tokens, std::size_t first,
                                const std::vector<MapSegment>& segments, int knn_k) {
    AttentionPattern pat;
    const int m = static_cast<int>(segments.size());
    std::vector<std::pair<double, int>> cand;
    for (std::size_t qi = first; qi < tokens.size(); ++qi) {
        const Token& q = tokens[qi];
        if (!q.anchor) {
            for (int j = 0; j < m; ++j) pat.add(j, nullptr);
            pat.end_row();
            continue;
        }
        cand.clear();
        for (int j = 0; j < m; ++j) cand.push_back({anchor_distance(*q.anchor, map_anchor(segments[static_cast<std::size_t>(j)])), j});
        keep_nearest(cand, knn_k);
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
        for (const auto& c : cand) {
            Anchor key = map_anchor(segments[static_cast<std::size_t>(c.second)]);
            key.t = q.anchor->t;  // the map is static
            const RelativeDelta d = relative_deltas(*q.anchor, key);
            pat.add(c.second, &d);
        }
        pat.end_row();
    }
    return pat;
}

AttentionPattern map_self_rows(const std::vector<MapSegment>& segments, int knn_k) {
    AttentionPattern pat;
    const int m = static_cast<int>(segments.size());
    std::vector<std::pair<double, int>> cand;
    for (int i = 0; i < m; ++i) {
        const Anchor qa = map_anchor(segments[static_cast<std::size_t>(i)]);
        cand.clear();
        for (int j = 0; j < m; ++j) cand.push_back({anchor_distance(qa, map_anchor(segments[static_cast<std::size_t>(j)])), j});
        keep_nearest(cand, knn_k);
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
        for (const auto& c : cand) {
            const RelativeDelta d = relative_deltas(qa, map_anchor(segments[static_cast<std::size_t>(c.second)]));
            pat.add(c.second, &d);
        }
        pat.end_row();
    }
    return pat;
}

// ---------------------------------------------------------------------------
// Serialization

std::string token_to_json(const Token& t) {
    json j;
    j["group"] = to_string(t.group);
    j["step"] = t.step;
    if (t.owner_kind == OwnerKind::kNone) {
        j["owner"] = nullptr;
    } else {
        j["owner"] = {{"kind", t.owner_kind == OwnerKind::kAgent ? "agent" : "light"}, {"id", t.owner_id}};
    }
    j["intra"] = t.intra_index;
    j["anchor"] = t.anchor ? json::array({t.anchor->x, t.anchor->y, t.anchor->psi, t.anchor->t}) : json(nullptr);
    json payload = json::object();
    switch (t.group) {
        case TokenGroup::kTrafficLight:
            payload["state"] = t.signal;
            payload["map_id"] = t.map_id;
            break;
        case TokenGroup::kAgentType: payload["type"] = t.agent_type; break;
        case TokenGroup::kAgentMapSeg:
            payload["type"] = t.agent_type;
            payload["map_id"] = t.map_id;
            break;
        case TokenGroup::kAgentRelState:
            payload["type"] = t.agent_type;
            payload["map_id"] = t.map_id;
            payload["rs"] = t.rs_bins;
            break;
        case TokenGroup::kMotion:
            payload["type"] = t.agent_type;
            payload["motion"] = t.motion;
            payload["velocity"] = t.velocity_local;
            payload["shape"] = t.shape;
            break;
        default: break;
    }
    j["payload"] = payload;
    if (t.target_rs) {
        j["target"] = *t.target_rs;
    } else if (t.target >= 0) {
        j["target"] = t.target;
    } else {
        j["target"] = nullptr;
    }
    if (t.group == TokenGroup::kMotion && t.target >= 0) j["target_ace"] = t.target_ace;
    return j.dump();
}

Token token_from_json(std::string_view line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("token line: ") + e.what());
    }
    try {
        Token t;
        t.group = token_group_from_string(j.at("group").get<std::string>());
        t.step = j.at("step").get<int>();
        if (!j.at("owner").is_null()) {
            t.owner_kind = j["owner"].at("kind").get<std::string>() == "agent" ? OwnerKind::kAgent : OwnerKind::kLight;
            t.owner_id = j["owner"].at("id").get<int>();
        }
        t.intra_index = j.at("intra").get<int>();
        if (!j.at("anchor").is_null()) {
            const auto& a = j["anchor"];
            t.anchor = Anchor{a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>(), a.at(3).get<double>()};
        }
        const auto& p = j.at("payload");
        if (p.contains("state")) t.signal = p["state"].get<int>();
        if (p.contains("type")) t.agent_type = p["type"].get<int>();
        if (p.contains("map_id")) t.map_id = p["map_id"].get<int>();
        if (p.contains("rs")) t.rs_bins = p["rs"].get<std::array<int, kNumRsFields>>();
        if (p.contains("motion")) t.motion = p["motion"].get<int>();
        if (p.contains("velocity")) t.velocity_local = p["velocity"].get<std::array<double, 2>>();
        if (p.contains("shape")) t.shape = p["shape"].get<std::array<double, 3>>();
        const auto& target = j.at("target");
        if (target.is_array()) {
            t.target_rs = target.get<std::array<int, kNumRsFields>>();
        } else if (!target.is_null()) {
            t.target = target.get<int>();
        }
        if (j.contains("target_ace")) t.target_ace = j["target_ace"].get<double>();
        return t;
    } catch (const json::exception& e) {
        throw FormatError(std::string("token line: ") + e.what());
    }
}

std::string sequence_to_jsonl(const TokenSequence& seq) {
    std::string out;
    for (const auto& t : seq.tokens) {
        out += token_to_json(t);
        out += '\n';
    }
    return out;
}

}  // namespace scenestreamer
