#include "doctest.h"

#include <cmath>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/kinematics.hpp"
#include "scenestreamer/sequence.hpp"

using namespace scenestreamer;

namespace {

ScenarioDescription tiny(int steps, int agents) {
    ScenarioDescription s;
    s.scenario_id = "tiny";
    s.num_steps = steps;
    s.polylines.push_back({"lane", MapType::kLane, {{-20, 0, 0}, {60, 0, 0}}});
    for (int i = 0; i < agents; ++i) {
        AgentRecord a;
        a.id = i;
        KinState k{-10.0 + 12.0 * i, 0, 0, 4};
        for (int t = 0; t < steps; ++t) {
            a.states.push_back({k.x, k.y, k.psi, k.v, 0, true});
            k = step_bicycle(k, 0, 0, s.dt);
        }
        s.agents.push_back(a);
    }
    TrafficLightRecord l;
    l.id = 0;
    l.segment = 1;
    l.stop_point = {5, 0};
    l.states.assign(static_cast<std::size_t>(steps), SignalState::kGreen);
    l.states.back() = SignalState::kRed;
    s.traffic_lights.push_back(l);
    return s;
}

}  // namespace

TEST_CASE("token counts follow the ordering rule") {
    const auto s = tiny(2, 1);
    const auto segs = segment_polylines(s, {});
    const auto seq = build_sequence(s, segs, {});
    CHECK(seq.tokens.size() == 16);
    CHECK(expected_step_tokens(SequenceMode::kFull, 1, 1) == 8);
    CHECK(seq.num_map_tokens == static_cast<int>(segs.size()));
    const TokenGroup order[8] = {TokenGroup::kTrafficLight, TokenGroup::kAgentStart, TokenGroup::kAgentSoa,
                                 TokenGroup::kAgentType,    TokenGroup::kAgentMapSeg, TokenGroup::kAgentRelState,
                                 TokenGroup::kAgentEnd,     TokenGroup::kMotion};
    for (int i = 0; i < 16; ++i) CHECK(seq.tokens[static_cast<std::size_t>(i)].group == order[i % 8]);
    CHECK(seq.step_begin == std::vector<int>{0, 8, 16});
    // TL target is next state; none at the last step.
    CHECK(seq.tokens[0].target == static_cast<int>(SignalState::kRed));
    CHECK(seq.tokens[8].target == -1);
    // First appearance uses the start label.
    CHECK(seq.tokens[7].motion == motion::kStart);
    CHECK(seq.tokens[7].target == 544);
    CHECK(seq.tokens[15].motion == 544);
    CHECK_FALSE(seq.tokens[15].has_target());
    CHECK(seq.tokens[2].intra_index == 0);
    CHECK(seq.tokens[5].intra_index == 3);
    CHECK(seq.tokens[4].target_rs.has_value());
}

TEST_CASE("pretrain mode has no agent-state tokens") {
    const auto s = tiny(3, 2);
    const auto seq = build_sequence(s, segment_polylines(s, {}), {SequenceMode::kPretrain});
    for (const auto& t : seq.tokens) CHECK(group_class(t.group) != GroupClass::kAgentState);
    CHECK(seq.tokens.size() == static_cast<std::size_t>(3 * expected_step_tokens(SequenceMode::kPretrain, 1, 2)));
}

TEST_CASE("invalid next step drops the motion target") {
    auto s = tiny(3, 1);
    s.agents[0].states[1].valid = false;
    const auto seq = build_sequence(s, segment_polylines(s, {}), {});
    int mo = 0;
    for (const auto& t : seq.tokens) {
        if (t.group != TokenGroup::kMotion) continue;
        if (t.step == 0) CHECK_FALSE(t.has_target());
        if (t.step == 2) CHECK(t.motion == motion::kStart);
        ++mo;
    }
    CHECK(mo == 2);
}

TEST_CASE("light beyond the segment list is a consistency error") {
    auto s = tiny(2, 1);
    s.traffic_lights[0].segment = 99;
    CHECK_THROWS_AS(build_sequence(s, segment_polylines(s, {}), {}), ConsistencyError);
}

TEST_CASE("motion targets reconstruct with the stored ace") {
    const auto s = synth_scenario(SynthTemplate::kCurve, 3, 4);
    const auto seq = build_sequence(s, segment_polylines(s, default_reference(s)), {});
    for (const auto& t : seq.tokens) {
        if (t.group != TokenGroup::kMotion || !t.has_target()) continue;
        CHECK(t.target_ace < 1e-9);  // speed re-projected from (vx, vy) at the chain start
    }
}

TEST_CASE("max agents keeps the most dynamic") {
    auto s = tiny(3, 3);
    for (auto& st : s.agents[1].states) st.vx = 0;
    for (int t = 0; t < 3; ++t) s.agents[1].states[static_cast<std::size_t>(t)].x = 2.0;
    const auto ids = select_dynamic_agents(s, 2);
    CHECK(ids == std::vector<int>{0, 2});
}

TEST_CASE("mask examples") {
    const auto s = tiny(2, 2);
    const auto seq = build_sequence(s, segment_polylines(s, {}), {});
    const auto m = group_causal_mask(seq);
    const auto& tk = seq.tokens;
    auto find = [&](TokenGroup g, int step, int owner) {
        for (std::size_t i = 0; i < tk.size(); ++i)
            if (tk[i].group == g && tk[i].step == step && (owner < 0 || tk[i].owner_id == owner)) return i;
        FAIL("token not found");
        return std::size_t{0};
    };
    CHECK(m(find(TokenGroup::kMotion, 1, 0), find(TokenGroup::kTrafficLight, 1, -1)));
    CHECK(m(find(TokenGroup::kTrafficLight, 1, -1), find(TokenGroup::kMotion, 0, 1)));
    CHECK_FALSE(m(find(TokenGroup::kAgentRelState, 0, 0), find(TokenGroup::kAgentSoa, 0, 1)));
    CHECK(m(find(TokenGroup::kAgentSoa, 0, 1), find(TokenGroup::kAgentRelState, 0, 0)));
    CHECK(m(find(TokenGroup::kMotion, 0, 0), find(TokenGroup::kMotion, 0, 1)));
    CHECK(m(find(TokenGroup::kMotion, 0, 1), find(TokenGroup::kMotion, 0, 0)));
    CHECK_FALSE(m(find(TokenGroup::kTrafficLight, 0, -1), find(TokenGroup::kMotion, 0, 0)));
    CHECK_FALSE(m(find(TokenGroup::kMotion, 0, 0), find(TokenGroup::kMotion, 1, 0)));
}

TEST_CASE("knn mask examples") {
    std::vector<Token> tk(4);
    for (int i = 0; i < 4; ++i) {
        tk[static_cast<std::size_t>(i)].group = TokenGroup::kMotion;
        tk[static_cast<std::size_t>(i)].anchor = Anchor{static_cast<double>(i), 0, 0, 0};
    }
    const auto full = group_causal_mask(tk);
    const auto k2 = knn_mask(tk, full, 2);
    CHECK(k2(0, 0));
    CHECK(k2(0, 1));
    CHECK_FALSE(k2(0, 2));
    CHECK_FALSE(k2(0, 3));
    CHECK(knn_mask(tk, full, 4) == full);
    tk[0].anchor.reset();
    const auto k1 = knn_mask(tk, group_causal_mask(tk), 1);
    for (int j = 0; j < 4; ++j) CHECK(k1(0, static_cast<std::size_t>(j)));
    CHECK_THROWS_AS(knn_mask(tk, full, 0), ConfigError);
}

TEST_CASE("relative deltas") {
    auto d = relative_deltas(Anchor{1, 2, 0.3, 4}, Anchor{1, 2, 0.3, 4});
    CHECK(d.dx == 0.0);
    CHECK(d.dpsi == 0.0);
    CHECK(d.anchored);
    d = relative_deltas(Anchor{0, 0, kPi / 2, 1}, Anchor{0, 1, kPi / 2, 0});
    CHECK(d.dx == doctest::Approx(1.0));
    CHECK(std::abs(d.dy) < 1e-12);
    CHECK(d.dt == -1.0);
    Token a, b;
    a.anchor = Anchor{};
    d = relative_deltas(a, b);
    CHECK_FALSE(d.anchored);
    CHECK(d.dx == 0.0);
}

TEST_CASE("pattern builder matches the dense masks") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const auto s = synth_scenario(SynthTemplate::kIntersection, 5, seed);
        const auto segs = segment_polylines(s, default_reference(s));
        const auto seq = build_sequence(s, segs, {});
        const int k = 6;
        const auto dense = knn_mask(seq.tokens, group_causal_mask(seq.tokens), k);
        PatternBuilder pb(k);
        // Build in two chunks to exercise the incremental path.
        std::vector<Token> stream(seq.tokens.begin(), seq.tokens.begin() + seq.step_begin[5]);
        auto p1 = pb.self_rows(stream, 0);
        stream = seq.tokens;
        auto p2 = pb.self_rows(stream, static_cast<std::size_t>(seq.step_begin[5]));
        AttentionMask got(seq.tokens.size());
        auto fill = [&](const AttentionPattern& p, std::size_t first) {
            for (int r = 0; r < p.rows(); ++r) {
                for (int e = p.row_begin[static_cast<std::size_t>(r)]; e < p.row_begin[static_cast<std::size_t>(r) + 1]; ++e) {
                    got.set(first + static_cast<std::size_t>(r), static_cast<std::size_t>(p.keys[static_cast<std::size_t>(e)]), true);
                    const bool both = seq.tokens[first + static_cast<std::size_t>(r)].anchor &&
                                      seq.tokens[static_cast<std::size_t>(p.keys[static_cast<std::size_t>(e)])].anchor;
                    CHECK((p.pair[static_cast<std::size_t>(e)] >= 0) == both);
                }
            }
        };
        fill(p1, 0);
        fill(p2, static_cast<std::size_t>(seq.step_begin[5]));
        CHECK(got == dense);
    }
}

TEST_CASE("map cross rows pick the nearest segments") {
    const auto s = synth_scenario(SynthTemplate::kStraight, 2, 3);
    const auto segs = segment_polylines(s, default_reference(s));
    const auto seq = build_sequence(s, segs, {});
    const auto p = map_cross_rows(seq.tokens, 0, segs, 8);
    REQUIRE(p.rows() == static_cast<int>(seq.tokens.size()));
    for (int r = 0; r < p.rows(); ++r) {
        const int n = p.row_begin[static_cast<std::size_t>(r) + 1] - p.row_begin[static_cast<std::size_t>(r)];
        if (seq.tokens[static_cast<std::size_t>(r)].anchor) CHECK(n == std::min<int>(8, static_cast<int>(segs.size())));
        else CHECK(n == static_cast<int>(segs.size()));
    }
}

TEST_CASE("jsonl round trip") {
    const auto s = synth_scenario(SynthTemplate::kStraight, 2, 1);
    const auto seq = build_sequence(s, segment_polylines(s, default_reference(s)), {});
    for (const auto& t : seq.tokens) {
        const auto back = token_from_json(token_to_json(t));
        CHECK(back.group == t.group);
        CHECK(back.step == t.step);
        CHECK(back.owner_id == t.owner_id);
        CHECK(back.target == t.target);
        CHECK(back.target_rs == t.target_rs);
        CHECK(back.motion == t.motion);
        CHECK(back.rs_bins == t.rs_bins);
        CHECK(token_to_json(back) == token_to_json(t));
    }
    CHECK_THROWS_AS(token_from_json("{bad"), FormatError);
}
