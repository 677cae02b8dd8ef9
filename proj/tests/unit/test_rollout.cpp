#include <doctest.h>

#include <set>

#include <nlohmann/json.hpp>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/rollout.hpp"
#include "support/toy.hpp"

using namespace scenestreamer;

namespace {

ScenarioDescription scene(int agents = 3, std::uint64_t seed = 5) {
    return synth_scenario(SynthTemplate::kIntersection, agents, seed);
}

int total_tokens(const std::vector<std::string>& log, int lights) {
    int n = 0;
    std::map<int, int> alive;
    for (std::size_t i = 1; i < log.size(); ++i) {
        const auto ev = nlohmann::json::parse(log[i]);
        for (const auto& s : ev["spawns"]) alive[s["id"].get<int>()] = 1;
        n += expected_step_tokens(SequenceMode::kFull, lights, static_cast<int>(alive.size()));
        for (const auto& r : ev["retired"]) alive.erase(r.get<int>());
    }
    return n;
}

}  // namespace

TEST_CASE("session: incremental decoding matches the teacher-forced pass") {
    const auto s = toy::truncate(scene(2), 3);
    nn::Model<float> model(toy::small_config(), 3);
    const auto segs = segment_polylines(s, default_reference(s));
    const auto seq = build_sequence(s, segs);
    const auto ex = nn::prepare_example<float>(seq, segs, model.config().knn_k);
    nn::Tape<float> tape(false);
    const auto mt = model.encode_map(tape, ex.map);
    const auto h = model.decode(tape, model.embed_tokens(tape, seq.tokens, 0), mt, ex.self_pattern, ex.self_rel,
                                ex.cross_pattern, ex.cross_rel, nullptr);
    const auto& z = tape.value(model.motion_logits(tape, h));

    nn::InferenceSession sess(model, segs);
    for (int t = 0; t < seq.num_steps; ++t) {
        const auto b = seq.tokens.begin();
        sess.extend({b + seq.step_begin[static_cast<std::size_t>(t)], b + seq.step_begin[static_cast<std::size_t>(t + 1)]});
    }
    REQUIRE(sess.size() == seq.tokens.size());
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        if (seq.tokens[i].group != TokenGroup::kMotion) continue;
        std::vector<double> logits(static_cast<std::size_t>(z.cols()));
        for (Eigen::Index c = 0; c < z.cols(); ++c) logits[static_cast<std::size_t>(c)] = z(static_cast<Eigen::Index>(i), c);
        const auto ref = softmax(logits);
        const auto got = sess.motion_probs(i);
        REQUIRE(got.size() == 1090);
        CHECK(got.back() == 0.0);
        double err = 0;
        for (std::size_t c = 0; c < ref.size(); ++c) err = std::max(err, std::abs(ref[c] - got[c]));
        CHECK(err < 1e-5);
    }
}

TEST_CASE("session: truncation rolls back exactly") {
    const auto s = toy::truncate(scene(2), 2);
    nn::Model<float> model(toy::small_config(), 4);
    const auto segs = segment_polylines(s, default_reference(s));
    const auto seq = build_sequence(s, segs);
    const std::size_t half = static_cast<std::size_t>(seq.step_begin[1]);
    const std::vector<Token> a(seq.tokens.begin(), seq.tokens.begin() + static_cast<std::ptrdiff_t>(half));
    const std::vector<Token> b(seq.tokens.begin() + static_cast<std::ptrdiff_t>(half), seq.tokens.end());

    nn::InferenceSession ref(model, segs);
    ref.extend(a);
    ref.extend(b);
    nn::InferenceSession s2(model, segs);
    s2.extend(a);
    s2.extend(b);
    s2.truncate(half);
    s2.extend(b);
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) CHECK(ref.gate_probs(i) == s2.gate_probs(i));
}

TEST_CASE("session: head distributions") {
    const auto s = toy::truncate(scene(2), 2);
    nn::Model<float> model(toy::small_config(), 4);
    const auto segs = segment_polylines(s, default_reference(s));
    const auto seq = build_sequence(s, segs);
    nn::InferenceSession sess(model, segs);
    sess.extend(seq.tokens);
    auto sums_to_one = [](const std::vector<double>& p) {
        double t = 0;
        for (double v : p) {
            CHECK(v >= 0.0);
            t += v;
        }
        CHECK(t == doctest::Approx(1.0).epsilon(1e-6));
    };
    sums_to_one(sess.tl_probs(0));
    sums_to_one(sess.type_probs(0));
    sums_to_one(sess.gate_probs(0));
    const auto mp = sess.map_probs(0);
    CHECK(mp.size() == segs.size());
    sums_to_one(mp);
    sums_to_one(sess.motion_probs(0));
    sums_to_one(sess.rs_probs(0, {1, 2, 3}));
    Rng r1(9), r2(9);
    CHECK(sess.sample_rs(3, SampleStrategy::kGreedy, r1, 0.95) == sess.sample_rs(3, SampleStrategy::kGreedy, r2, 0.95));
}

TEST_CASE("rollout: motion prediction keeps the population and forces the first steps") {
    const auto s = toy::truncate(scene(3), 6);
    nn::Model<float> model(toy::small_config(), 1);
    RolloutConfig cfg;
    cfg.mode = RolloutMode::kMotionPrediction;
    cfg.seed = 11;
    RolloutEngine eng(model, s, cfg);
    const auto r = eng.run();
    CHECK(r.injections == 0);
    const auto& ex = r.exported;
    validate(ex);
    CHECK(parse_scenario(serialize_scenario(ex)) == ex);
    for (std::size_t i = 0; i < s.agents.size(); ++i) {
        const bool start = s.agents[i].states[0].valid;
        for (int t = 0; t < ex.num_steps; ++t) CHECK(ex.agents[i].states[static_cast<std::size_t>(t)].valid == start);
    }
    // First two motion steps follow the chained GT labels.
    const auto segs = segment_polylines(s, default_reference(s));
    const auto seq = build_sequence(s, segs);
    for (int t = 0; t < 2; ++t) {
        const auto ev = nlohmann::json::parse(r.log[static_cast<std::size_t>(t + 1)]);
        for (const auto& m : ev["motion"]) {
            CHECK(m["forced"].get<bool>());
            const int id = m["id"].get<int>();
            for (const auto& tok : seq.tokens)
                if (tok.group == TokenGroup::kMotion && tok.step == t && tok.owner_id == id) CHECK(tok.target == m["label"].get<int>());
        }
    }
    const auto ev2 = nlohmann::json::parse(r.log[3]);
    for (const auto& m : ev2["motion"]) CHECK_FALSE(m["forced"].get<bool>());
    CHECK(static_cast<int>(eng.session().size()) == total_tokens(r.log, static_cast<int>(s.traffic_lights.size())));
}

TEST_CASE("rollout: densification injects without overlaps and replays from its log") {
    const auto s = toy::truncate(scene(2), 4);
    nn::Model<float> model(toy::small_config(), 2);
    RolloutConfig cfg;
    cfg.mode = RolloutMode::kDensification;
    cfg.target_agents = 8;
    cfg.seed = 3;
    RolloutEngine eng(model, s, cfg);
    const auto r = eng.run();
    CHECK(r.injections > 0);
    for (const auto& st : eng.state().agents) CHECK(st.id >= 0);
    // ids of injected agents are fresh and increasing
    int last = static_cast<int>(s.agents.size()) - 1;
    for (std::size_t i = 1; i < r.log.size(); ++i) {
        const auto ev = nlohmann::json::parse(r.log[i]);
        for (const auto& sp : ev["spawns"]) {
            if (sp["source"] != "sampled") continue;
            CHECK(sp["id"].get<int>() > last);
            last = sp["id"].get<int>();
        }
    }
    const auto replay = replay_log(r.log);
    CHECK(replay == r.final_state.trajectories);
    validate(r.exported);
    CHECK(static_cast<int>(eng.session().size()) == total_tokens(r.log, static_cast<int>(s.traffic_lights.size())));

    RolloutEngine again(model, s, cfg);
    CHECK(serialize_scenario(again.run().exported) == serialize_scenario(r.exported));
}

TEST_CASE("rollout: full generation starts empty and marks late agents invalid") {
    const auto s = toy::truncate(scene(2), 4);
    nn::Model<float> model(toy::small_config(), 5);
    RolloutConfig cfg;
    cfg.mode = RolloutMode::kFullGeneration;
    cfg.seed = 1;
    cfg.max_agents = 6;
    RolloutEngine eng(model, s, cfg);
    const auto r = eng.run();
    validate(r.exported);
    for (std::size_t i = 0; i < s.agents.size(); ++i)
        for (const auto& st : r.exported.agents[i].states) CHECK_FALSE(st.valid);
    for (std::size_t i = 1; i < r.log.size(); ++i) {
        const auto ev = nlohmann::json::parse(r.log[i]);
        const int t = ev["step"].get<int>();
        for (const auto& sp : ev["spawns"]) {
            const auto& a = r.exported.agents[static_cast<std::size_t>(sp["id"].get<int>())];
            for (int k = 0; k < t; ++k) CHECK_FALSE(a.states[static_cast<std::size_t>(k)].valid);
            CHECK(a.states[static_cast<std::size_t>(t)].valid);
        }
    }
}

TEST_CASE("rollout: closed loop keeps the ego on its external trajectory") {
    const auto s = toy::truncate(scene(3), 5);
    nn::Model<float> model(toy::small_config(), 6);
    RolloutConfig cfg;
    cfg.mode = RolloutMode::kClosedLoop;
    cfg.seed = 4;
    RolloutEngine eng(model, s, cfg);
    const auto r = eng.run();
    const auto& ego = r.exported.agents[static_cast<std::size_t>(s.sdc_index)];
    const auto& gt = s.agents[static_cast<std::size_t>(s.sdc_index)];
    for (int t = 0; t < 5; ++t) {
        const auto& a = ego.states[static_cast<std::size_t>(t)];
        const auto& b = gt.states[static_cast<std::size_t>(t)];
        REQUIRE(a.valid);
        CHECK(a.x == doctest::Approx(b.x).epsilon(1e-9));
        CHECK(a.y == doctest::Approx(b.y).epsilon(1e-9));
    }
    CHECK(replay_log(r.log) == r.final_state.trajectories);
}

TEST_CASE("rollout: saturated scene exhausts the injection retries") {
    const auto s = toy::truncate(scene(1), 2);
    nn::Model<float> model(toy::small_config(), 7);
    RolloutConfig cfg;
    cfg.mode = RolloutMode::kDensification;
    cfg.target_agents = 4;
    cfg.injection_retries = 5;
    cfg.reject_clamped = false;
    RolloutEngine eng(model, s, cfg);
    eng.state_force(0, KinState{0, 0, 0, 0}, std::nullopt, AgentType::kVehicle, AgentShape{5000, 5000, 2});
    eng.step();
    const auto ev = nlohmann::json::parse(eng.log().back());
    CHECK(ev["injection_failures"].get<int>() == 1);
    CHECK(ev["rejections"].get<int>() == 6);
    CHECK(eng.state().agents.size() == 1);
}

TEST_CASE("rollout: agents far off the map retire and ids are not reused") {
    const auto s = toy::truncate(scene(1), 3);
    nn::Model<float> model(toy::small_config(), 8);
    RolloutConfig cfg;
    cfg.mode = RolloutMode::kDensification;
    cfg.target_agents = 1;
    RolloutEngine eng(model, s, cfg);
    const int far_id = eng.state().next_id;
    eng.state_force(far_id, KinState{5000, 5000, 0, 0});
    eng.step();
    const auto ev = nlohmann::json::parse(eng.log().back());
    REQUIRE(ev["retired"].size() == 1);
    CHECK(ev["retired"][0].get<int>() == far_id);
    CHECK(eng.state().next_id > far_id);
}

TEST_CASE("rollout: pretrain layout only supports motion prediction") {
    RolloutConfig cfg;
    cfg.layout = SequenceMode::kPretrain;
    cfg.mode = RolloutMode::kDensification;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.mode = RolloutMode::kMotionPrediction;
    const auto s = toy::truncate(scene(2), 3);
    nn::Model<float> model(toy::small_config(), 8);
    RolloutEngine eng(model, s, cfg);
    const auto r = eng.run();
    CHECK(static_cast<int>(eng.session().size()) ==
          3 * expected_step_tokens(SequenceMode::kPretrain, static_cast<int>(s.traffic_lights.size()), 2));
    CHECK(replay_log(r.log) == r.final_state.trajectories);
}
