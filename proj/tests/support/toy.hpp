#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "scenestreamer/kinematics.hpp"
#include "scenestreamer/map_codec.hpp"
#include "scenestreamer/nn/model.hpp"
#include "scenestreamer/scenario.hpp"
#include "scenestreamer/sequence.hpp"

namespace toy {

using namespace scenestreamer;

inline ScenarioDescription truncate(ScenarioDescription s, int steps) {
    s.num_steps = steps;
    for (auto& a : s.agents) a.states.resize(static_cast<std::size_t>(steps));
    for (auto& l : s.traffic_lights) l.states.resize(static_cast<std::size_t>(steps));
    return s;
}

/// Keeps only polylines whose points come within `radius` of the SDC start.
inline ScenarioDescription crop_map(ScenarioDescription s, double radius) {
    const auto& p0 = s.agents.at(static_cast<std::size_t>(s.sdc_index)).states[0];
    std::vector<MapPolyline> kept;
    for (auto& pl : s.polylines) {
        bool near = false;
        for (const auto& q : pl.points) near = near || std::hypot(q.x - p0.x, q.y - p0.y) < radius;
        if (near) kept.push_back(pl);
    }
    s.polylines = kept;
    return s;
}

inline nn::ModelConfig tiny_config() {
    nn::ModelConfig c;
    c.d_model = 8;
    c.heads = 2;
    c.encoder_layers = 1;
    c.decoder_layers = 2;
    c.rs_layers = 1;
    c.ffn_mult = 2;
    c.rel_hidden = 4;
    c.max_map_tokens = 64;
    c.agent_id_vocab = 8;
    c.light_id_vocab = 4;
    c.intra_vocab = 16;
    c.knn_k = 6;
    return c;
}

/// Small but complete model for rollout tests on synthetic scenes.
inline nn::ModelConfig small_config() {
    nn::ModelConfig c = tiny_config();
    c.d_model = 16;
    c.rel_hidden = 8;
    c.max_map_tokens = 3000;
    c.agent_id_vocab = 64;
    c.intra_vocab = 128;
    c.knn_k = 8;
    return c;
}

/// Two 30 m lanes, two agents driving on-grid controls, one light.
inline ScenarioDescription tiny_scenario(int steps = 2) {
    ScenarioDescription s;
    s.scenario_id = "toy";
    s.num_steps = steps;
    s.polylines.push_back({"lane0", MapType::kLane, {{-5, 0, 0}, {25, 0, 0}}});
    s.polylines.push_back({"lane1", MapType::kLane, {{25, 3.5, 0}, {-5, 3.5, 0}}});
    s.polylines.push_back({"edge", MapType::kRoadBoundaryLine, {{-5, -2, 0}, {25, -2, 0}}});
    const KinState starts[2] = {{0, 0, 0, 4}, {20, 3.5, kPi - 1e-3, 3}};
    const int labels[2] = {17 * 33 + 16, 16 * 33 + 17};
    for (int i = 0; i < 2; ++i) {
        AgentRecord a;
        a.id = i;
        a.type = i == 0 ? AgentType::kVehicle : AgentType::kCyclist;
        a.shape = i == 0 ? AgentShape{4.5, 2.0, 1.6} : AgentShape{1.8, 0.7, 1.7};
        KinState k = starts[i];
        for (int t = 0; t < steps; ++t) {
            a.states.push_back({k.x, k.y, wrap_angle(k.psi), k.v * std::cos(k.psi), k.v * std::sin(k.psi), true});
            k = apply_label(k, MotionLabel(labels[i]), s.dt);
        }
        s.agents.push_back(a);
    }
    TrafficLightRecord l;
    l.id = 0;
    l.segment = 2;
    l.stop_point = {22, 0};
    for (int t = 0; t < steps; ++t) l.states.push_back(t % 2 ? SignalState::kRed : SignalState::kGreen);
    s.traffic_lights.push_back(l);
    return s;
}

template <typename T>
nn::PreparedExample<T> tiny_example(int knn_k, SequenceMode mode = SequenceMode::kFull, int steps = 2) {
    const auto s = tiny_scenario(steps);
    auto segs = segment_polylines(s, default_reference(s));
    SequenceOptions opt;
    opt.mode = mode;
    const auto seq = build_sequence(s, segs, opt);
    return nn::prepare_example<T>(seq, segs, knn_k);
}

struct BlockCheck {
    std::string name;
    double rel_error = 0.0;
    double grad_norm = 0.0;
    double abs_error = 0.0;
    int checked = 0;
};

/// Central differences on a subset of every parameter block: all entries of
/// small blocks, otherwise the largest analytic entries plus random ones.
template <typename T, typename LossFn>
std::vector<BlockCheck> gradient_check(nn::Model<T>& model, LossFn&& loss_fn, double h = 1e-6, int per_block = 24) {
    model.zero_grad();
    {
        nn::Tape<T> tape(true);
        auto l = loss_fn(tape);
        tape.backward(l);
    }
    auto eval = [&] {
        nn::Tape<T> tape(false);
        return static_cast<double>(tape.scalar(loss_fn(tape)));
    };
    Rng rng(99);
    std::vector<BlockCheck> out;
    for (auto* p : model.parameters()) {
        const auto n = p->value.size();
        std::vector<Eigen::Index> idx;
        if (n <= 2 * per_block) {
            for (Eigen::Index i = 0; i < n; ++i) idx.push_back(i);
        } else {
            std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
            for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
            std::partial_sort(order.begin(), order.begin() + per_block, order.end(), [&](auto a, auto b) {
                return std::abs(p->grad.data()[a]) > std::abs(p->grad.data()[b]);
            });
            idx.assign(order.begin(), order.begin() + per_block);
            for (int k = 0; k < per_block / 2; ++k) idx.push_back(static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n))));
        }
        double diff = 0.0, na = 0.0, nn_ = 0.0;
        for (auto i : idx) {
            T& x = p->value.data()[i];
            const T orig = x;
            x = orig + static_cast<T>(h);
            const double up = eval();
            x = orig - static_cast<T>(h);
            const double down = eval();
            x = orig;
            const double num = (up - down) / (2 * h);
            const double ana = static_cast<double>(p->grad.data()[i]);
            diff += (num - ana) * (num - ana);
            na += ana * ana;
            nn_ += num * num;
        }
        // The floor keeps blocks whose exact gradient is zero (e.g. key biases,
        // which shift every score of a row equally) from dividing noise by noise.
        const double scale = std::max({std::sqrt(na), std::sqrt(nn_), 1e-6});
        out.push_back({p->name, std::sqrt(diff) / scale, std::sqrt(na), std::sqrt(diff), static_cast<int>(idx.size())});
    }
    return out;
}

}  // namespace toy
