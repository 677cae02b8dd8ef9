#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "scenestreamer/kinematics.hpp"
#include "scenestreamer/map_codec.hpp"
#include "scenestreamer/metrics.hpp"
#include "scenestreamer/nn/inference.hpp"
#include "scenestreamer/sampling.hpp"
#include "scenestreamer/scenario.hpp"
#include "scenestreamer/sequence.hpp"
#include "scenestreamer/state_codec.hpp"

namespace scenestreamer {

enum class RolloutMode { kMotionPrediction, kFullGeneration, kDensification, kClosedLoop };
std::string_view to_string(RolloutMode m);
RolloutMode rollout_mode_from_string(std::string_view s);

struct RolloutConfig {
    RolloutMode mode = RolloutMode::kMotionPrediction;
    int horizon = 0;          // steps to produce; 0 = the scenario's length
    int max_agents = 128;
    int injection_retries = 5;
    int target_agents = 0;    // densification target; 0 = max_agents
    bool force_end_logit_off = true;  // densification: END masked until the target is reached
    std::uint64_t seed = 0;
    SampleStrategy tl_strategy = SampleStrategy::kSoftmax;
    SampleStrategy type_strategy = SampleStrategy::kSoftmax;
    SampleStrategy map_strategy = SampleStrategy::kSoftmax;
    SampleStrategy rs_strategy = SampleStrategy::kSoftmax;
    SampleStrategy gate_strategy = SampleStrategy::kSoftmax;
    SampleStrategy motion_strategy = SampleStrategy::kNucleus;
    double top_p = 0.95;
    int forced_motion_steps = 2;  // motion_prediction: GT-forced motion steps
    double retire_margin = 20.0;
    bool reject_collisions = true;
    bool reject_clamped = true;
    QuantizerConfig quantizer;
    /// Token layout the model was trained on; pretrain models have no AS
    /// tokens and only support motion_prediction.
    SequenceMode layout = SequenceMode::kFull;

    /// Throws ConfigError.
    void validate() const;
};

struct SimAgent {
    int id = 0;
    AgentType type = AgentType::kVehicle;
    AgentShape shape;
    KinState state;
    int motion_input = motion::kStart;  // label that produced `state`
    int anchor_segment = -1;
    bool ego = false;
    int source_index = -1;  // index in the input scenario, -1 if generated
};

struct SimState {
    int step = 0;
    int next_id = 0;
    std::vector<SimAgent> agents;                // active, in id order
    std::vector<SignalState> lights;             // per input traffic light
    std::map<int, std::vector<std::optional<KinState>>> trajectories;  // id -> per step
    std::map<int, SimAgent> roster;              // every agent ever active (last known record)
    std::vector<std::vector<SignalState>> light_history;
};

/// Result of a finished rollout.
struct RolloutResult {
    ScenarioDescription exported;
    std::vector<std::string> log;  // JSONL lines: header then one event per step
    SimState final_state;
    int injections = 0;
    int injection_failures = 0;
};

/// Steps the model through TL -> AS -> MO groups. One instance owns one
/// rollout; the model must stay alive and unchanged meanwhile.
class RolloutEngine {
public:
    RolloutEngine(nn::Model<float>& model, const ScenarioDescription& scenario, RolloutConfig config);

    /// Runs the whole horizon.
    RolloutResult run();

    /// One TL/AS/MO step; false once the horizon is reached.
    bool step();

    /// Replaces the state of `agent_id` for the coming step; with `next`, its
    /// motion label is fit to reach that pose instead of being sampled.
    /// Unknown ids introduce a new agent. Returns false when the state had to
    /// be clamped by the quantizer.
    bool state_force(int agent_id, const KinState& state, std::optional<Pose2> next = std::nullopt,
                     std::optional<AgentType> type = std::nullopt, std::optional<AgentShape> shape = std::nullopt);

    const SimState& state() const { return sim_; }
    const std::vector<std::string>& log() const { return log_; }
    int horizon() const { return horizon_; }
    const nn::InferenceSession& session() const { return session_; }
    const std::vector<MapSegment>& segments() const { return segments_; }
    ScenarioDescription export_scenario() const;

private:
    struct StepEvent;
    struct Forced {
        KinState state;
        std::optional<Pose2> next;
    };

    void init();
    void phase_lights(StepEvent& ev);
    void phase_agents(StepEvent& ev);
    void phase_motion(StepEvent& ev);
    void retire(StepEvent& ev);
    bool try_inject(int slot, StepEvent& ev);
    bool injection_allowed() const;
    int population_cap() const;
    std::optional<KinState> gt_state(int source_index, int step) const;

    nn::Model<float>& model_;
    ScenarioDescription scenario_;
    RolloutConfig cfg_;
    std::vector<MapSegment> segments_;
    nn::InferenceSession session_;
    Rng rng_;
    SimState sim_;
    int horizon_ = 0;
    bool pretrain_layout_ = false;
    std::vector<std::size_t> tl_rows_;  // token rows whose TL head gives the next signal
    std::map<int, Forced> forced_;
    std::set<int> pending_spawns_;
    int injections_ = 0;
    int injection_failures_ = 0;
    std::vector<std::string> log_;
};

/// Reconstructs every trajectory of a rollout from its JSONL log alone.
std::map<int, std::vector<std::optional<KinState>>> replay_log(const std::vector<std::string>& log);

/// Renders the map and trajectories of a scenario as an SVG document.
std::string render_svg(const ScenarioDescription& s);

}  // namespace scenestreamer
