#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "scenestreamer/geometry.hpp"
#include "scenestreamer/scenario.hpp"

namespace scenestreamer {

enum class Attribute { kPosition, kHeading, kSize, kVelocity };
std::string_view to_string(Attribute a);

/// Samples of one initial-state attribute. Position and velocity are 2-d,
/// heading is (sin, cos) and size is (length, width, height).
struct SampleSet {
    Attribute attribute = Attribute::kPosition;
    std::vector<std::vector<double>> values;
};

/// Squared MMD (V-statistic) with a Gaussian kernel. Without `bandwidth` the
/// median pairwise distance of the pooled set is used. Throws MetricError on
/// empty or mismatched sets.
double mmd(const SampleSet& a, const SampleSet& b, std::optional<double> bandwidth = std::nullopt);

/// Per-step positions of one agent; empty entries are invalid steps.
using Trajectory = std::vector<std::optional<Vec2>>;

struct DisplacementMetrics {
    double ade_avg = 0.0;
    double ade_min = 0.0;
    double fde_avg = 0.0;
    double fde_min = 0.0;
    double add = 0.0;  // mean pairwise distance between rollouts, over steps
    double fdd = 0.0;  // same at the final step
    bool diversity_defined = false;  // false for a single rollout
    bool valid = false;              // false when no step is valid in GT and every rollout
};

/// ADE/FDE against `gt` and ADD/FDD among the K rollouts, over the steps at
/// which GT and every rollout are valid (from `first_step` on).
DisplacementMetrics displacement_metrics(const std::vector<Trajectory>& rollouts, const Trajectory& gt,
                                         int first_step = 0);

/// All index pairs (i < j) of overlapping boxes.
std::vector<std::pair<int, int>> collision_check(const std::vector<OrientedBox>& boxes);

enum class EvalProtocol { kStrict, kRelaxed };
EvalProtocol eval_protocol_from_string(std::string_view s);

/// Initial-state samples of a scenario. The strict protocol keeps vehicles
/// within 50 m of `center`; relaxed keeps every agent.
std::map<Attribute, SampleSet> initial_state_samples(const ScenarioDescription& s, EvalProtocol protocol,
                                                     Vec2 center);

/// Report with the six displacement metrics and the four MMD attributes.
/// `preds` may hold several rollouts per GT scenario; pairing is by scenario
/// id (PairingError when a prediction has no GT). Displacements compare
/// agents with the same id from step 1 on.
std::map<std::string, double> evaluate_scenarios(const std::vector<ScenarioDescription>& preds,
                                                 const std::vector<ScenarioDescription>& gts,
                                                 EvalProtocol protocol);

}  // namespace scenestreamer
