#include "scenestreamer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/map_codec.hpp"

namespace scenestreamer {

std::string_view to_string(Attribute a) {
    switch (a) {
        case Attribute::kPosition: return "position";
        case Attribute::kHeading: return "heading";
        case Attribute::kSize: return "size";
        case Attribute::kVelocity: return "velocity";
    }
    return "?";
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

double median(std::vector<double> v) {
    const std::size_t n = v.size();
    const std::size_t mid = n / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (n % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

double kernel_mean(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                   double inv_two_sigma2) {
    double s = 0.0;
    for (const auto& x : a)
        for (const auto& y : b) s += std::exp(-sq_dist(x, y) * inv_two_sigma2);
    return s / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

}  // namespace

double mmd(const SampleSet& a, const SampleSet& b, std::optional<double> bandwidth) {
    if (a.values.empty() || b.values.empty()) throw MetricError("mmd: empty sample set");
    if (a.attribute != b.attribute) throw MetricError("mmd: attribute mismatch");
    const std::size_t dim = a.values.front().size();
    for (const auto* set : {&a.values, &b.values})
        for (const auto& v : *set)
            if (v.size() != dim) throw MetricError("mmd: inconsistent dimensionality");

    double sigma = 0.0;
    if (bandwidth) {
        if (!(*bandwidth > 0.0)) throw MetricError("mmd: bandwidth must be positive");
        sigma = *bandwidth;
    } else {
        std::vector<const std::vector<double>*> pool;
        for (const auto& v : a.values) pool.push_back(&v);
        for (const auto& v : b.values) pool.push_back(&v);
        std::vector<double> d;
        d.reserve(pool.size() * (pool.size() - 1) / 2);
        for (std::size_t i = 0; i < pool.size(); ++i)
            for (std::size_t j = i + 1; j < pool.size(); ++j) d.push_back(std::sqrt(sq_dist(*pool[i], *pool[j])));
        sigma = d.empty() ? 1.0 : median(std::move(d));
        if (!(sigma > 0.0)) sigma = 1.0;  // all points coincide
    }
    const double g = 1.0 / (2.0 * sigma * sigma);
    const double v = kernel_mean(a.values, a.values, g) + kernel_mean(b.values, b.values, g) -
                     2.0 * kernel_mean(a.values, b.values, g);
    return std::max(v, 0.0);
}

DisplacementMetrics displacement_metrics(const std::vector<Trajectory>& rollouts, const Trajectory& gt,
                                         int first_step) {
    if (rollouts.empty()) throw MetricError("displacement metrics need at least one rollout");
    DisplacementMetrics m;
    std::vector<std::size_t> steps;
    for (std::size_t s = static_cast<std::size_t>(std::max(first_step, 0)); s < gt.size(); ++s) {
        if (!gt[s]) continue;
        bool all = true;
        for (const auto& r : rollouts) all = all && s < r.size() && r[s].has_value();
        if (all) steps.push_back(s);
    }
    const std::size_t k = rollouts.size();
    m.diversity_defined = k > 1;
    if (steps.empty()) return m;
    m.valid = true;
    const std::size_t last = steps.back();
    m.ade_min = m.fde_min = std::numeric_limits<double>::infinity();
    for (const auto& r : rollouts) {
        double ade = 0.0;
        for (std::size_t s : steps) ade += distance(*r[s], *gt[s]);
        ade /= static_cast<double>(steps.size());
        const double fde = distance(*r[last], *gt[last]);
        m.ade_avg += ade / static_cast<double>(k);
        m.fde_avg += fde / static_cast<double>(k);
        m.ade_min = std::min(m.ade_min, ade);
        m.fde_min = std::min(m.fde_min, fde);
    }
    if (k > 1) {
        const double pairs = static_cast<double>(k * (k - 1) / 2);
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = i + 1; j < k; ++j) {
                double add = 0.0;
                for (std::size_t s : steps) add += distance(*rollouts[i][s], *rollouts[j][s]);
                m.add += add / static_cast<double>(steps.size()) / pairs;
                m.fdd += distance(*rollouts[i][last], *rollouts[j][last]) / pairs;
            }
        }
    }
    return m;
}

std::vector<std::pair<int, int>> collision_check(const std::vector<OrientedBox>& boxes) {
    std::vector<std::pair<int, int>> out;
    for (std::size_t i = 0; i < boxes.size(); ++i)
        for (std::size_t j = i + 1; j < boxes.size(); ++j)
            if (boxes_overlap(boxes[i], boxes[j])) out.emplace_back(static_cast<int>(i), static_cast<int>(j));
    return out;
}

EvalProtocol eval_protocol_from_string(std::string_view s) {
    if (s == "strict") return EvalProtocol::kStrict;
    if (s == "relaxed") return EvalProtocol::kRelaxed;
    throw ConfigError("unknown eval protocol '" + std::string(s) + "' (expected strict or relaxed)");
}

std::map<Attribute, SampleSet> initial_state_samples(const ScenarioDescription& s, EvalProtocol protocol,
                                                     Vec2 center) {
    std::map<Attribute, SampleSet> out;
    for (auto a : {Attribute::kPosition, Attribute::kHeading, Attribute::kSize, Attribute::kVelocity})
        out[a].attribute = a;
    for (const auto& a : s.agents) {
        if (a.states.empty() || !a.states.front().valid) continue;
        const auto& st = a.states.front();
        if (protocol == EvalProtocol::kStrict) {
            if (a.type != AgentType::kVehicle) continue;
            if (distance({st.x, st.y}, center) > 50.0) continue;
        }
        out[Attribute::kPosition].values.push_back({st.x, st.y});
        out[Attribute::kHeading].values.push_back({std::sin(st.psi), std::cos(st.psi)});
        out[Attribute::kSize].values.push_back({a.shape.length, a.shape.width, a.shape.height});
        out[Attribute::kVelocity].values.push_back({st.vx, st.vy});
    }
    return out;
}

std::map<std::string, double> evaluate_scenarios(const std::vector<ScenarioDescription>& preds,
                                                 const std::vector<ScenarioDescription>& gts,
                                                 EvalProtocol protocol) {
    if (gts.empty()) throw MetricError("eval: no ground-truth scenarios");
    std::map<std::string, const ScenarioDescription*> by_id;
    for (const auto& g : gts) by_id[g.scenario_id] = &g;
    std::map<std::string, std::vector<const ScenarioDescription*>> grouped;
    for (const auto& p : preds) {
        if (!by_id.count(p.scenario_id))
            throw PairingError("prediction '" + p.scenario_id + "' has no ground-truth scenario");
        grouped[p.scenario_id].push_back(&p);
    }

    std::map<Attribute, SampleSet> pred_pool, gt_pool;
    double sums[6] = {0, 0, 0, 0, 0, 0};
    int agents = 0;
    for (const auto& [id, ps] : grouped) {
        const ScenarioDescription& g = *by_id.at(id);
        const Vec2 center = default_reference(g, 0);
        auto append = [&](std::map<Attribute, SampleSet>& pool, const ScenarioDescription& s) {
            for (auto& [attr, set] : initial_state_samples(s, protocol, center)) {
                pool[attr].attribute = attr;
                auto& dst = pool[attr].values;
                dst.insert(dst.end(), set.values.begin(), set.values.end());
            }
        };
        append(gt_pool, g);
        for (const auto* p : ps) append(pred_pool, *p);

        for (std::size_t ai = 0; ai < g.agents.size(); ++ai) {
            Trajectory gt;
            for (const auto& st : g.agents[ai].states) gt.push_back(st.valid ? std::optional<Vec2>(Vec2{st.x, st.y}) : std::nullopt);
            std::vector<Trajectory> rolls;
            for (const auto* p : ps) {
                Trajectory r;
                if (ai < p->agents.size())
                    for (const auto& st : p->agents[ai].states)
                        r.push_back(st.valid ? std::optional<Vec2>(Vec2{st.x, st.y}) : std::nullopt);
                rolls.push_back(std::move(r));
            }
            const auto m = displacement_metrics(rolls, gt, 1);
            if (!m.valid) continue;
            const double v[6] = {m.ade_avg, m.ade_min, m.fde_avg, m.fde_min, m.add, m.fdd};
            for (int i = 0; i < 6; ++i) sums[i] += v[i];
            ++agents;
        }
    }
    std::map<std::string, double> report;
    const char* names[6] = {"ade_avg", "ade_min", "fde_avg", "fde_min", "add", "fdd"};
    for (int i = 0; i < 6; ++i) report[names[i]] = agents ? sums[i] / agents : 0.0;
    for (auto a : {Attribute::kPosition, Attribute::kHeading, Attribute::kSize, Attribute::kVelocity}) {
        const auto& pa = pred_pool[a];
        const auto& ga = gt_pool[a];
        report["mmd_" + std::string(to_string(a))] =
            (pa.values.empty() || ga.values.empty()) ? std::nan("") : mmd(pa, ga);
    }
    return report;
}

}  // namespace scenestreamer
