#include "scenestreamer/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "scenestreamer/errors.hpp"

namespace scenestreamer {

SampleStrategy sample_strategy_from_string(std::string_view s) {
    if (s == "nucleus") return SampleStrategy::kNucleus;
    if (s == "softmax") return SampleStrategy::kSoftmax;
    if (s == "greedy") return SampleStrategy::kGreedy;
    throw ConfigError("unknown sampling strategy '" + std::string(s) + "'");
}

namespace {

double checked_mass(const std::vector<double>& probs) {
    double total = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0) throw SamplingError("distribution has a negative or non-finite entry");
        total += p;
    }
    if (total <= 0.0) throw SamplingError("distribution has zero mass");
    return total;
}

int draw(const std::vector<double>& probs, const std::vector<int>& support, double mass, Rng& rng) {
    const double u = rng.uniform() * mass;
    double c = 0.0;
    for (int i : support) {
        c += probs[static_cast<std::size_t>(i)];
        if (u < c) return i;
    }
    // Rounding left u at the very top; return the last class with mass.
    for (auto it = support.rbegin(); it != support.rend(); ++it)
        if (probs[static_cast<std::size_t>(*it)] > 0.0) return *it;
    return support.back();
}

}  // namespace

std::vector<int> nucleus_support(const std::vector<double>& probs, double p) {
    const double total = checked_mass(probs);
    std::vector<int> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    });
    std::vector<int> out;
    double c = 0.0;
    for (int i : order) {
        out.push_back(i);
        c += probs[static_cast<std::size_t>(i)] / total;
        if (c >= p) break;
    }
    return out;
}

int sample(const std::vector<double>& probs, SampleStrategy strategy, Rng& rng, double top_p) {
    const double total = checked_mass(probs);
    switch (strategy) {
        case SampleStrategy::kGreedy:
            return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        case SampleStrategy::kSoftmax: {
            std::vector<int> all(probs.size());
            std::iota(all.begin(), all.end(), 0);
            return draw(probs, all, total, rng);
        }
        case SampleStrategy::kNucleus: {
            if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
            const auto support = nucleus_support(probs, top_p);
            double mass = 0.0;
            for (int i : support) mass += probs[static_cast<std::size_t>(i)];
            return draw(probs, support, mass, rng);
        }
    }
    return 0;
}

std::vector<double> softmax(const std::vector<double>& logits) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
}

}  // namespace scenestreamer
