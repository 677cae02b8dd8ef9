#pragma once

#include <string_view>
#include <vector>

#include "scenestreamer/random.hpp"

namespace scenestreamer {

enum class SampleStrategy { kNucleus, kSoftmax, kGreedy };
SampleStrategy sample_strategy_from_string(std::string_view s);

/// Indices of the minimal highest-probability prefix whose mass reaches `p`
/// (sorted by descending probability, ties to the lower index).
std::vector<int> nucleus_support(const std::vector<double>& probs, double p);

/// Throws SamplingError on an all-zero, negative or non-finite distribution.
int sample(const std::vector<double>& probs, SampleStrategy strategy, Rng& rng, double top_p = 0.95);

/// Numerically stable softmax.
std::vector<double> softmax(const std::vector<double>& logits);

}  // namespace scenestreamer
