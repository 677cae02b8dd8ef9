#pragma once

#include <array>
#include <vector>

#include "scenestreamer/nn/model.hpp"
#include "scenestreamer/random.hpp"
#include "scenestreamer/sampling.hpp"

namespace scenestreamer::nn {

/// Incremental decoding over a frozen model. The map is encoded once; tokens
/// are appended in chunks and their hidden states kept for the heads.
class InferenceSession {
public:
    InferenceSession(Model<float>& model, std::vector<MapSegment> segments);

    const std::vector<Token>& tokens() const { return tokens_; }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<MapSegment>& segments() const { return map_.segments; }

    /// Appends and decodes `toks`; returns the index of the first new token.
    std::size_t extend(const std::vector<Token>& toks);
    /// Drops every token from index `n` on (cache included).
    void truncate(std::size_t n);

    // Distributions read at token `i` (all sum to one).
    std::vector<double> tl_probs(std::size_t i);
    std::vector<double> type_probs(std::size_t i);
    std::vector<double> gate_probs(std::size_t i);
    /// One entry per segment of the scene.
    std::vector<double> map_probs(std::size_t i);
    /// 1090 entries; mu_start has probability zero.
    std::vector<double> motion_probs(std::size_t i);
    /// Distribution of field `prefix.size()` given the earlier bins.
    std::vector<double> rs_probs(std::size_t i, const std::vector<int>& prefix);
    /// Samples the 8 relative-state bins field by field.
    std::array<int, kNumRsFields> sample_rs(std::size_t i, SampleStrategy strategy, Rng& rng, double top_p);

private:
    template <typename F>
    std::vector<double> head(std::size_t i, F&& fn);

    Model<float>& model_;
    PreparedMap<float> map_;
    Mat<float> map_tokens_;
    DecoderCache<float> cache_;
    PatternBuilder patterns_;
    std::vector<Token> tokens_;
    Mat<float> hidden_;
};

}  // namespace scenestreamer::nn
