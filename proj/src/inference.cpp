#include "scenestreamer/nn/inference.hpp"

#include "scenestreamer/errors.hpp"
#include "scenestreamer/kinematics.hpp"

namespace scenestreamer::nn {

namespace {

std::vector<double> row_softmax(const Mat<float>& z, Eigen::Index r) {
    std::vector<double> logits(static_cast<std::size_t>(z.cols()));
    for (Eigen::Index c = 0; c < z.cols(); ++c) logits[static_cast<std::size_t>(c)] = z(r, c);
    return softmax(logits);
}

}  // namespace

InferenceSession::InferenceSession(Model<float>& model, std::vector<MapSegment> segments)
    : model_(model), patterns_(model.config().knn_k) {
    map_ = prepare_map<float>(std::move(segments), model.config().knn_k);
    Tape<float> tape(false);
    const Var mt = model_.encode_map(tape, map_);
    map_tokens_ = tape.value(mt);
    model_.init_cache(tape, tape.view(map_tokens_), cache_);
    hidden_.resize(0, model.config().d_model);
}

std::size_t InferenceSession::extend(const std::vector<Token>& toks) {
    const std::size_t first = tokens_.size();
    if (toks.empty()) return first;
    tokens_.insert(tokens_.end(), toks.begin(), toks.end());
    const AttentionPattern self_p = patterns_.self_rows(tokens_, first);
    const AttentionPattern cross_p = map_cross_rows(tokens_, first, map_.segments, model_.config().knn_k);
    const Mat<float> self_rel = relation_features<float>(self_p);
    const Mat<float> cross_rel = relation_features<float>(cross_p);
    Tape<float> tape(false);
    const Var x = model_.embed_tokens(tape, tokens_, first);
    const Var h = model_.decode(tape, x, tape.view(map_tokens_), self_p, self_rel, cross_p, cross_rel, &cache_);
    const Mat<float>& hv = tape.value(h);
    const Eigen::Index old = hidden_.rows();
    hidden_.conservativeResize(old + hv.rows(), hv.cols());
    hidden_.bottomRows(hv.rows()) = hv;
    return first;
}

void InferenceSession::truncate(std::size_t n) {
    if (n >= tokens_.size()) return;
    tokens_.resize(n);
    patterns_.truncate(n);
    const auto rows = static_cast<Eigen::Index>(n);
    for (auto* v : {&cache_.self_k, &cache_.self_v})
        for (auto& m : *v) m.conservativeResize(rows, m.cols());
    hidden_.conservativeResize(rows, hidden_.cols());
}

template <typename F>
std::vector<double> InferenceSession::head(std::size_t i, F&& fn) {
    if (i >= tokens_.size()) throw std::out_of_range("token index past the decoded stream");
    Tape<float> tape(false);
    const Mat<float> row = hidden_.row(static_cast<Eigen::Index>(i));
    const Var z = fn(tape, tape.constant(row));
    return row_softmax(tape.value(z), tape.value(z).rows() - 1);
}

std::vector<double> InferenceSession::tl_probs(std::size_t i) {
    return head(i, [&](Tape<float>& t, Var h) { return model_.tl_logits(t, h); });
}

std::vector<double> InferenceSession::type_probs(std::size_t i) {
    return head(i, [&](Tape<float>& t, Var h) { return model_.type_logits(t, h); });
}

std::vector<double> InferenceSession::gate_probs(std::size_t i) {
    return head(i, [&](Tape<float>& t, Var h) { return model_.gate_logits(t, h); });
}

std::vector<double> InferenceSession::map_probs(std::size_t i) {
    return head(i, [&](Tape<float>& t, Var h) { return model_.map_logits(t, h, t.view(map_tokens_)); });
}

std::vector<double> InferenceSession::motion_probs(std::size_t i) {
    auto p = head(i, [&](Tape<float>& t, Var h) { return model_.motion_logits(t, h); });
    p.push_back(0.0);  // mu_start
    return p;
}

std::vector<double> InferenceSession::rs_probs(std::size_t i, const std::vector<int>& prefix) {
    if (prefix.size() >= static_cast<std::size_t>(kNumRsFields)) throw std::invalid_argument("rs prefix too long");
    std::array<int, kNumRsFields> bins{};
    std::copy(prefix.begin(), prefix.end(), bins.begin());
    const int len = static_cast<int>(prefix.size()) + 1;
    return head(i, [&](Tape<float>& t, Var h) { return model_.rs_logits(t, h, {bins}, len); });
}

std::array<int, kNumRsFields> InferenceSession::sample_rs(std::size_t i, SampleStrategy strategy, Rng& rng,
                                                         double top_p) {
    std::vector<int> prefix;
    for (int f = 0; f < kNumRsFields; ++f) prefix.push_back(sample(rs_probs(i, prefix), strategy, rng, top_p));
    std::array<int, kNumRsFields> out{};
    std::copy(prefix.begin(), prefix.end(), out.begin());
    return out;
}

}  // namespace scenestreamer::nn
