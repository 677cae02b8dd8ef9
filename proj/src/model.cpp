#include "scenestreamer/nn/model.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/kinematics.hpp"

namespace scenestreamer::nn {

using nlohmann::json;

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("model config: " + what);
    };
    need(d_model > 0 && heads > 0, "d_model and heads must be positive");
    need(d_model % heads == 0, "d_model must be divisible by heads");
    need(encoder_layers >= 0 && decoder_layers >= 1 && rs_layers >= 1, "layer counts");
    need(ffn_mult >= 1 && rel_hidden >= 1, "ffn_mult and rel_hidden must be >= 1");
    need(max_map_tokens >= 1 && max_map_tokens <= map_codec::kMaxSegments, "max_map_tokens must be in [1, 3000]");
    need(agent_id_vocab >= 1 && light_id_vocab >= 1 && intra_vocab >= 4, "id vocabularies");
    need(knn_k >= 1, "knn_k must be >= 1");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
    need(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0, 1]");
}

std::string config_to_json(const ModelConfig& c) {
    json j{{"d_model", c.d_model},           {"heads", c.heads},
           {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
           {"rs_layers", c.rs_layers},       {"ffn_mult", c.ffn_mult},
           {"rel_hidden", c.rel_hidden},     {"max_map_tokens", c.max_map_tokens},
           {"agent_id_vocab", c.agent_id_vocab}, {"light_id_vocab", c.light_id_vocab},
           {"intra_vocab", c.intra_vocab},   {"knn_k", c.knn_k},
           {"dropout", c.dropout},           {"top_p", c.top_p}};
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    ModelConfig c;
    try {
        const json j = json::parse(text);
        c.d_model = j.value("d_model", c.d_model);
        c.heads = j.value("heads", c.heads);
        c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
        c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
        c.rs_layers = j.value("rs_layers", c.rs_layers);
        c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
        c.rel_hidden = j.value("rel_hidden", c.rel_hidden);
        c.max_map_tokens = j.value("max_map_tokens", c.max_map_tokens);
        c.agent_id_vocab = j.value("agent_id_vocab", c.agent_id_vocab);
        c.light_id_vocab = j.value("light_id_vocab", c.light_id_vocab);
        c.intra_vocab = j.value("intra_vocab", c.intra_vocab);
        c.knn_k = j.value("knn_k", c.knn_k);
        c.dropout = j.value("dropout", c.dropout);
        c.top_p = j.value("top_p", c.top_p);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

double HeadStats::total_loss() const {
    double s = 0.0;
    for (const auto& h : heads) s += h.loss;
    return s;
}

void HeadStats::merge(const HeadStats& o) {
    for (std::size_t i = 0; i < heads.size(); ++i) {
        heads[i].loss += o.heads[i].loss;
        heads[i].count += o.heads[i].count;
        heads[i].correct += o.heads[i].correct;
    }
}

// ---------------------------------------------------------------------------
// Prepared inputs

template <typename T>
Mat<T> relation_features(const AttentionPattern& p) {
    Mat<T> f(static_cast<Eigen::Index>(p.deltas.size()), 5);
    for (std::size_t i = 0; i < p.deltas.size(); ++i) {
        const auto& d = p.deltas[i];
        const auto r = static_cast<Eigen::Index>(i);
        f(r, 0) = static_cast<T>(d.dx / 10.0);
        f(r, 1) = static_cast<T>(d.dy / 10.0);
        f(r, 2) = static_cast<T>(std::sin(d.dpsi));
        f(r, 3) = static_cast<T>(std::cos(d.dpsi));
        f(r, 4) = static_cast<T>(d.dt / 4.0);
    }
    return f;
}

template <typename T>
PreparedMap<T> prepare_map(std::vector<MapSegment> segments, int knn_k) {
    PreparedMap<T> m;
    const auto n = static_cast<Eigen::Index>(segments.size());
    constexpr int P = map_codec::kPointsPerSegment;
    m.points = Mat<T>::Zero(n * P, map_codec::kFeatureDim);
    m.valid.assign(static_cast<std::size_t>(n * P), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& s = segments[static_cast<std::size_t>(i)];
        const PointFeatures f = point_features(s);
        const int np = std::min<int>(static_cast<int>(s.points.size()), P);
        // Express geometry in the segment frame so the encoder sees shape,
        // not absolute position; anchors carry the placement.
        for (int j = 0; j < np; ++j) {
            auto row = m.points.row(i * P + j);
            const Vec2 a = rotate({f(j, 0) - s.center.x, f(j, 1) - s.center.y}, -s.heading);
            const Vec2 b = rotate({f(j, 3) - s.center.x, f(j, 4) - s.center.y}, -s.heading);
            const Vec2 dir = rotate({f(j, 6), f(j, 7)}, -s.heading);
            const double rel_heading = wrap_angle(f(j, 9) - s.heading);
            const double vals[13] = {a.x / 10, a.y / 10, f(j, 2) / 10, b.x / 10, b.y / 10, f(j, 5) / 10, dir.x, dir.y, f(j, 8),
                                     rel_heading, std::sin(rel_heading), std::cos(rel_heading), f(j, 12) / 10};
            for (int c = 0; c < 13; ++c) row(c) = static_cast<T>(vals[c]);
            for (int c = 13; c < 25; ++c) row(c) = static_cast<T>(f(j, c));
            row(25) = static_cast<T>(f(j, 25) / 10);
            row(26) = T(1);
            m.valid[static_cast<std::size_t>(i * P + j)] = 1;
        }
    }
    m.self_pattern = map_self_rows(segments, knn_k);
    m.self_rel = relation_features<T>(m.self_pattern);
    m.segments = std::move(segments);
    return m;
}

template <typename T>
PreparedExample<T> prepare_example(const TokenSequence& seq, std::vector<MapSegment> segments, int knn_k) {
    PreparedExample<T> ex;
    ex.scenario_id = seq.scenario_id;
    ex.sequence = seq;
    PatternBuilder pb(knn_k);
    ex.self_pattern = pb.self_rows(seq.tokens, 0);
    ex.self_rel = relation_features<T>(ex.self_pattern);
    ex.cross_pattern = map_cross_rows(seq.tokens, 0, segments, knn_k);
    ex.cross_rel = relation_features<T>(ex.cross_pattern);
    ex.map = prepare_map<T>(std::move(segments), knn_k);
    return ex;
}

AttentionPattern causal_group_pattern(int groups, int len) {
    AttentionPattern p;
    for (int a = 0; a < groups; ++a) {
        for (int j = 0; j < len; ++j) {
            for (int k = 0; k <= j; ++k) p.add(a * len + k, nullptr);
            p.end_row();
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Construction

template <typename T>
Model<T>::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg), init_rng_(seed) {
    cfg_.validate();
    const int d = cfg_.d_model;
    const double e = 0.05;
    emb_map_id_ = add("emb.map_id", cfg_.max_map_tokens, d, e);
    emb_tl_id_ = add("emb.tl_id", cfg_.light_id_vocab, d, e);
    emb_state_ = add("emb.state", vocab::kSignal, d, e);
    emb_type_ = add("emb.type", vocab::kType, d, e);
    emb_aid_ = add("emb.aid", cfg_.agent_id_vocab, d, e);
    emb_motion_ = add("emb.motion", motion::kVocabSize, d, e);
    emb_intra_ = add("emb.intra", cfg_.intra_vocab, d, e);
    emb_sentinel_ = add("emb.sentinel", 3, d, e);
    emb_rs_ = add("emb.rs", kNumRsFields * vocab::kRsBins, d, e);
    rs_sos_ = add("emb.rs_sos", 1, d, e);
    rs_pos_ = add("emb.rs_pos", kNumRsFields, d, e);
    emb_vel_ = {linear_p("emb.vel.1", 2, d), linear_p("emb.vel.2", d, d)};
    emb_shape_ = {linear_p("emb.shape.1", 3, d), linear_p("emb.shape.2", d, d)};

    point_mlp_ = {linear_p("enc.point.1", map_codec::kFeatureDim, d), linear_p("enc.point.2", d, d)};
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
        const std::string p = "enc." + std::to_string(l);
        enc_.push_back({norm_p(p + ".n1"), norm_p(p + ".n2"), attn_p(p + ".self", true), ffn_p(p + ".ffn")});
    }
    enc_norm_ = norm_p("enc.norm");
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        const std::string p = "dec." + std::to_string(l);
        dec_.push_back({norm_p(p + ".n1"), norm_p(p + ".n2"), norm_p(p + ".n3"), attn_p(p + ".self", true),
                        attn_p(p + ".cross", true), ffn_p(p + ".ffn")});
    }
    dec_norm_ = norm_p("dec.norm");

    head_tl_ = mlp_p("head.tl", vocab::kSignal);
    head_type_ = mlp_p("head.type", vocab::kType);
    head_gate_ = mlp_p("head.gate", vocab::kGate);
    head_motion_ = mlp_p("head.motion", vocab::kMotionOut);
    head_map1_ = linear_p("head.map.1", d, d);
    head_map2_ = linear_p("head.map.2", d, d);
    for (int l = 0; l < cfg_.rs_layers; ++l) {
        const std::string p = "head.rs." + std::to_string(l);
        rs_.push_back({linear_p(p + ".scale1", d, d, 0.1), linear_p(p + ".shift1", d, d, 0.1),
                       linear_p(p + ".scale2", d, d, 0.1), linear_p(p + ".shift2", d, d, 0.1),
                       attn_p(p + ".self", false), ffn_p(p + ".ffn")});
    }
    rs_scale_f_ = linear_p("head.rs.scale_f", d, d, 0.1);
    rs_shift_f_ = linear_p("head.rs.shift_f", d, d, 0.1);
    rs_out_ = linear_p("head.rs.out", d, kNumRsFields * vocab::kRsBins);
}

template <typename T>
Parameter<T>* Model<T>::add(const std::string& name, Eigen::Index rows, Eigen::Index cols, double std) {
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * init_rng_.normal());
    params_.push_back(std::make_unique<Parameter<T>>(name, std::move(m)));
    by_name_[name] = params_.back().get();
    return params_.back().get();
}

template <typename T>
Parameter<T>* Model<T>::add_const(const std::string& name, Eigen::Index rows, Eigen::Index cols, T value) {
    params_.push_back(std::make_unique<Parameter<T>>(name, Mat<T>::Constant(rows, cols, value)));
    by_name_[name] = params_.back().get();
    return params_.back().get();
}

template <typename T>
LinearP<T> Model<T>::linear_p(const std::string& name, int in, int out, double gain) {
    return {add(name + ".w", in, out, gain / std::sqrt(static_cast<double>(in))), add_const(name + ".b", 1, out, T(0))};
}

template <typename T>
NormP<T> Model<T>::norm_p(const std::string& name) {
    return {add_const(name + ".g", 1, cfg_.d_model, T(1)), add_const(name + ".b", 1, cfg_.d_model, T(0))};
}

template <typename T>
AttnP<T> Model<T>::attn_p(const std::string& name, bool relative) {
    const int d = cfg_.d_model;
    AttnP<T> p;
    p.q = linear_p(name + ".q", d, d);
    // No key bias: it shifts every score of a row equally and gets no gradient.
    p.k = {add(name + ".k.w", d, d, 1.0 / std::sqrt(static_cast<double>(d))), nullptr};
    p.v = linear_p(name + ".v", d, d);
    p.o = linear_p(name + ".o", d, d);
    if (relative) {
        p.qr = linear_p(name + ".qr", d, d);
        p.rel1 = linear_p(name + ".rel1", 5, cfg_.rel_hidden);
        p.rel2 = add(name + ".rel2.w", cfg_.rel_hidden, d, 1.0 / std::sqrt(static_cast<double>(cfg_.rel_hidden)));
    }
    return p;
}

template <typename T>
FfnP<T> Model<T>::ffn_p(const std::string& name) {
    const int d = cfg_.d_model;
    return {linear_p(name + ".up", d, d * cfg_.ffn_mult), linear_p(name + ".down", d * cfg_.ffn_mult, d)};
}

template <typename T>
MlpP<T> Model<T>::mlp_p(const std::string& name, int out) {
    return {linear_p(name + ".1", cfg_.d_model, cfg_.d_model), linear_p(name + ".2", cfg_.d_model, out)};
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() const {
    std::vector<Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

template <typename T>
Parameter<T>* Model<T>::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

template <typename T>
std::size_t Model<T>::num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->size());
    return n;
}

template <typename T>
void Model<T>::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

template <typename T>
std::vector<Parameter<T>> Model<T>::snapshot() const {
    std::vector<Parameter<T>> out;
    for (const auto& p : params_) out.push_back(*p);
    return out;
}

// ---------------------------------------------------------------------------
// Blocks

template <typename T>
Var Model<T>::lin(Tape<T>& tape, const LinearP<T>& p, Var x) {
    return tape.linear(x, tape.param(*p.w), p.b ? tape.param(*p.b) : Var{});
}

template <typename T>
Var Model<T>::norm(Tape<T>& tape, const NormP<T>& p, Var x) {
    return tape.layer_norm(x, tape.param(*p.g), tape.param(*p.b));
}

template <typename T>
Var Model<T>::ffn(Tape<T>& tape, const FfnP<T>& p, Var x) {
    return lin(tape, p.down, tape.gelu(lin(tape, p.up, x)));
}

template <typename T>
Var Model<T>::mlp(Tape<T>& tape, const MlpP<T>& p, Var x) {
    return lin(tape, p.l2, tape.gelu(lin(tape, p.l1, x)));
}

template <typename T>
Var Model<T>::attend(Tape<T>& tape, const AttnP<T>& p, Var xq, Var k, Var v, const AttentionPattern& pat,
                     const Mat<T>& rel) {
    const Var q = lin(tape, p.q, xq);
    Var qr, h, w2, b2;
    if (p.rel2 && !pat.deltas.empty()) {
        qr = lin(tape, p.qr, xq);
        h = tape.gelu(lin(tape, p.rel1, tape.view(rel)));
        w2 = tape.param(*p.rel2);
        if (p.rel2_b) b2 = tape.param(*p.rel2_b);
    }
    const Var o = tape.relative_attention(q, k, v, qr, h, w2, b2, {&pat, cfg_.heads});
    return lin(tape, p.o, o);
}

template <typename T>
Var Model<T>::encode_map(Tape<T>& tape, const PreparedMap<T>& map, Rng* rng) {
    const auto m = static_cast<Eigen::Index>(map.segments.size());
    if (m == 0) throw MapError("no map segments to encode");
    if (m > cfg_.max_map_tokens)
        throw ConfigError("scene has " + std::to_string(m) + " segments but the model supports " +
                          std::to_string(cfg_.max_map_tokens));
    Var x = mlp(tape, point_mlp_, tape.view(map.points));
    x = tape.masked_max_pool(x, map.valid, map_codec::kPointsPerSegment);
    for (const auto& l : enc_) {
        const Var h = norm(tape, l.n1, x);
        Var a = attend(tape, l.self, h, lin(tape, l.self.k, h), lin(tape, l.self.v, h), map.self_pattern, map.self_rel);
        if (rng) a = tape.dropout(a, cfg_.dropout, *rng);
        x = tape.add(x, a);
        Var f = ffn(tape, l.ffn, norm(tape, l.n2, x));
        if (rng) f = tape.dropout(f, cfg_.dropout, *rng);
        x = tape.add(x, f);
    }
    x = norm(tape, enc_norm_, x);
    std::vector<int> ids(static_cast<std::size_t>(m));
    for (int i = 0; i < static_cast<int>(m); ++i) ids[static_cast<std::size_t>(i)] = i;
    return tape.add(x, tape.embedding(tape.param(*emb_map_id_), std::move(ids)));
}

template <typename T>
Var Model<T>::embed_tokens(Tape<T>& tape, const std::vector<Token>& tokens, std::size_t first) {
    const auto n = static_cast<Eigen::Index>(tokens.size() - first);
    struct Lookup {
        std::vector<int> rows, idx;
        void put(int r, int i) {
            rows.push_back(r);
            idx.push_back(i);
        }
    };
    Lookup map_id, tl_id, state, type, aid, mot, intra, sent, rs;
    std::vector<int> vel_rows, shape_rows;
    std::vector<T> vel_vals, shape_vals;
    auto check_map = [&](int id) {
        if (id < 0 || id >= cfg_.max_map_tokens) throw ConsistencyError("token map id " + std::to_string(id) + " out of range");
        return id;
    };
    for (Eigen::Index r0 = 0; r0 < n; ++r0) {
        const Token& t = tokens[first + static_cast<std::size_t>(r0)];
        const int r = static_cast<int>(r0);
        const int agent_slot = ((t.owner_id % cfg_.agent_id_vocab) + cfg_.agent_id_vocab) % cfg_.agent_id_vocab;
        switch (t.group) {
            case TokenGroup::kTrafficLight:
                state.put(r, t.signal);
                tl_id.put(r, ((t.owner_id % cfg_.light_id_vocab) + cfg_.light_id_vocab) % cfg_.light_id_vocab);
                map_id.put(r, check_map(t.map_id));
                break;
            case TokenGroup::kAgentStart: sent.put(r, 0); break;
            case TokenGroup::kAgentEnd: sent.put(r, 1); break;
            case TokenGroup::kAgentSoa:
                intra.put(r, t.intra_index % cfg_.intra_vocab);
                aid.put(r, agent_slot);
                sent.put(r, 2);
                break;
            case TokenGroup::kAgentType:
            case TokenGroup::kAgentMapSeg:
            case TokenGroup::kAgentRelState:
                intra.put(r, t.intra_index % cfg_.intra_vocab);
                aid.put(r, agent_slot);
                type.put(r, t.agent_type);
                if (t.group != TokenGroup::kAgentType) map_id.put(r, check_map(t.map_id));
                if (t.group == TokenGroup::kAgentRelState)
                    for (int f = 0; f < kNumRsFields; ++f) rs.put(r, f * vocab::kRsBins + t.rs_bins[static_cast<std::size_t>(f)]);
                break;
            case TokenGroup::kMotion:
                mot.put(r, t.motion);
                type.put(r, t.agent_type);
                aid.put(r, agent_slot);
                vel_rows.push_back(r);
                vel_vals.push_back(static_cast<T>(t.velocity_local[0] / 10.0));
                vel_vals.push_back(static_cast<T>(t.velocity_local[1] / 10.0));
                shape_rows.push_back(r);
                for (double s : t.shape) shape_vals.push_back(static_cast<T>(s / 5.0));
                break;
            case TokenGroup::kMap: throw ConsistencyError("map tokens are not part of the decoder stream");
        }
    }
    std::vector<Var> parts;
    auto lookup = [&](Parameter<T>* table, Lookup& l) {
        if (l.rows.empty()) return;
        parts.push_back(tape.scatter_rows(tape.embedding(tape.param(*table), std::move(l.idx)), std::move(l.rows), n));
    };
    lookup(emb_map_id_, map_id);
    lookup(emb_tl_id_, tl_id);
    lookup(emb_state_, state);
    lookup(emb_type_, type);
    lookup(emb_aid_, aid);
    lookup(emb_motion_, mot);
    lookup(emb_intra_, intra);
    lookup(emb_sentinel_, sent);
    lookup(emb_rs_, rs);
    if (!vel_rows.empty()) {
        const auto k = static_cast<Eigen::Index>(vel_rows.size());
        Mat<T> v = Eigen::Map<Mat<T>>(vel_vals.data(), k, 2);
        Mat<T> s = Eigen::Map<Mat<T>>(shape_vals.data(), k, 3);
        parts.push_back(tape.scatter_rows(mlp(tape, emb_vel_, tape.constant(std::move(v))), vel_rows, n));
        parts.push_back(tape.scatter_rows(mlp(tape, emb_shape_, tape.constant(std::move(s))), shape_rows, n));
    }
    if (parts.empty()) return tape.constant(Mat<T>::Zero(n, cfg_.d_model));
    return tape.sum(parts);
}

template <typename T>
void Model<T>::init_cache(Tape<T>& tape, Var map_tokens, DecoderCache<T>& cache) {
    cache = {};
    for (const auto& l : dec_) {
        cache.self_k.emplace_back(0, cfg_.d_model);
        cache.self_v.emplace_back(0, cfg_.d_model);
        cache.cross_k.push_back(tape.value(lin(tape, l.cross.k, map_tokens)));
        cache.cross_v.push_back(tape.value(lin(tape, l.cross.v, map_tokens)));
    }
}

namespace {

template <typename T>
void append_rows(Mat<T>& dst, const Mat<T>& rows) {
    const Eigen::Index old = dst.rows();
    dst.conservativeResize(old + rows.rows(), rows.cols());
    dst.bottomRows(rows.rows()) = rows;
}

}  // namespace

template <typename T>
Var Model<T>::decode(Tape<T>& tape, Var x, Var map_tokens, const AttentionPattern& self_p, const Mat<T>& self_rel,
                     const AttentionPattern& cross_p, const Mat<T>& cross_rel, DecoderCache<T>* cache, Rng* rng) {
    auto drop = [&](Var v) { return rng ? tape.dropout(v, cfg_.dropout, *rng) : v; };
    for (std::size_t li = 0; li < dec_.size(); ++li) {
        const auto& l = dec_[li];
        Var h = norm(tape, l.n1, x);
        Var k = lin(tape, l.self.k, h);
        Var v = lin(tape, l.self.v, h);
        Var ck, cv;
        if (cache) {
            append_rows(cache->self_k[li], tape.value(k));
            append_rows(cache->self_v[li], tape.value(v));
            k = tape.view(cache->self_k[li]);
            v = tape.view(cache->self_v[li]);
            ck = tape.view(cache->cross_k[li]);
            cv = tape.view(cache->cross_v[li]);
        } else {
            ck = lin(tape, l.cross.k, map_tokens);
            cv = lin(tape, l.cross.v, map_tokens);
        }
        x = tape.add(x, drop(attend(tape, l.self, h, k, v, self_p, self_rel)));
        h = norm(tape, l.n2, x);
        x = tape.add(x, drop(attend(tape, l.cross, h, ck, cv, cross_p, cross_rel)));
        x = tape.add(x, drop(ffn(tape, l.ffn, norm(tape, l.n3, x))));
    }
    return norm(tape, dec_norm_, x);
}

// ---------------------------------------------------------------------------
// Heads

template <typename T>
Var Model<T>::tl_logits(Tape<T>& tape, Var h) { return mlp(tape, head_tl_, h); }

template <typename T>
Var Model<T>::type_logits(Tape<T>& tape, Var h) { return mlp(tape, head_type_, h); }

template <typename T>
Var Model<T>::gate_logits(Tape<T>& tape, Var h) { return mlp(tape, head_gate_, h); }

template <typename T>
Var Model<T>::motion_logits(Tape<T>& tape, Var h) { return mlp(tape, head_motion_, h); }

template <typename T>
Var Model<T>::map_logits(Tape<T>& tape, Var h, Var map_tokens) {
    const Var e = lin(tape, head_map2_, tape.gelu(lin(tape, head_map1_, h)));
    return tape.scale(tape.matmul_nt(e, map_tokens), static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.d_model))));
}

template <typename T>
Var Model<T>::rs_logits(Tape<T>& tape, Var cond, const std::vector<std::array<int, kNumRsFields>>& bins, int prefix) {
    const int agents = static_cast<int>(bins.size());
    const auto rows = static_cast<Eigen::Index>(agents * prefix);
    std::vector<int> sos_rows, rs_rows, rs_idx, pos_idx, agent_of, field_of;
    for (int a = 0; a < agents; ++a) {
        for (int j = 0; j < prefix; ++j) {
            const int r = a * prefix + j;
            if (j == 0) {
                sos_rows.push_back(r);
            } else {
                rs_rows.push_back(r);
                rs_idx.push_back((j - 1) * vocab::kRsBins + bins[static_cast<std::size_t>(a)][static_cast<std::size_t>(j - 1)]);
            }
            pos_idx.push_back(j);
            agent_of.push_back(a);
            field_of.push_back(j);
        }
    }
    std::vector<Var> parts;
    parts.push_back(tape.scatter_rows(tape.embedding(tape.param(*rs_sos_), std::vector<int>(sos_rows.size(), 0)), sos_rows, rows));
    if (!rs_rows.empty())
        parts.push_back(tape.scatter_rows(tape.embedding(tape.param(*emb_rs_), rs_idx), rs_rows, rows));
    parts.push_back(tape.embedding(tape.param(*rs_pos_), pos_idx));
    Var x = tape.sum(parts);

    const AttentionPattern& pat = tape.hold(causal_group_pattern(agents, prefix));
    const Mat<T>& no_rel = tape.hold(Mat<T>());
    auto expand = [&](const LinearP<T>& p) { return tape.gather_rows(lin(tape, p, cond), agent_of); };
    for (const auto& l : rs_) {
        Var h = tape.modulate(tape.layer_norm(x), expand(l.scale1), expand(l.shift1));
        x = tape.add(x, attend(tape, l.self, h, lin(tape, l.self.k, h), lin(tape, l.self.v, h), pat, no_rel));
        h = tape.modulate(tape.layer_norm(x), expand(l.scale2), expand(l.shift2));
        x = tape.add(x, ffn(tape, l.ffn, h));
    }
    const Var h = tape.modulate(tape.layer_norm(x), expand(rs_scale_f_), expand(rs_shift_f_));
    return tape.block_select(lin(tape, rs_out_, h), field_of, vocab::kRsBins);
}

template <typename T>
Var Model<T>::loss(Tape<T>& tape, const PreparedExample<T>& ex, HeadStats* stats, Rng* rng) {
    const auto& tokens = ex.sequence.tokens;
    const Var map_tokens = encode_map(tape, ex.map, rng);
    const Var x = embed_tokens(tape, tokens, 0);
    const Var h = decode(tape, x, map_tokens, ex.self_pattern, ex.self_rel, ex.cross_pattern, ex.cross_rel, nullptr, rng);

    std::vector<int> tl_r, tl_t, ty_r, ty_t, gate_r, gate_t, map_r, map_t, mo_r, mo_t, ms_r;
    std::vector<std::array<int, kNumRsFields>> ms_bins;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const Token& t = tokens[i];
        const int r = static_cast<int>(i);
        if (!t.has_target()) continue;
        switch (t.group) {
            case TokenGroup::kTrafficLight: tl_r.push_back(r); tl_t.push_back(t.target); break;
            case TokenGroup::kAgentSoa: ty_r.push_back(r); ty_t.push_back(t.target); break;
            case TokenGroup::kAgentStart:
            case TokenGroup::kAgentRelState: gate_r.push_back(r); gate_t.push_back(t.target); break;
            case TokenGroup::kAgentType: map_r.push_back(r); map_t.push_back(t.target); break;
            case TokenGroup::kAgentMapSeg: ms_r.push_back(r); ms_bins.push_back(*t.target_rs); break;
            case TokenGroup::kMotion: mo_r.push_back(r); mo_t.push_back(t.target); break;
            default: break;
        }
    }
    HeadStats local;
    std::vector<Var> terms;
    auto head = [&](std::vector<int>& rows, const std::vector<int>& targets, int which, auto&& logits_fn) {
        if (rows.empty()) return;
        const Var z = logits_fn(tape.gather_rows(h, rows));
        terms.push_back(tape.cross_entropy(z, targets, &local.heads[static_cast<std::size_t>(which)]));
    };
    head(tl_r, tl_t, HeadStats::kTl, [&](Var v) { return tl_logits(tape, v); });
    head(ty_r, ty_t, HeadStats::kType, [&](Var v) { return type_logits(tape, v); });
    head(gate_r, gate_t, HeadStats::kGate, [&](Var v) { return gate_logits(tape, v); });
    head(map_r, map_t, HeadStats::kMapId, [&](Var v) { return map_logits(tape, v, map_tokens); });
    head(mo_r, mo_t, HeadStats::kMotion, [&](Var v) { return motion_logits(tape, v); });
    if (!ms_r.empty()) {
        const Var z = rs_logits(tape, tape.gather_rows(h, ms_r), ms_bins);
        std::vector<int> targets;
        for (const auto& b : ms_bins) targets.insert(targets.end(), b.begin(), b.end());
        terms.push_back(tape.cross_entropy(z, targets, &local.heads[HeadStats::kRelState]));
    }
    if (stats) stats->merge(local);
    if (terms.empty()) return tape.constant(Mat<T>::Zero(1, 1));
    return tape.sum(terms);
}

template class Model<float>;
template class Model<double>;
template Mat<float> relation_features<float>(const AttentionPattern&);
template Mat<double> relation_features<double>(const AttentionPattern&);
template PreparedMap<float> prepare_map<float>(std::vector<MapSegment>, int);
template PreparedMap<double> prepare_map<double>(std::vector<MapSegment>, int);
template PreparedExample<float> prepare_example<float>(const TokenSequence&, std::vector<MapSegment>, int);
template PreparedExample<double> prepare_example<double>(const TokenSequence&, std::vector<MapSegment>, int);

}  // namespace scenestreamer::nn
