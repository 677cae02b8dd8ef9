#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "scenestreamer/map_codec.hpp"
#include "scenestreamer/nn/tape.hpp"
#include "scenestreamer/sequence.hpp"

namespace scenestreamer::nn {

/// Class counts of the prediction heads.
namespace vocab {
inline constexpr int kSignal = 4;
inline constexpr int kType = 3;
inline constexpr int kGate = 2;
inline constexpr int kRsBins = 81;
inline constexpr int kMotionOut = 1089;  // mu_start is never predicted
}  // namespace vocab

struct ModelConfig {
    int d_model = 128;
    int heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 4;
    int rs_layers = 2;
    int ffn_mult = 4;
    int rel_hidden = 32;
    int max_map_tokens = 3000;
    int agent_id_vocab = 256;
    int light_id_vocab = 64;
    int intra_vocab = 512;
    int knn_k = 32;
    double dropout = 0.0;
    double top_p = 0.95;

    /// Throws ConfigError.
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const std::string& text);

template <typename T>
struct LinearP {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
};

template <typename T>
struct NormP {
    Parameter<T>* g = nullptr;
    Parameter<T>* b = nullptr;
};

template <typename T>
struct AttnP {
    LinearP<T> q, k, v, qr, o;
    LinearP<T> rel1;              // relation features -> hidden
    Parameter<T>* rel2 = nullptr;  // hidden -> d (factorized into the scores)
    Parameter<T>* rel2_b = nullptr;
};

template <typename T>
struct FfnP {
    LinearP<T> up, down;
};

template <typename T>
struct EncoderLayerP {
    NormP<T> n1, n2;
    AttnP<T> self;
    FfnP<T> ffn;
};

template <typename T>
struct DecoderLayerP {
    NormP<T> n1, n2, n3;
    AttnP<T> self, cross;
    FfnP<T> ffn;
};

/// Layer of the relative-state head; normalizations are modulated by the
/// condition (scale/shift pairs).
template <typename T>
struct RsLayerP {
    LinearP<T> scale1, shift1, scale2, shift2;
    AttnP<T> self;
    FfnP<T> ffn;
};

template <typename T>
struct MlpP {
    LinearP<T> l1, l2;
};

/// Map, token and relation inputs of one scenario, precomputed once.
template <typename T>
struct PreparedMap {
    std::vector<MapSegment> segments;
    Mat<T> points;                     // (M*30) x 27, segment-local
    std::vector<std::uint8_t> valid;   // per point row
    AttentionPattern self_pattern;
    Mat<T> self_rel;                   // relation features of self_pattern pairs
};

template <typename T>
struct PreparedExample {
    std::string scenario_id;
    PreparedMap<T> map;
    TokenSequence sequence;
    AttentionPattern self_pattern;
    Mat<T> self_rel;
    AttentionPattern cross_pattern;
    Mat<T> cross_rel;
};

/// Teacher-forced accuracy and loss per head. The gate is reported on its own.
struct HeadStats {
    enum Head { kTl = 0, kType, kMapId, kRelState, kMotion, kGate, kCount };
    static constexpr std::array<const char*, kCount> kNames{"tl", "type", "map_id", "rel_state", "motion", "gate"};
    std::array<CeStats, kCount> heads{};

    double accuracy(int h) const {
        const auto& s = heads[static_cast<std::size_t>(h)];
        return s.count ? static_cast<double>(s.correct) / s.count : 1.0;
    }
    double total_loss() const;
    void merge(const HeadStats& o);
};

template <typename T>
PreparedMap<T> prepare_map(std::vector<MapSegment> segments, int knn_k);

template <typename T>
PreparedExample<T> prepare_example(const TokenSequence& seq, std::vector<MapSegment> segments, int knn_k);

/// Relation features (dx/10, dy/10, sin dpsi, cos dpsi, dt/4) per pair.
template <typename T>
Mat<T> relation_features(const AttentionPattern& p);

template <typename T>
struct MapEncoding {
    Var tokens;  // M x d, encoded features + EmbMapID
};

/// Per-layer key/value caches for incremental decoding.
template <typename T>
struct DecoderCache {
    std::vector<Mat<T>> self_k, self_v;
    std::vector<Mat<T>> cross_k, cross_v;
};

template <typename T>
class Model {
public:
    explicit Model(ModelConfig cfg, std::uint64_t seed = 0);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    std::vector<Parameter<T>*> parameters() const;
    Parameter<T>* find(const std::string& name) const;
    std::size_t num_scalars() const;
    void zero_grad();

    // -- building blocks ----------------------------------------------------
    Var encode_map(Tape<T>& tape, const PreparedMap<T>& map, Rng* rng = nullptr);
    Var embed_tokens(Tape<T>& tape, const std::vector<Token>& tokens, std::size_t first);
    /// Decoder over the new rows `x`. With a cache, keys/values are appended
    /// and the patterns index the cached rows; without, keys are `x` itself.
    Var decode(Tape<T>& tape, Var x, Var map_tokens, const AttentionPattern& self_p, const Mat<T>& self_rel,
               const AttentionPattern& cross_p, const Mat<T>& cross_rel, DecoderCache<T>* cache, Rng* rng = nullptr);
    void init_cache(Tape<T>& tape, Var map_tokens, DecoderCache<T>& cache);

    // -- heads --------------------------------------------------------------
    Var tl_logits(Tape<T>& tape, Var h);
    Var type_logits(Tape<T>& tape, Var h);
    Var gate_logits(Tape<T>& tape, Var h);
    Var map_logits(Tape<T>& tape, Var h, Var map_tokens);
    Var motion_logits(Tape<T>& tape, Var h);
    /// Teacher-forced RS decoder: condition rows (n x d) and bins (n x 8)
    /// give logits for the n*8 positions (row a*8+j is field j of agent a).
    /// With `prefix` < 8 only the first `prefix` positions are evaluated.
    Var rs_logits(Tape<T>& tape, Var cond, const std::vector<std::array<int, kNumRsFields>>& bins, int prefix = kNumRsFields);

    /// Summed cross-entropy over every target of the example.
    Var loss(Tape<T>& tape, const PreparedExample<T>& ex, HeadStats* stats = nullptr, Rng* rng = nullptr);

    std::vector<Parameter<T>> snapshot() const;

private:
    Parameter<T>* add(const std::string& name, Eigen::Index rows, Eigen::Index cols, double std);
    Parameter<T>* add_const(const std::string& name, Eigen::Index rows, Eigen::Index cols, T value);
    LinearP<T> linear_p(const std::string& name, int in, int out, double gain = 1.0);
    NormP<T> norm_p(const std::string& name);
    AttnP<T> attn_p(const std::string& name, bool relative);
    FfnP<T> ffn_p(const std::string& name);
    MlpP<T> mlp_p(const std::string& name, int out);

    Var lin(Tape<T>& tape, const LinearP<T>& p, Var x);
    Var norm(Tape<T>& tape, const NormP<T>& p, Var x);
    Var ffn(Tape<T>& tape, const FfnP<T>& p, Var x);
    Var mlp(Tape<T>& tape, const MlpP<T>& p, Var x);
    Var attend(Tape<T>& tape, const AttnP<T>& p, Var xq, Var k, Var v, const AttentionPattern& pat, const Mat<T>& rel);

    ModelConfig cfg_;
    Rng init_rng_;
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::map<std::string, Parameter<T>*> by_name_;

    // embeddings
    Parameter<T>* emb_map_id_;
    Parameter<T>* emb_tl_id_;
    Parameter<T>* emb_state_;
    Parameter<T>* emb_type_;
    Parameter<T>* emb_aid_;
    Parameter<T>* emb_motion_;
    Parameter<T>* emb_intra_;
    Parameter<T>* emb_sentinel_;  // AS_START, AS_END, SOA
    Parameter<T>* emb_rs_;        // 8 * 81 rows
    Parameter<T>* rs_sos_;
    Parameter<T>* rs_pos_;
    MlpP<T> emb_vel_, emb_shape_;

    // map encoder
    MlpP<T> point_mlp_;
    std::vector<EncoderLayerP<T>> enc_;
    NormP<T> enc_norm_;

    // decoder
    std::vector<DecoderLayerP<T>> dec_;
    NormP<T> dec_norm_;

    // heads
    MlpP<T> head_tl_, head_type_, head_gate_, head_motion_;
    LinearP<T> head_map1_, head_map2_;
    std::vector<RsLayerP<T>> rs_;
    LinearP<T> rs_scale_f_, rs_shift_f_, rs_out_;
};

/// Causal pattern over groups of `len` consecutive rows (no relations).
AttentionPattern causal_group_pattern(int groups, int len);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace scenestreamer::nn
