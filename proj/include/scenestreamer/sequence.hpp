#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "scenestreamer/map_codec.hpp"
#include "scenestreamer/scenario.hpp"
#include "scenestreamer/state_codec.hpp"

namespace scenestreamer {

enum class TokenGroup : int {
    kMap = 0,
    kTrafficLight,
    kAgentStart,
    kAgentSoa,
    kAgentType,
    kAgentMapSeg,
    kAgentRelState,
    kAgentEnd,
    kMotion,
};
std::string_view to_string(TokenGroup g);
TokenGroup token_group_from_string(std::string_view s);

/// Coarse group used by the attention rules: TL < AS < MO within a step.
enum class GroupClass : int { kMap = 0, kTrafficLight = 1, kAgentState = 2, kMotion = 3 };
GroupClass group_class(TokenGroup g);

enum class OwnerKind : int { kNone = 0, kAgent, kLight };

/// Temporal-geometric anchor (x, y, heading, step).
struct Anchor {
    double x = 0.0;
    double y = 0.0;
    double psi = 0.0;
    double t = 0.0;
};

/// Gate classes read at AS_START and after each agent's RS token.
inline constexpr int kGateContinue = 0;
inline constexpr int kGateEnd = 1;

struct Token {
    TokenGroup group = TokenGroup::kMap;
    int step = 0;
    OwnerKind owner_kind = OwnerKind::kNone;
    int owner_id = -1;
    int intra_index = -1;
    std::optional<Anchor> anchor;

    // Payload; fields not used by the group keep their defaults.
    int signal = -1;
    int agent_type = -1;
    int map_id = -1;
    std::array<int, kNumRsFields> rs_bins{};
    int motion = -1;
    std::array<double, 2> velocity_local{};  // agent frame
    std::array<double, 3> shape{};

    // Supervision. `target` is the class label for TL (next state), SOA (type),
    // TYPE (map id), MO (next motion label), AS_START / RS (gate).
    int target = -1;
    std::optional<std::array<int, kNumRsFields>> target_rs;  // MS tokens
    double target_ace = std::nan("");                        // MO tokens

    bool has_target() const { return target >= 0 || target_rs.has_value(); }
};

enum class SequenceMode { kPretrain, kFull };
std::string_view to_string(SequenceMode m);
SequenceMode sequence_mode_from_string(std::string_view s);

struct SequenceOptions {
    SequenceMode mode = SequenceMode::kFull;
    int max_agents = 128;  // most dynamic agents kept when exceeded
    QuantizerConfig quantizer;
};

struct TokenSequence {
    std::string scenario_id;
    SequenceMode mode = SequenceMode::kFull;
    int num_map_tokens = 0;
    int num_steps = 0;
    std::vector<Token> tokens;           // dynamic tokens only; map tokens are cross-attention context
    std::vector<int> step_begin;         // size num_steps + 1
    std::vector<int> selected_agents;    // agent ids kept after the N_max cap
};

/// Flattens a scenario into [(TL, AS, MO)_t] token groups with targets.
TokenSequence build_sequence(const ScenarioDescription& scenario,
                             const std::vector<MapSegment>& segments,
                             const SequenceOptions& options = {});

// Token constructors shared by the builder and the rollout engine. Targets
// are left unset unless given.

Token traffic_light_token(const TrafficLightRecord& light, int step, SignalState state);

/// SOA, TYPE, MS and RS tokens of the agent in slot `slot` of the step.
std::array<Token, 4> agent_state_tokens(int step, int slot, int owner_id, AgentType type, const MapSegment& segment,
                                        const std::array<int, kNumRsFields>& bins, Pose2 pose);

Token agent_sentinel_token(TokenGroup group, int step);

Token motion_token(int step, int owner_id, AgentType type, Pose2 pose, Vec2 velocity, const AgentShape& shape,
                   int motion_input);

/// Exact per-step token count for the given population sizes.
int expected_step_tokens(SequenceMode mode, int num_lights, int num_agents);

/// The agent ids kept under a cap of `max_agents`, ranked by cumulative
/// movement (ties to the lower id), returned in id order.
std::vector<int> select_dynamic_agents(const ScenarioDescription& scenario, int max_agents);

// ---------------------------------------------------------------------------
// Attention structure

/// Dense boolean mask; true = query may attend to key.
class AttentionMask {
public:
    AttentionMask() = default;
    explicit AttentionMask(std::size_t n) : n_(n), cells_(n * n, 0) {}

    std::size_t size() const { return n_; }
    bool operator()(std::size_t q, std::size_t k) const { return cells_[q * n_ + k] != 0; }
    void set(std::size_t q, std::size_t k, bool v) { cells_[q * n_ + k] = v ? 1 : 0; }
    std::size_t count() const;

    friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

private:
    std::size_t n_ = 0;
    std::vector<std::uint8_t> cells_;
};

/// Whether token `q` may attend to token `k` under the group-causal rules.
bool group_rule_allows(const std::vector<Token>& tokens, std::size_t q, std::size_t k);

AttentionMask group_causal_mask(const std::vector<Token>& tokens);
inline AttentionMask group_causal_mask(const TokenSequence& seq) { return group_causal_mask(seq.tokens); }

/// Restricts anchored (query, key) pairs to the `k` nearest keys (x-y distance,
/// ties to the lower index) among the keys `mask` already allows. Pairs where
/// either side has no anchor keep their mask value.
AttentionMask knn_mask(const std::vector<Token>& tokens, const AttentionMask& mask, int k);

struct RelativeDelta {
    double dx = 0.0;
    double dy = 0.0;
    double dpsi = 0.0;
    double dt = 0.0;
    bool anchored = false;
};

/// Key anchor expressed in the query's frame.
RelativeDelta relative_deltas(const Anchor& q, const Anchor& k);
RelativeDelta relative_deltas(const Token& q, const Token& k);

/// Sparse attention pattern in CSR layout. `pair[i]` is the row of `deltas`
/// carrying the relation of entry i, or -1 when no relative bias applies.
struct AttentionPattern {
    std::vector<int> row_begin{0};
    std::vector<int> keys;
    std::vector<int> pair;
    std::vector<RelativeDelta> deltas;

    int rows() const { return static_cast<int>(row_begin.size()) - 1; }
    void add(int key, const RelativeDelta* delta);
    void end_row() { row_begin.push_back(static_cast<int>(keys.size())); }
};

/// Incrementally indexes a growing token stream so that pattern rows for new
/// queries cost O(local context) instead of O(stream).
class PatternBuilder {
public:
    explicit PatternBuilder(int knn_k) : knn_k_(knn_k) {}

    /// Self-attention rows for queries [first, tokens.size()) over keys
    /// [0, tokens.size()). Tokens must only ever be appended.
    AttentionPattern self_rows(const std::vector<Token>& tokens, std::size_t first);

    /// Forgets tokens from index `n` on, so the stream can be rolled back.
    void truncate(std::size_t n);

    int knn_k() const { return knn_k_; }

private:
    void sync(const std::vector<Token>& tokens);

    int knn_k_;
    std::size_t indexed_ = 0;
    std::vector<int> step_begin_;  // first token index per step seen so far
    std::map<std::pair<int, int>, std::vector<int>> owner_tokens_;
};

/// Cross-attention rows from each query token to the map tokens.
AttentionPattern map_cross_rows(const std::vector<Token>& tokens, std::size_t first,
                                const std::vector<MapSegment>& segments, int knn_k);

/// Encoder self-attention among map tokens.
AttentionPattern map_self_rows(const std::vector<MapSegment>& segments, int knn_k);

Anchor map_anchor(const MapSegment& s);

// ---------------------------------------------------------------------------
// Serialization

std::string token_to_json(const Token& t);
Token token_from_json(std::string_view line);
std::string sequence_to_jsonl(const TokenSequence& seq);

}  // namespace scenestreamer
