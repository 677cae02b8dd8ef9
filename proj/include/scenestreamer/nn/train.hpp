#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "scenestreamer/nn/model.hpp"

namespace scenestreamer::nn {

struct OptimConfig {
    double lr = 3e-4;
    int warmup = 2000;
    int total_steps = 100000;  // horizon of the cosine decay
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0;

    void validate() const;
};

/// Linear warmup to the peak over `warmup` steps, then cosine decay to zero at
/// `total_steps`. `step` counts optimizer steps from 1.
double learning_rate(const OptimConfig& c, int step);

struct StepResult {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    HeadStats stats;
};

/// AdamW with global-norm clipping. Example order and dropout draws are pure
/// functions of (seed, step), so a resumed run replays the same sequence.
template <typename T>
class Trainer {
public:
    Trainer(Model<T>& model, OptimConfig optim, std::uint64_t seed);

    /// Forward, backward and update on one example. Throws NumericError
    /// (with per-head losses) when the loss or gradient is not finite.
    StepResult step(const PreparedExample<T>& ex);

    /// Runs `steps` more steps over `data`; `on_step` may return false to
    /// stop early.
    void run(const std::vector<PreparedExample<T>>& data, int steps,
             const std::function<bool(const StepResult&)>& on_step = {});

    /// Index of the example used at optimizer step `step` (1-based).
    std::size_t example_index(int step, std::size_t n) const;

    int steps_done() const { return step_; }
    void set_steps_done(int s) { step_ = s; }
    std::uint64_t seed() const { return seed_; }
    const OptimConfig& optim() const { return optim_; }
    OptimConfig& optim() { return optim_; }
    Model<T>& model() { return model_; }

private:
    Model<T>& model_;
    OptimConfig optim_;
    std::uint64_t seed_;
    int step_ = 0;
};

/// Teacher-forced statistics over a dataset, no parameter update.
template <typename T>
HeadStats evaluate(Model<T>& model, const std::vector<PreparedExample<T>>& data);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: 8-byte magic "SSTRCKPT", u32 version, u64 header length, UTF-8 JSON
// header, then the tensor blobs. The header lists every tensor with name,
// shape, dtype ("f32" or "f64") and byte offset from the start of the blob
// area; values are little-endian, row-major. Optimizer moments are stored as
// tensors named "<param>@m" and "<param>@v".

struct CheckpointInfo {
    ModelConfig config;
    OptimConfig optim;
    int step = 0;
    std::string stage = "pretrain";
    std::uint64_t seed = 0;
    bool has_optimizer_state = false;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const CheckpointInfo& info,
                     bool with_optimizer = true);

/// Reads the header only.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Loads parameters (and optimizer moments when present) into a new model.
template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

std::string optim_to_json(const OptimConfig& c);
OptimConfig optim_from_json(const std::string& text);

}  // namespace scenestreamer::nn
