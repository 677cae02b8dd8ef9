#include "scenestreamer/nn/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scenestreamer/errors.hpp"

namespace scenestreamer::nn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void OptimConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (warmup < 0) throw ConfigError("warmup must be >= 0");
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
}

double learning_rate(const OptimConfig& c, int step) {
    if (step <= 0) return 0.0;
    if (step <= c.warmup) return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup);
    const double span = std::max(1, c.total_steps - c.warmup);
    const double progress = std::min(1.0, static_cast<double>(step - c.warmup) / span);
    return c.lr * 0.5 * (1.0 + std::cos(kPi * progress));
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, OptimConfig optim, std::uint64_t seed)
    : model_(model), optim_(optim), seed_(seed) {
    optim_.validate();
}

template <typename T>
std::size_t Trainer<T>::example_index(int step, std::size_t n) const {
    const auto s = static_cast<std::size_t>(step - 1);
    const std::size_t epoch = s / n;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed_ * 0x9E3779B97F4A7C15ULL + epoch + 1);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    return order[s % n];
}

template <typename T>
StepResult Trainer<T>::step(const PreparedExample<T>& ex) {
    const int next = step_ + 1;
    model_.zero_grad();
    Rng drop_rng(seed_ ^ (0xD1B54A32D192ED03ULL * static_cast<std::uint64_t>(next)));
    Tape<T> tape(true);
    StepResult r;
    r.step = next;
    const Var loss = model_.loss(tape, ex, &r.stats, model_.config().dropout > 0.0 ? &drop_rng : nullptr);
    r.loss = static_cast<double>(tape.scalar(loss));
    auto diagnose = [&](const std::string& what) {
        std::ostringstream os;
        os << what << " at step " << next << " on scenario '" << ex.scenario_id << "'; per-head loss:";
        for (int h = 0; h < HeadStats::kCount; ++h)
            os << ' ' << HeadStats::kNames[static_cast<std::size_t>(h)] << '=' << r.stats.heads[static_cast<std::size_t>(h)].loss;
        return os.str();
    };
    if (!std::isfinite(r.loss)) throw NumericError(diagnose("non-finite loss"));
    tape.backward(loss);

    double sq = 0.0;
    const auto params = model_.parameters();
    for (auto* p : params) sq += static_cast<double>(p->grad.squaredNorm());
    r.grad_norm = std::sqrt(sq);
    if (!std::isfinite(r.grad_norm)) throw NumericError(diagnose("non-finite gradient"));
    const double clip = r.grad_norm > optim_.clip_norm ? optim_.clip_norm / r.grad_norm : 1.0;

    r.lr = learning_rate(optim_, next);
    const double b1 = optim_.beta1, b2 = optim_.beta2;
    const double c1 = 1.0 - std::pow(b1, next);
    const double c2 = 1.0 - std::pow(b2, next);
    const T lr = static_cast<T>(r.lr);
    for (auto* p : params) {
        auto g = (p->grad.array() * static_cast<T>(clip));
        p->m.array() = static_cast<T>(b1) * p->m.array() + static_cast<T>(1 - b1) * g;
        p->v.array() = static_cast<T>(b2) * p->v.array() + static_cast<T>(1 - b2) * g.square();
        if (optim_.weight_decay > 0.0) p->value.array() -= lr * static_cast<T>(optim_.weight_decay) * p->value.array();
        p->value.array() -= lr * (p->m.array() / static_cast<T>(c1)) /
                            ((p->v.array() / static_cast<T>(c2)).sqrt() + static_cast<T>(optim_.eps));
    }
    step_ = next;
    return r;
}

template <typename T>
void Trainer<T>::run(const std::vector<PreparedExample<T>>& data, int steps,
                     const std::function<bool(const StepResult&)>& on_step) {
    if (data.empty()) throw ConfigError("training set is empty");
    for (int i = 0; i < steps; ++i) {
        const auto idx = example_index(step_ + 1, data.size());
        const auto r = step(data[idx]);
        if (on_step && !on_step(r)) break;
    }
}

template <typename T>
HeadStats evaluate(Model<T>& model, const std::vector<PreparedExample<T>>& data) {
    HeadStats s;
    for (const auto& ex : data) {
        Tape<T> tape(false);
        model.loss(tape, ex, &s);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'S', 'T', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

struct RawHeader {
    json header;
    std::streamoff blob_start = 0;
};

RawHeader read_header(std::ifstream& in, const std::filesystem::path& path) {
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path.string() + ": not a checkpoint file");
    if (version != kVersion) throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw FormatError(path.string() + ": truncated checkpoint header");
    RawHeader h;
    try {
        h.header = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
    }
    h.blob_start = in.tellg();
    return h;
}

CheckpointInfo info_from(const json& h) {
    CheckpointInfo info;
    info.config = config_from_json(h.at("config").dump());
    info.optim = optim_from_json(h.at("optim").dump());
    info.step = h.at("step").get<int>();
    info.stage = h.at("stage").get<std::string>();
    info.seed = h.at("seed").get<std::uint64_t>();
    info.has_optimizer_state = h.at("has_optimizer_state").get<bool>();
    return info;
}

}  // namespace

std::string optim_to_json(const OptimConfig& c) {
    return json{{"lr", c.lr},         {"warmup", c.warmup}, {"total_steps", c.total_steps},
                {"beta1", c.beta1},   {"beta2", c.beta2},   {"eps", c.eps},
                {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm}}
        .dump();
}

OptimConfig optim_from_json(const std::string& text) {
    OptimConfig c;
    try {
        const json j = json::parse(text);
        c.lr = j.value("lr", c.lr);
        c.warmup = j.value("warmup", c.warmup);
        c.total_steps = j.value("total_steps", c.total_steps);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.eps = j.value("eps", c.eps);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("optimizer config: ") + e.what());
    }
    c.validate();
    return c;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const CheckpointInfo& info,
                     bool with_optimizer) {
    json tensors = json::array();
    std::vector<const Mat<T>*> blobs;
    std::uint64_t offset = 0;
    auto put = [&](const std::string& name, const Mat<T>& m) {
        tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"dtype", dtype_name<T>()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(m.size()) * sizeof(T);
        blobs.push_back(&m);
    };
    for (auto* p : model.parameters()) {
        put(p->name, p->value);
        if (with_optimizer) {
            put(p->name + "@m", p->m);
            put(p->name + "@v", p->v);
        }
    }
    json h{{"config", json::parse(config_to_json(model.config()))},
           {"optim", json::parse(optim_to_json(info.optim))},
           {"step", info.step},
           {"stage", info.stage},
           {"seed", info.seed},
           {"has_optimizer_state", with_optimizer},
           {"tensors", tensors}};
    const std::string text = h.dump();
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp);
        const std::uint64_t len = text.size();
        out.write(kMagic, 8);
        out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(len));
        for (const auto* m : blobs) out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(T)));
        if (!out) throw IoError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    return info_from(read_header(in, path).header);
}

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const RawHeader raw = read_header(in, path);
    const CheckpointInfo info = info_from(raw.header);
    auto model = std::make_unique<Model<T>>(info.config);
    std::vector<char> buf;
    for (const auto& t : raw.header.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const std::string dtype = t.at("dtype").get<std::string>();
        const auto rows = t.at("shape").at(0).get<Eigen::Index>();
        const auto cols = t.at("shape").at(1).get<Eigen::Index>();
        const auto offset = t.at("offset").get<std::uint64_t>();
        std::string base = name;
        Mat<T>* dst = nullptr;
        const auto at = name.find('@');
        if (at != std::string::npos) base = name.substr(0, at);
        Parameter<T>* p = model->find(base);
        if (!p) throw FormatError(path.string() + ": unknown tensor '" + name + "'");
        if (at == std::string::npos) dst = &p->value;
        else if (name.substr(at) == "@m") dst = &p->m;
        else if (name.substr(at) == "@v") dst = &p->v;
        else throw FormatError(path.string() + ": unknown tensor suffix in '" + name + "'");
        if (rows != p->value.rows() || cols != p->value.cols())
            throw FormatError(path.string() + ": shape mismatch for '" + name + "'");
        const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
        if (!width) throw FormatError(path.string() + ": unknown dtype '" + dtype + "'");
        buf.resize(static_cast<std::size_t>(rows * cols) * width);
        in.seekg(raw.blob_start + static_cast<std::streamoff>(offset));
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!in) throw FormatError(path.string() + ": truncated tensor '" + name + "'");
        for (Eigen::Index i = 0; i < rows * cols; ++i) {
            if (width == 4) {
                float f;
                std::memcpy(&f, buf.data() + i * 4, 4);
                dst->data()[i] = static_cast<T>(f);
            } else {
                double f;
                std::memcpy(&f, buf.data() + i * 8, 8);
                dst->data()[i] = static_cast<T>(f);
            }
        }
    }
    if (info_out) *info_out = info;
    return model;
}

template class Trainer<float>;
template class Trainer<double>;
template HeadStats evaluate<float>(Model<float>&, const std::vector<PreparedExample<float>>&);
template HeadStats evaluate<double>(Model<double>&, const std::vector<PreparedExample<double>>&);
template void save_checkpoint<float>(const std::filesystem::path&, const Model<float>&, const CheckpointInfo&, bool);
template void save_checkpoint<double>(const std::filesystem::path&, const Model<double>&, const CheckpointInfo&, bool);
template std::unique_ptr<Model<float>> load_checkpoint<float>(const std::filesystem::path&, CheckpointInfo*);
template std::unique_ptr<Model<double>> load_checkpoint<double>(const std::filesystem::path&, CheckpointInfo*);

}  // namespace scenestreamer::nn
