#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/map_codec.hpp"
#include "scenestreamer/metrics.hpp"
#include "scenestreamer/nn/train.hpp"
#include "scenestreamer/rollout.hpp"
#include "scenestreamer/scenario.hpp"
#include "scenestreamer/sequence.hpp"

namespace fs = std::filesystem;
using namespace scenestreamer;
using nlohmann::json;

namespace {

class UsageError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

std::vector<fs::path> collect(const std::vector<std::string>& inputs, const std::string& suffix) {
    std::vector<fs::path> out;
    for (const auto& in : inputs) {
        const fs::path p(in);
        if (fs::is_directory(p)) {
            std::vector<fs::path> found;
            for (const auto& e : fs::directory_iterator(p)) {
                const std::string name = e.path().filename().string();
                if (e.is_regular_file() && name.size() >= suffix.size() &&
                    name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
                    found.push_back(e.path());
            }
            std::sort(found.begin(), found.end());
            out.insert(out.end(), found.begin(), found.end());
        } else if (fs::exists(p)) {
            out.push_back(p);
        } else {
            throw IoError("no such file or directory: " + in);
        }
    }
    if (out.empty()) throw IoError("no input files found");
    return out;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

std::vector<MapSegment> scene_segments(const ScenarioDescription& s) {
    return segment_polylines(s, default_reference(s));
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string tmpl = "straight";
    int count = 8;
    int agents = 3;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_synth(const SynthArgs& a) {
    if (a.count < 1) throw UsageError("--count must be >= 1");
    const auto t = synth_template_from_string(a.tmpl);
    ensure_dir(a.out);
    for (int i = 0; i < a.count; ++i) {
        const auto s = synth_scenario(t, a.agents, a.seed + static_cast<std::uint64_t>(i));
        save_scenario(s, fs::path(a.out) / (s.scenario_id + ".json"));
    }
    std::cout << "wrote " << a.count << " scenarios to " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TokenizeArgs {
    std::vector<std::string> in;
    std::string mode = "full";
    std::string out;
    int max_agents = 128;
    int knn_k = 32;
};

int cmd_tokenize(const TokenizeArgs& a) {
    SequenceOptions opt;
    opt.mode = sequence_mode_from_string(a.mode);
    opt.max_agents = a.max_agents;
    ensure_dir(a.out);
    int n = 0;
    for (const auto& path : collect(a.in, ".json")) {
        ScenarioDescription s;
        try {
            s = load_scenario(path);
        } catch (const Error& e) {
            throw ValidationError(path.filename().string() + ": " + e.what());
        }
        const auto segs = scene_segments(s);
        TokenSequence seq;
        try {
            seq = build_sequence(s, segs, opt);
        } catch (const Error& e) {
            throw ConsistencyError(s.scenario_id + ": " + e.what());
        }
        write_text(fs::path(a.out) / (s.scenario_id + ".tokens.jsonl"), sequence_to_jsonl(seq));

        PatternBuilder pb(a.knn_k);
        const auto self_p = pb.self_rows(seq.tokens, 0);
        const auto cross_p = map_cross_rows(seq.tokens, 0, segs, a.knn_k);
        std::map<std::string, int> groups;
        for (const auto& t : seq.tokens) groups[std::string(to_string(t.group))]++;
        json steps = json::array();
        bool formula_ok = true;
        for (int t = 0; t < seq.num_steps; ++t) {
            const int count = seq.step_begin[static_cast<std::size_t>(t + 1)] - seq.step_begin[static_cast<std::size_t>(t)];
            int agents = 0;
            for (int i = seq.step_begin[static_cast<std::size_t>(t)]; i < seq.step_begin[static_cast<std::size_t>(t + 1)]; ++i)
                agents += seq.tokens[static_cast<std::size_t>(i)].group == TokenGroup::kMotion;
            const int expected =
                expected_step_tokens(opt.mode, static_cast<int>(s.traffic_lights.size()), agents);
            formula_ok = formula_ok && expected == count;
            steps.push_back({{"step", t}, {"tokens", count}, {"agents", agents}, {"expected", expected}});
        }
        json summary{{"scenario_id", s.scenario_id},
                     {"mode", to_string(opt.mode)},
                     {"map_tokens", seq.num_map_tokens},
                     {"tokens", seq.tokens.size()},
                     {"groups", groups},
                     {"steps", steps},
                     {"count_formula_ok", formula_ok},
                     {"selected_agents", seq.selected_agents},
                     {"mask",
                      {{"knn_k", a.knn_k},
                       {"self_pairs", self_p.keys.size()},
                       {"self_relative_pairs", self_p.deltas.size()},
                       {"cross_pairs", cross_p.keys.size()}}}};
        write_text(fs::path(a.out) / (s.scenario_id + ".summary.json"), summary.dump(2) + "\n");
        ++n;
    }
    std::cout << "tokenized " << n << " scenarios into " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::vector<std::string> data;
    std::string stage = "pretrain";
    std::string out;
    std::string init;
    std::string resume;
    bool from_scratch = false;
    int steps = 1000;
    int total_steps = 0;
    int checkpoint_every = 0;
    int log_every = 10;
    std::uint64_t seed = 0;
    int max_agents = 128;
    nn::ModelConfig model;
    nn::OptimConfig optim;
};

int cmd_train(TrainArgs a) {
    if (a.stage != "pretrain" && a.stage != "finetune") throw UsageError("--stage must be pretrain or finetune");
    if (a.steps < 1) throw UsageError("--steps must be >= 1");
    if (a.stage == "finetune" && a.init.empty() && a.resume.empty() && !a.from_scratch)
        throw UsageError("finetune needs --init <pretrain checkpoint> (or --from-scratch)");
    ensure_dir(a.out);

    std::unique_ptr<nn::Model<float>> model;
    int start_step = 0;
    if (!a.resume.empty()) {
        nn::CheckpointInfo info;
        model = nn::load_checkpoint<float>(a.resume, &info);
        if (info.stage != a.stage) throw UsageError("--resume checkpoint is from stage " + info.stage);
        a.optim = info.optim;
        a.seed = info.seed;
        start_step = info.step;
    } else if (!a.init.empty()) {
        nn::CheckpointInfo info;
        model = nn::load_checkpoint<float>(a.init, &info);
        for (auto* p : model->parameters()) p->reset_state();
    } else {
        a.model.validate();
        model = std::make_unique<nn::Model<float>>(a.model, a.seed);
    }
    if (a.resume.empty() && a.total_steps <= 0) a.optim.total_steps = a.steps;
    if (a.total_steps > 0) a.optim.total_steps = a.total_steps;
    a.optim.validate();

    SequenceOptions opt;
    opt.mode = a.stage == "pretrain" ? SequenceMode::kPretrain : SequenceMode::kFull;
    opt.max_agents = a.max_agents;
    std::vector<nn::PreparedExample<float>> data;
    for (const auto& path : collect(a.data, ".json")) {
        const auto s = load_scenario(path);
        auto segs = scene_segments(s);
        if (static_cast<int>(segs.size()) > model->config().max_map_tokens)
            throw ConfigError(s.scenario_id + ": " + std::to_string(segs.size()) + " segments exceed max_map_tokens");
        const auto seq = build_sequence(s, segs, opt);
        data.push_back(nn::prepare_example<float>(seq, std::move(segs), model->config().knn_k));
    }

    nn::Trainer<float> trainer(*model, a.optim, a.seed);
    trainer.set_steps_done(start_step);
    const fs::path csv_path = fs::path(a.out) / (a.stage + "_loss.csv");
    const bool append = !a.resume.empty() && fs::exists(csv_path);
    std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + csv_path.string());
    if (!append) {
        csv << "step,loss,lr,grad_norm";
        for (const char* h : nn::HeadStats::kNames) csv << ",loss_" << h << ",acc_" << h;
        csv << "\n";
    }
    auto save = [&](const fs::path& p) {
        nn::save_checkpoint(p, *model, {model->config(), a.optim, trainer.steps_done(), a.stage, a.seed, true});
    };
    const auto t0 = std::chrono::steady_clock::now();
    trainer.run(data, a.steps, [&](const nn::StepResult& r) {
        csv << r.step << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm;
        for (int h = 0; h < nn::HeadStats::kCount; ++h) {
            const auto& st = r.stats.heads[static_cast<std::size_t>(h)];
            csv << ',' << (st.count ? st.loss : 0.0) << ',' << r.stats.accuracy(h);
        }
        csv << "\n";
        if (a.log_every > 0 && r.step % a.log_every == 0) {
            const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::cout << a.stage << " step " << r.step << " loss " << r.loss << " lr " << r.lr << " (" << el << " s)\n";
        }
        if (a.checkpoint_every > 0 && r.step % a.checkpoint_every == 0)
            save(fs::path(a.out) / (a.stage + "_step" + std::to_string(r.step) + ".ckpt"));
        return true;
    });
    const fs::path last = fs::path(a.out) / (a.stage + "_last.ckpt");
    save(last);
    std::cout << "saved " << last.string() << " at step " << trainer.steps_done() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct RolloutArgs {
    std::string checkpoint;
    std::vector<std::string> scenarios;
    std::string mode = "motion_prediction";
    std::uint64_t seed = 0;
    int rollouts = 1;
    std::string out;
    int horizon = 0;
    int target = 0;
    int max_agents = 128;
    int retries = 5;
    bool keep_end = false;
    bool svg = false;
    double top_p = 0.95;
};

int cmd_rollout(const RolloutArgs& a) {
    if (a.rollouts < 1) throw UsageError("--rollouts must be >= 1");
    nn::CheckpointInfo info;
    auto model = nn::load_checkpoint<float>(a.checkpoint, &info);
    RolloutConfig cfg;
    cfg.mode = rollout_mode_from_string(a.mode);
    cfg.horizon = a.horizon;
    cfg.target_agents = a.target;
    cfg.max_agents = a.max_agents;
    cfg.injection_retries = a.retries;
    cfg.force_end_logit_off = !a.keep_end;
    cfg.top_p = a.top_p;
    cfg.layout = info.stage == "pretrain" ? SequenceMode::kPretrain : SequenceMode::kFull;
    cfg.validate();
    ensure_dir(a.out);
    for (const auto& path : collect(a.scenarios, ".json")) {
        const auto s = load_scenario(path);
        for (int k = 0; k < a.rollouts; ++k) {
            cfg.seed = a.seed + static_cast<std::uint64_t>(k);
            RolloutEngine eng(*model, s, cfg);
            const auto r = eng.run();
            const std::string stem = s.scenario_id + "_" + a.mode + "_s" + std::to_string(cfg.seed);
            save_scenario(r.exported, fs::path(a.out) / (stem + ".json"));
            std::string log;
            for (const auto& l : r.log) log += l + "\n";
            write_text(fs::path(a.out) / (stem + ".log.jsonl"), log);
            if (a.svg) write_text(fs::path(a.out) / (stem + ".svg"), render_svg(r.exported));
            std::cout << stem << ": " << r.final_state.agents.size() << " agents at the last step, "
                      << r.injections << " injected, " << r.injection_failures << " failed injections\n";
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::vector<std::string> pred;
    std::vector<std::string> gt;
    std::string protocol = "strict";
    std::string out;
};

int cmd_eval(const EvalArgs& a) {
    std::vector<ScenarioDescription> preds, gts;
    for (const auto& p : collect(a.pred, ".json")) preds.push_back(load_scenario(p));
    for (const auto& p : collect(a.gt, ".json")) gts.push_back(load_scenario(p));
    const auto report = evaluate_scenarios(preds, gts, eval_protocol_from_string(a.protocol));
    json j = json::object();
    for (const auto& [k, v] : report) j[k] = std::isfinite(v) ? json(v) : json(nullptr);
    const std::string text = j.dump(2) + "\n";
    if (!a.out.empty()) write_text(a.out, text);
    std::cout << text;
    return 0;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
    std::string scenario;
    std::string out;
    std::string svg;
};

int cmd_inspect(const InspectArgs& a) {
    const auto s = load_scenario(a.scenario);
    const auto segs = scene_segments(s);
    std::map<std::string, int> by_type;
    json list = json::array();
    for (const auto& g : segs) {
        by_type[std::string(to_string(g.type))]++;
        list.push_back({{"id", g.segment_id},
                        {"polyline", g.polyline_id},
                        {"type", to_string(g.type)},
                        {"center", {g.center.x, g.center.y}},
                        {"heading", g.heading},
                        {"length", g.length},
                        {"points", g.points.size()}});
    }
    json j{{"scenario_id", s.scenario_id},
           {"polylines", s.polylines.size()},
           {"segments", segs.size()},
           {"segments_by_type", by_type},
           {"traffic_lights", s.traffic_lights.size()},
           {"agents", s.agents.size()}};
    std::cout << j.dump(2) << "\n";
    if (!a.out.empty()) {
        j["segment_list"] = list;
        write_text(a.out, j.dump(2) + "\n");
    }
    if (!a.svg.empty()) write_text(a.svg, render_svg(s));
    return 0;
}

void add_model_options(CLI::App* c, nn::ModelConfig& m, nn::OptimConfig& o) {
    c->add_option("--d-model", m.d_model, "model width")->capture_default_str();
    c->add_option("--heads", m.heads, "attention heads")->capture_default_str();
    c->add_option("--encoder-layers", m.encoder_layers)->capture_default_str();
    c->add_option("--decoder-layers", m.decoder_layers)->capture_default_str();
    c->add_option("--rs-layers", m.rs_layers)->capture_default_str();
    c->add_option("--ffn-mult", m.ffn_mult)->capture_default_str();
    c->add_option("--rel-hidden", m.rel_hidden)->capture_default_str();
    c->add_option("--max-map-tokens", m.max_map_tokens)->capture_default_str();
    c->add_option("--agent-id-vocab", m.agent_id_vocab)->capture_default_str();
    c->add_option("--light-id-vocab", m.light_id_vocab)->capture_default_str();
    c->add_option("--intra-vocab", m.intra_vocab)->capture_default_str();
    c->add_option("--knn-k", m.knn_k)->capture_default_str();
    c->add_option("--dropout", m.dropout)->capture_default_str();
    c->add_option("--lr", o.lr, "peak learning rate")->capture_default_str();
    c->add_option("--warmup", o.warmup, "linear warmup steps")->capture_default_str();
    c->add_option("--beta1", o.beta1)->capture_default_str();
    c->add_option("--beta2", o.beta2)->capture_default_str();
    c->add_option("--weight-decay", o.weight_decay)->capture_default_str();
    c->add_option("--clip-norm", o.clip_norm)->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Scene token model: synthesis, tokenization, training, rollout and evaluation.\n"
                 "Option precedence: command-line flags > --config file (key = value) > defaults."};
    app.require_subcommand(1);
    app.set_config("--config", "", "key = value configuration file");
    app.allow_config_extras(false);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "write synthetic scenarios");
    synth->add_option("--template", sa.tmpl, "straight | curve | intersection")->capture_default_str();
    synth->add_option("--count", sa.count)->capture_default_str();
    synth->add_option("--agents", sa.agents)->capture_default_str();
    synth->add_option("--seed", sa.seed)->capture_default_str();
    synth->add_option("--out", sa.out)->required();

    TokenizeArgs ta;
    auto* tok = app.add_subcommand("tokenize", "build token streams and mask summaries");
    tok->add_option("--in", ta.in, "scenario files or directories")->required();
    tok->add_option("--mode", ta.mode, "pretrain | full")->capture_default_str();
    tok->add_option("--out", ta.out)->required();
    tok->add_option("--max-agents", ta.max_agents)->capture_default_str();
    tok->add_option("--knn-k", ta.knn_k)->capture_default_str();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "train a model (pretrain or finetune stage)");
    train->add_option("--data", tr.data, "scenario files or directories")->required();
    train->add_option("--stage", tr.stage, "pretrain | finetune")->capture_default_str();
    train->add_option("--out", tr.out, "output directory")->required();
    train->add_option("--init", tr.init, "initialize weights from a checkpoint");
    train->add_option("--resume", tr.resume, "continue a run from its checkpoint");
    train->add_flag("--from-scratch", tr.from_scratch, "allow finetune without a pretrain checkpoint");
    train->add_option("--steps", tr.steps, "optimizer steps to run")->capture_default_str();
    train->add_option("--total-steps", tr.total_steps, "cosine horizon (default: --steps)");
    train->add_option("--checkpoint-every", tr.checkpoint_every)->capture_default_str();
    train->add_option("--log-every", tr.log_every)->capture_default_str();
    train->add_option("--seed", tr.seed)->capture_default_str();
    train->add_option("--max-agents", tr.max_agents)->capture_default_str();
    add_model_options(train, tr.model, tr.optim);

    RolloutArgs ra;
    auto* roll = app.add_subcommand("rollout", "generate scenarios with a trained model");
    roll->add_option("--checkpoint", ra.checkpoint)->required();
    roll->add_option("--scenario", ra.scenarios, "scenario files or directories")->required();
    roll->add_option("--mode", ra.mode, "motion_prediction | full_generation | densification | closed_loop")
        ->capture_default_str();
    roll->add_option("--seed", ra.seed)->capture_default_str();
    roll->add_option("--rollouts", ra.rollouts, "rollouts per scenario (seeds seed..seed+K-1)")->capture_default_str();
    roll->add_option("--out", ra.out)->required();
    roll->add_option("--horizon", ra.horizon, "steps (0 = scenario length)")->capture_default_str();
    roll->add_option("--target", ra.target, "densification agent target")->capture_default_str();
    roll->add_option("--max-agents", ra.max_agents)->capture_default_str();
    roll->add_option("--retries", ra.retries, "injection retries")->capture_default_str();
    roll->add_option("--top-p", ra.top_p)->capture_default_str();
    roll->add_flag("--keep-end", ra.keep_end, "densification: let the model end the agent list");
    roll->add_flag("--svg", ra.svg, "also write trajectory plots");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "compare rollouts with ground truth");
    ev->add_option("--pred", ea.pred)->required();
    ev->add_option("--gt", ea.gt)->required();
    ev->add_option("--protocol", ea.protocol, "strict | relaxed")->capture_default_str();
    ev->add_option("--out", ea.out, "JSON report path");

    InspectArgs ia;
    auto* ins = app.add_subcommand("inspect-map", "summarize the segmented map of a scenario");
    ins->add_option("--scenario", ia.scenario)->required();
    ins->add_option("--out", ia.out, "JSON with the segment list");
    ins->add_option("--svg", ia.svg, "SVG plot path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    try {
        if (*synth) return cmd_synth(sa);
        if (*tok) return cmd_tokenize(ta);
        if (*train) return cmd_train(tr);
        if (*roll) return cmd_rollout(ra);
        if (*ev) return cmd_eval(ea);
        if (*ins) return cmd_inspect(ia);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
