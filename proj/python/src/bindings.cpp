#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "scenestreamer/errors.hpp"
#include "scenestreamer/kinematics.hpp"
#include "scenestreamer/map_codec.hpp"
#include "scenestreamer/metrics.hpp"
#include "scenestreamer/nn/train.hpp"
#include "scenestreamer/rollout.hpp"
#include "scenestreamer/sampling.hpp"
#include "scenestreamer/sequence.hpp"
#include "scenestreamer/state_codec.hpp"

namespace py = pybind11;
using namespace scenestreamer;

namespace {

SampleSet to_set(const std::vector<std::vector<double>>& v) {
    SampleSet s;
    s.values = v;
    return s;
}

// Checkpoint plus the rollout settings derived from its header.
struct LoadedModel {
    std::unique_ptr<nn::Model<float>> model;
    nn::CheckpointInfo info;
};

py::dict rollout(LoadedModel& m, const ScenarioDescription& s, const std::string& mode, std::uint64_t seed,
                 int horizon, int target, double top_p) {
    RolloutConfig cfg;
    cfg.mode = rollout_mode_from_string(mode);
    cfg.seed = seed;
    cfg.horizon = horizon;
    cfg.target_agents = target;
    cfg.top_p = top_p;
    cfg.layout = m.info.stage == "pretrain" ? SequenceMode::kPretrain : SequenceMode::kFull;
    cfg.validate();
    RolloutResult r;
    {
        py::gil_scoped_release nogil;
        RolloutEngine eng(*m.model, s, cfg);
        r = eng.run();
    }
    py::dict out;
    out["scenario"] = r.exported;
    out["log"] = r.log;
    out["injections"] = r.injections;
    out["injection_failures"] = r.injection_failures;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Scenario tokenization, bicycle kinematics, rollouts and metrics";

    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

    py::class_<ScenarioDescription>(m, "Scenario")
        .def_static("from_json", [](const std::string& text) { return parse_scenario(text); })
        .def_static("load", [](const std::filesystem::path& p) { return load_scenario(p); })
        .def("to_json", [](const ScenarioDescription& s) { return serialize_scenario(s); })
        .def("save", [](const ScenarioDescription& s, const std::filesystem::path& p) { save_scenario(s, p); })
        .def("validate", [](const ScenarioDescription& s) { validate(s); })
        .def_readwrite("scenario_id", &ScenarioDescription::scenario_id)
        .def_readonly("dt", &ScenarioDescription::dt)
        .def_readonly("num_steps", &ScenarioDescription::num_steps)
        .def_property_readonly("num_agents", [](const ScenarioDescription& s) { return s.agents.size(); })
        .def_property_readonly("num_lights", [](const ScenarioDescription& s) { return s.traffic_lights.size(); })
        .def("positions", [](const ScenarioDescription& s, std::size_t agent) {
            std::vector<std::optional<std::pair<double, double>>> out;
            for (const auto& st : s.agents.at(agent).states)
                out.push_back(st.valid ? std::optional(std::make_pair(st.x, st.y)) : std::nullopt);
            return out;
        })
        .def("__eq__", [](const ScenarioDescription& a, const ScenarioDescription& b) { return a == b; });

    m.def("synth_scenario", [](const std::string& tmpl, int agents, std::uint64_t seed) {
        return synth_scenario(synth_template_from_string(tmpl), agents, seed);
    }, py::arg("template"), py::arg("agents"), py::arg("seed"));

    py::class_<KinState>(m, "KinState")
        .def(py::init<double, double, double, double>(), py::arg("x") = 0.0, py::arg("y") = 0.0,
             py::arg("psi") = 0.0, py::arg("v") = 0.0)
        .def_readwrite("x", &KinState::x)
        .def_readwrite("y", &KinState::y)
        .def_readwrite("psi", &KinState::psi)
        .def_readwrite("v", &KinState::v)
        .def("__eq__", [](const KinState& a, const KinState& b) { return a == b; })
        .def("__repr__", [](const KinState& s) {
            return "KinState(x=" + std::to_string(s.x) + ", y=" + std::to_string(s.y) + ", psi=" +
                   std::to_string(s.psi) + ", v=" + std::to_string(s.v) + ")";
        });

    m.def("wrap_angle", &wrap_angle);
    m.def("step_bicycle", &step_bicycle, py::arg("state"), py::arg("accel"), py::arg("yaw_rate"), py::arg("dt"));
    m.def("accel_value", &accel_value);
    m.def("yaw_rate_value", &yaw_rate_value);
    m.def("apply_label", [](const KinState& s, int label, double dt) { return apply_label(s, MotionLabel(label), dt); });
    m.def("best_motion_label",
          [](const KinState& s, double length, double width, std::tuple<double, double, double> next, double dt) {
              const auto [x, y, psi] = next;
              const auto fit = best_motion_label(s, length, width, Pose2{x, y, psi}, dt);
              return py::make_tuple(fit.label.index(), fit.ace);
          },
          py::arg("state"), py::arg("length"), py::arg("width"), py::arg("next_pose"), py::arg("dt"));
    m.attr("MOTION_VOCAB_SIZE") = motion::kVocabSize;
    m.attr("MOTION_START") = motion::kStart;

    m.def("quantize", &quantize, py::arg("value"), py::arg("lo"), py::arg("hi"), py::arg("n") = 81);
    m.def("dequantize", &dequantize, py::arg("bin"), py::arg("lo"), py::arg("hi"), py::arg("n") = 81);

    m.def("num_segments", [](const ScenarioDescription& s) {
        return segment_polylines(s, default_reference(s)).size();
    });
    m.def("tokenize", [](const ScenarioDescription& s, const std::string& mode) {
        const auto segs = segment_polylines(s, default_reference(s));
        SequenceOptions opt;
        opt.mode = sequence_mode_from_string(mode);
        return sequence_to_jsonl(build_sequence(s, segs, opt));
    }, py::arg("scenario"), py::arg("mode") = "full");

    m.def("nucleus_support", &nucleus_support, py::arg("probs"), py::arg("p"));
    m.def("sample", [](const std::vector<double>& probs, const std::string& strategy, std::uint64_t seed, int n,
                       double top_p) {
        Rng rng(seed);
        const auto st = sample_strategy_from_string(strategy);
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) out.push_back(sample(probs, st, rng, top_p));
        return out;
    }, py::arg("probs"), py::arg("strategy") = "nucleus", py::arg("seed") = 0, py::arg("n") = 1,
          py::arg("top_p") = 0.95);

    m.def("mmd", [](const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                    std::optional<double> bandwidth) { return mmd(to_set(a), to_set(b), bandwidth); },
          py::arg("a"), py::arg("b"), py::arg("bandwidth") = py::none());
    m.def("evaluate", [](const std::vector<ScenarioDescription>& preds, const std::vector<ScenarioDescription>& gts,
                         const std::string& protocol) {
        return evaluate_scenarios(preds, gts, eval_protocol_from_string(protocol));
    }, py::arg("preds"), py::arg("gts"), py::arg("protocol") = "strict");

    py::class_<LoadedModel>(m, "Model")
        .def_static("load", [](const std::filesystem::path& p) {
            LoadedModel lm;
            lm.model = nn::load_checkpoint<float>(p, &lm.info);
            return lm;
        })
        .def_static("random", [](int d_model, std::uint64_t seed) {
            nn::ModelConfig c;
            c.d_model = d_model;
            c.validate();
            LoadedModel lm;
            lm.model = std::make_unique<nn::Model<float>>(c, seed);
            lm.info.config = c;
            lm.info.stage = "finetune";
            return lm;
        }, py::arg("d_model") = 32, py::arg("seed") = 0)
        .def_property_readonly("stage", [](const LoadedModel& lm) { return lm.info.stage; })
        .def_property_readonly("num_parameters", [](const LoadedModel& lm) { return lm.model->num_scalars(); })
        .def("rollout", &rollout, py::arg("scenario"), py::arg("mode") = "motion_prediction", py::arg("seed") = 0,
             py::arg("horizon") = 0, py::arg("target") = 0, py::arg("top_p") = 0.95);
}
