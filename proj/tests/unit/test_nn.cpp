#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "../support/toy.hpp"
#include "scenestreamer/errors.hpp"
#include "scenestreamer/nn/train.hpp"

using namespace scenestreamer;
using namespace scenestreamer::nn;

TEST_CASE("tape primitives match finite differences") {
    Rng rng(1);
    Mat<double> a0(3, 4), w0(4, 5);
    for (int i = 0; i < a0.size(); ++i) a0.data()[i] = rng.normal();
    for (int i = 0; i < w0.size(); ++i) w0.data()[i] = rng.normal();
    Parameter<double> a("a", a0), w("w", w0);
    auto f = [&](Tape<double>& t) {
        Var x = t.linear(t.param(a), t.param(w));
        x = t.gelu(t.layer_norm(x));
        x = t.masked_max_pool(x, {1, 0, 1}, 3);
        return t.cross_entropy(x, {2});
    };
    Tape<double> t(true);
    t.backward(f(t));
    for (auto* p : {&a, &w}) {
        for (int i = 0; i < p->value.size(); ++i) {
            const double o = p->value.data()[i];
            p->value.data()[i] = o + 1e-6;
            Tape<double> t1(false);
            const double up = t1.scalar(f(t1));
            p->value.data()[i] = o - 1e-6;
            Tape<double> t2(false);
            const double dn = t2.scalar(f(t2));
            p->value.data()[i] = o;
            CHECK(p->grad.data()[i] == doctest::Approx((up - dn) / 2e-6).epsilon(1e-5));
        }
    }
}

TEST_CASE("toy model gradient check") {
    Model<double> model(toy::tiny_config(), 7);
    const auto ex = toy::tiny_example<double>(model.config().knn_k);
    const auto checks = toy::gradient_check(model, [&](Tape<double>& t) { return model.loss(t, ex); });
    for (const auto& c : checks) {
        INFO(c.name, " |g|=", c.grad_norm, " err=", c.abs_error);
        CHECK(c.rel_error < 1e-4);
    }
}

TEST_CASE("learning rate schedule") {
    OptimConfig c;
    c.warmup = 2000;
    c.total_steps = 10000;
    CHECK(learning_rate(c, 1000) == doctest::Approx(1.5e-4).epsilon(1e-12));
    CHECK(learning_rate(c, 2000) == doctest::Approx(3e-4));
    CHECK(learning_rate(c, 6000) == doctest::Approx(1.5e-4));
    CHECK(learning_rate(c, 10000) == doctest::Approx(0.0));
}

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("sstr_test_" + name);
}

}  // namespace

TEST_CASE("checkpoint round trip keeps parameters, moments and header") {
    Model<double> model(toy::tiny_config(), 3);
    const auto ex = toy::tiny_example<double>(model.config().knn_k);
    OptimConfig oc;
    oc.warmup = 2;
    Trainer<double> tr(model, oc, 9);
    tr.step(ex);
    const auto path = temp_path("roundtrip.ckpt");
    save_checkpoint(path, model, {model.config(), oc, tr.steps_done(), "finetune", 9, true});
    CheckpointInfo info;
    const auto loaded = load_checkpoint<double>(path, &info);
    CHECK(info.step == 1);
    CHECK(info.stage == "finetune");
    CHECK(info.seed == 9);
    CHECK(info.config == model.config());
    CHECK(info.optim.warmup == 2);
    for (auto* p : model.parameters()) {
        const auto* q = loaded->find(p->name);
        REQUIRE(q != nullptr);
        CHECK(q->value == p->value);
        CHECK(q->m == p->m);
        CHECK(q->v == p->v);
    }
    // float conversion: stored values within float precision
    const auto as_float = load_checkpoint<float>(path);
    for (auto* p : model.parameters())
        CHECK((as_float->find(p->name)->value.cast<double>() - p->value).cwiseAbs().maxCoeff() < 1e-6);
    std::filesystem::remove(path);
}

TEST_CASE("resumed training reproduces the next step") {
    const auto ex = toy::tiny_example<double>(toy::tiny_config().knn_k);
    const std::vector<PreparedExample<double>> data{ex, ex};
    OptimConfig oc;
    oc.warmup = 3;
    oc.lr = 1e-2;
    Model<double> a(toy::tiny_config(), 5);
    Trainer<double> ta(a, oc, 17);
    ta.run(data, 2);
    const auto path = temp_path("resume.ckpt");
    save_checkpoint(path, a, {a.config(), oc, ta.steps_done(), "pretrain", 17, true});
    double cont = 0;
    ta.run(data, 1, [&](const StepResult& r) {
        cont = r.loss;
        return true;
    });

    CheckpointInfo info;
    auto b = load_checkpoint<double>(path, &info);
    Trainer<double> tb(*b, info.optim, info.seed);
    tb.set_steps_done(info.step);
    double resumed = 0;
    tb.run(data, 1, [&](const StepResult& r) {
        resumed = r.loss;
        return true;
    });
    CHECK(resumed == cont);
    for (auto* p : a.parameters()) CHECK(b->find(p->name)->value == p->value);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint errors") {
    const auto path = temp_path("garbage.ckpt");
    {
        std::ofstream f(path, std::ios::binary);
        f << "not a checkpoint";
    }
    CHECK_THROWS_AS(read_checkpoint_info(path), Error);
    CHECK_THROWS_AS(load_checkpoint<float>(temp_path("missing.ckpt")), Error);
    std::filesystem::remove(path);
}

TEST_CASE("training aborts on a non-finite loss") {
    Model<double> model(toy::tiny_config(), 3);
    const auto ex = toy::tiny_example<double>(model.config().knn_k);
    model.find("head.tl.1.w")->value.setConstant(std::nan(""));
    Trainer<double> tr(model, OptimConfig{}, 1);
    CHECK_THROWS_AS(tr.step(ex), NumericError);
}

TEST_CASE("map encoder is invariant to segment order up to the id embedding") {
    auto cfg = toy::tiny_config();
    Model<double> model(cfg, 2);
    model.find("emb.map_id")->value.setZero();
    const auto s = toy::tiny_scenario();
    auto segs = segment_polylines(s, default_reference(s));
    auto rev = segs;
    std::reverse(rev.begin(), rev.end());
    for (std::size_t i = 0; i < rev.size(); ++i) rev[i].segment_id = static_cast<int>(i);
    Tape<double> t(false);
    const auto a = t.value(model.encode_map(t, prepare_map<double>(segs, 64)));
    const auto b = t.value(model.encode_map(t, prepare_map<double>(rev, 64)));
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        CHECK((a.row(i) - b.row(a.rows() - 1 - i)).cwiseAbs().maxCoeff() < 1e-10);
}
