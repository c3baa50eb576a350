#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "ptse/errors.hpp"
#include "ptse/train.hpp"

using namespace ptse;

namespace {

RunConfig tiny() {
    RunConfig c;
    c.d_model = 16;
    c.heads = 2;
    c.num_queries = 6;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.correlation_layers = 1;
    c.stem_channels = {4, 8, 8};
    c.window_half = 3;
    c.lr = 1e-3;
    c.epochs = 3;
    c.samples_per_epoch = 4;
    c.batch_size = 2;
    return c;
}

std::vector<Sequence> tiny_data(std::size_t n) {
    SceneSpec spec;
    spec.frames = 8;
    spec.height = spec.width = 32;
    spec.min_size = 3;
    spec.max_size = 5;
    std::vector<Sequence> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sequence(spec, i));
    return out;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ptse_test_train_" + name);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("first batch loss is finite and positive") {
    Detector det(tiny(), 1);
    const auto data = tiny_data(1);
    Rng rng(2);
    const std::vector<VideoSample> batch{sample_training_item(data[0], 0, 3, 2, rng),
                                         sample_training_item(data[0], 5, 3, 2, rng)};
    Trainer trainer(det);
    const auto rec = trainer.step(batch, 1e-3);
    CHECK(std::isfinite(rec.loss.total));
    CHECK(rec.loss.total > 0.0);
    CHECK(rec.loss.total == doctest::Approx(0.5 * (sample_loss(Detector(tiny(), 1), batch[0]).total +
                                                   sample_loss(Detector(tiny(), 1), batch[1]).total)));
    CHECK(rec.grad_norm > 0.0);
    CHECK(trainer.steps() == 1);
    CHECK_THROWS_AS(trainer.step({}, 1e-3), ContractError);
}

TEST_CASE("learning rate drops by the configured factor") {
    RunConfig c;
    CHECK(c.drop_epoch() == 40);
    CHECK(c.learning_rate(39) == 1e-4);
    CHECK(c.learning_rate(40) == doctest::Approx(1e-5).epsilon(1e-15));
    CHECK(c.learning_rate(40) / c.learning_rate(0) == doctest::Approx(0.1).epsilon(1e-15));

    auto t = tiny();
    t.lr_drop_epoch = 2;
    Detector det(t, 1);
    const auto data = tiny_data(2);
    const auto r = train(det, data, {});
    REQUIRE(r.epochs.size() == 3);
    CHECK(r.epochs[0].lr == t.lr);
    CHECK(r.epochs[1].lr == t.lr);
    CHECK(r.epochs[2].lr == t.lr * 0.1);
    CHECK(r.steps.size() == 6);
    CHECK(r.steps.back().lr == t.lr * 0.1);
}

TEST_CASE("training loop output is byte-identical across runs") {
    auto t = tiny();
    t.eval_every = 3;
    const auto data = tiny_data(2);
    const auto held_out = tiny_data(1);
    std::vector<std::string> curves, logs;
    for (int run = 0; run < 2; ++run) {
        const auto dir = scratch("det" + std::to_string(run));
        Detector det(t, t.seed);
        const auto r = train(det, data, held_out, dir);
        REQUIRE(r.epochs.back().eval.has_value());
        for (const char* f : {"train_log.csv", "loss_curve.csv", "config.json", "checkpoint.ptse"}) {
            CHECK(std::filesystem::exists(dir / f));
        }
        curves.push_back(slurp(dir / "loss_curve.csv"));
        logs.push_back(slurp(dir / "train_log.csv"));
        CHECK(load_run_config(dir / "config.json", false).lr == t.lr);
        Detector reloaded(t, 99);
        reloaded.load(dir / "checkpoint.ptse");
        for (std::size_t i = 0; i < det.parameters().size(); ++i) {
            const auto a = det.parameters().entries()[i].tensor.data();
            const auto b = reloaded.parameters().entries()[i].tensor.data();
            CHECK(std::equal(a.begin(), a.end(), b.begin()));
        }
    }
    CHECK(curves[0] == curves[1]);
    CHECK(logs[0] == logs[1]);
    CHECK(std::count(curves[0].begin(), curves[0].end(), '\n') == 7);
    CHECK(std::count(logs[0].begin(), logs[0].end(), '\n') == 4);
}

TEST_CASE("a few steps on one sample reduce its loss") {
    auto t = tiny();
    t.grad_clip = 0.0;
    Detector det(t, 3);
    Rng rng(4);
    const std::vector<VideoSample> batch{sample_training_item(tiny_data(1)[0], 4, 3, 2, rng)};
    Trainer trainer(det);
    const double first = trainer.step(batch, 3e-3).loss.total;
    for (int i = 0; i < 40; ++i) trainer.step(batch, 3e-3);
    CHECK(sample_loss(det, batch[0]).total < 0.5 * first);
}

TEST_CASE("non-finite loss aborts with a diagnostic dump") {
    Detector det(tiny(), 1);
    for (const auto& e : det.parameters().entries()) {
        if (e.name.rfind("heads.", 0) == 0) {
            auto p = e.tensor;
            for (double& x : p.mutable_data()) x = std::nan("");
        }
    }
    const auto data = tiny_data(1);
    Rng rng(1);
    const std::vector<VideoSample> batch{sample_training_item(data[0], 2, 3, 2, rng)};
    const auto dir = scratch("nan");
    Trainer trainer(det);
    CHECK_THROWS_AS(trainer.step(batch, 1e-3, 1, dir), NumericError);
    REQUIRE(std::filesystem::exists(dir / "nan_dump.json"));
    const auto dump = nlohmann::json::parse(slurp(dir / "nan_dump.json"));
    CHECK(dump["step"] == 1);
    CHECK(dump["batch"][0]["sequence_id"] == 0);
    CHECK(dump["batch"][0]["frame"] == 2);
    CHECK(dump["batch"][0]["loss"].contains("classification"));
    CHECK(dump["batch"][0]["loss"].contains("giou"));
}
