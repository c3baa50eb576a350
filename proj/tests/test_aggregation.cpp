#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ptse/aggregation.hpp"
#include "ptse/errors.hpp"
#include "ptse/gradcheck.hpp"
#include "ptse/ops.hpp"

using namespace ptse;

namespace {

MemoryMap random_map(std::size_t gh, std::size_t gw, std::size_t d, std::uint64_t seed, int offset,
                     bool grad = false) {
    return {random_tensor({gh * gw, d}, seed, grad), gh, gw, offset};
}

AggregationOptions small(bool raw = false) {
    AggregationOptions o;
    o.dim = 12;
    o.heads = 6;
    o.raw = raw;
    if (raw) {
        o.layers = 1;
        o.heads = 1;
    }
    return o;
}

// softmax(Q V^T / sqrt(d)) V with plain loops.
std::vector<double> attend(const Tensor& q, const Tensor& v) {
    const auto nq = q.rows(), nv = v.rows(), d = q.cols();
    std::vector<double> out(nq * d, 0.0);
    for (std::size_t i = 0; i < nq; ++i) {
        std::vector<double> s(nv);
        double mx = -1e300;
        for (std::size_t j = 0; j < nv; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * v.at(j, c);
            s[j] = dot / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, s[j]);
        }
        double total = 0.0;
        for (auto& x : s) total += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < nv; ++j) {
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += s[j] / total * v.at(j, c);
        }
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("tfam attends over every context token") {
    ParameterSet params;
    Rng rng(1);
    Aggregator agg(params, "agg", small(), rng);
    const auto target = random_map(3, 3, 12, 1, 0);
    const std::vector<MemoryMap> ctx{random_map(3, 3, 12, 2, -2), random_map(3, 3, 12, 3, 4),
                                     random_map(3, 3, 12, 4, 7)};
    Tape tape;
    const auto h = agg.tfam(tape, target, ctx);
    CHECK(h.h.shape() == target.tokens.shape());

    std::vector<Tensor> maps;
    for (const auto& c : ctx) maps.push_back(c.tokens);
    CorrelationTrace trace;
    const auto direct = agg.tfam_block().forward(tape, target.tokens, stack_tokens(tape, maps), &trace);
    CHECK(trace.attention[0].shape() == Shape{9, 27});
    CHECK(std::ranges::equal(direct.data(), h.h.data()));

    SUBCASE("context order does not matter") {
        const std::vector<MemoryMap> shuffled{ctx[2], ctx[0], ctx[1]};
        CHECK(max_abs_diff(agg.tfam(tape, target, shuffled).h, h.h) < 1e-12);
    }
    SUBCASE("context content does") {
        auto changed = ctx;
        changed[1] = random_map(3, 3, 12, 99, 4);
        CHECK(max_abs_diff(agg.tfam(tape, target, changed).h, h.h) > 1e-6);
    }
    SUBCASE("contract errors") {
        CHECK_THROWS_AS(agg.tfam(tape, target, {}), ContractError);
        const std::vector<MemoryMap> bad{random_map(3, 4, 12, 5, 1)};
        CHECK_THROWS_AS(agg.tfam(tape, target, bad), ContractError);
        CHECK_THROWS_AS(agg.stam(tape, target, bad[0]), ContractError);
    }
}

TEST_CASE("raw tfam with the target as its only context averages the target") {
    ParameterSet params;
    Rng rng(2);
    Aggregator agg(params, "agg", small(true), rng);
    const auto target = random_map(2, 3, 12, 8, 0);
    const std::vector<MemoryMap> ctx{target};
    Tape tape;
    const auto h = agg.tfam(tape, target, ctx);
    const auto a = attend(target.tokens, target.tokens);
    for (std::size_t i = 0; i < h.h.numel(); ++i) {
        CHECK(std::abs(h.h.data()[i] - a[i] - target.tokens.data()[i]) < 1e-12);
    }
}

TEST_CASE("raw stam with a fresh gate is a fair blend") {
    ParameterSet params;
    Rng rng(3);
    Aggregator agg(params, "agg", small(true), rng);
    const auto target = random_map(2, 2, 12, 10, 0);
    const auto ctx = random_map(2, 2, 12, 11, 5);
    Tape tape;
    const auto f = agg.stam(tape, target, ctx);
    CHECK(f.offset == 5);
    const auto a = attend(target.tokens, ctx.tokens);
    for (std::size_t i = 0; i < f.f.numel(); ++i) {
        const double expected = a[i] + 0.5 * target.tokens.data()[i] + 0.5 * ctx.tokens.data()[i];
        CHECK(std::abs(f.f.data()[i] - expected) < 1e-12);
    }
    const auto self = agg.stam(tape, target, target);
    for (double x : self.f.data()) CHECK(std::isfinite(x));
}

TEST_CASE("progressive aggregation") {
    ParameterSet params;
    Rng rng(4);
    Aggregator agg(params, "agg", small(), rng);
    const auto target = random_map(3, 2, 12, 20, 0);
    const std::vector<MemoryMap> ctx{random_map(3, 2, 12, 21, -1), random_map(3, 2, 12, 22, 3)};
    Tape tape;
    const auto h = agg.tfam(tape, target, ctx);
    std::vector<SpatialMemory> f;
    for (const auto& c : ctx) f.push_back(agg.stam(tape, target, c));
    CHECK(f.size() == ctx.size());
    const auto e = agg.progressive_aggregate(tape, h, f, target);
    CHECK(e.e.shape() == target.tokens.shape());
    CHECK(e.r.shape() == target.tokens.shape());

    const std::vector<SpatialMemory> reversed{f[1], f[0]};
    const auto e2 = agg.progressive_aggregate(tape, h, reversed, target);
    CHECK(max_abs_diff(e.e, e2.e) < 1e-12);
    CHECK(max_abs_diff(e.r, e2.r) < 1e-12);

    CHECK_THROWS_AS(agg.progressive_aggregate(tape, h, {}, target), ContractError);

    const auto trace = agg.run(tape, target, ctx);
    CHECK(std::ranges::equal(trace.enhanced.r.data(), e.r.data()));
}

TEST_CASE("saturated residual gate gives the context-dominant limit") {
    ParameterSet params;
    Rng rng(5);
    Aggregator agg(params, "agg", small(true), rng);
    auto bias = agg.rgc_block().gate(0)->bias();
    std::ranges::fill(bias.mutable_data(), 30.0);
    const auto target = random_map(2, 2, 12, 30, 0);
    const std::vector<MemoryMap> ctx{random_map(2, 2, 12, 31, 2)};
    Tape tape;
    const auto trace = agg.run(tape, target, ctx);
    const auto a = attend(trace.enhanced.e, target.tokens);
    for (std::size_t i = 0; i < trace.enhanced.r.numel(); ++i) {
        CHECK(std::abs(trace.enhanced.r.data()[i] - a[i] - trace.enhanced.e.data()[i]) < 1e-12);
    }
}

TEST_CASE("ablation switches keep shapes") {
    const auto target = random_map(2, 3, 12, 40, 0);
    const std::vector<MemoryMap> ctx{random_map(2, 3, 12, 41, 1), random_map(2, 3, 12, 42, -3)};
    for (int mask = 0; mask < 16; ++mask) {
        auto o = small();
        o.enable_tfam = mask & 1;
        o.enable_stam = mask & 2;
        o.gated = mask & 4;
        o.residual_gated = mask & 8;
        ParameterSet params;
        Rng rng(6);
        Aggregator agg(params, "agg", o, rng);
        Tape tape;
        const auto trace = agg.run(tape, target, ctx);
        CHECK(trace.temporal.h.shape() == target.tokens.shape());
        CHECK(trace.enhanced.e.shape() == target.tokens.shape());
        CHECK(trace.enhanced.r.shape() == target.tokens.shape());
        CHECK(trace.spatial.size() == (o.enable_stam ? 2u : 0u));
        for (double x : trace.enhanced.r.data()) CHECK(std::isfinite(x));
        if (!o.enable_tfam && !o.enable_stam) CHECK(trace.enhanced.r.same_node(target.tokens));
        if (!o.enable_tfam) CHECK(trace.temporal.h.same_node(target.tokens));
        if (!o.enable_stam) CHECK(trace.enhanced.e.same_node(trace.temporal.h));
        if (!o.residual_gated) CHECK(trace.enhanced.r.same_node(trace.enhanced.e));

        const auto alone = agg.run(tape, target, {});
        CHECK(alone.enhanced.r.same_node(target.tokens));
    }
}

TEST_CASE("gradients reach every context frame's pixels") {
    ParameterSet params;
    Rng rng(7);
    EncoderOptions eo;
    eo.dim = 12;
    eo.heads = 6;
    eo.layers = 1;
    eo.stem_channels = {4, 6, 8};
    FrameEncoder enc(params, "enc", eo, rng);
    Aggregator agg(params, "agg", small(), rng);

    std::vector<Tensor> pixels;
    for (std::uint64_t s = 0; s < 3; ++s) {
        auto t = random_tensor({3, 16, 16}, 50 + s, true);
        for (auto& v : t.mutable_data()) v = 0.5 * (v + 1.0);
        pixels.push_back(t);
    }
    Tape tape;
    const auto target = enc.encode(tape, pixels[0], 0);
    const std::vector<MemoryMap> ctx{enc.encode(tape, pixels[1], -2), enc.encode(tape, pixels[2], 2)};
    tape.backward(random_projection(tape, agg.run(tape, target, ctx).enhanced.r, 3));
    for (const auto& p : pixels) {
        double norm = 0.0;
        for (double g : p.grad()) norm += g * g;
        CHECK(norm > 0.0);
    }
}

TEST_CASE("aggregation gradient check") {
    ParameterSet params;
    Rng rng(8);
    auto o = small();
    o.layers = 1;
    Aggregator agg(params, "agg", o, rng);
    for (const auto& e : params.entries()) {
        if (e.name.find("gate") == std::string::npos) continue;
        Rng r(e.name.size());
        auto t = e.tensor;
        for (auto& x : t.mutable_data()) x = r.uniform(-0.3, 0.3);
    }
    std::vector<Tensor> inputs{random_tensor({4, 12}, 60), random_tensor({4, 12}, 61), random_tensor({4, 12}, 62)};
    for (const auto& p : params.entries()) inputs.push_back(p.tensor);
    const auto r = gradient_check(
        "aggregation",
        [&](Tape& t, std::span<const Tensor> in) {
            const MemoryMap target{in[0], 2, 2, 0};
            const std::vector<MemoryMap> ctx{{in[1], 2, 2, -1}, {in[2], 2, 2, 1}};
            return random_projection(t, agg.run(t, target, ctx).enhanced.r, 4);
        },
        inputs, 9, {.probes = 40});
    INFO("worst " << r.worst_relative_error);
    CHECK(r.passed);
}

TEST_CASE("feature heatmap and pgm") {
    const auto tokens = Tensor::matrix({{0, 0}, {3, 4}, {6, 8}, {1, 0}});
    const auto bytes = feature_heatmap(tokens, 2, 2);
    CHECK(bytes == std::vector<unsigned char>{0, 128, 255, 26});
    CHECK_THROWS_AS(feature_heatmap(tokens, 3, 2), DimensionError);
    CHECK(feature_heatmap(Tensor::full({4, 2}, 1.0), 2, 2) == std::vector<unsigned char>(4, 0));

    const auto path = std::filesystem::temp_directory_path() / "ptse_heatmap_test.pgm";
    write_pgm(path, bytes, 2, 2);
    std::ifstream is(path, std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(is)), {});
    CHECK(text == std::string("P5\n2 2\n255\n") + std::string(bytes.begin(), bytes.end()));
    std::filesystem::remove(path);
}
