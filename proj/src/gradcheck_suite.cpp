#include "ptse/gradcheck_suite.hpp"

#include <chrono>
#include <cstdio>

#include "ptse/aggregation.hpp"
#include "ptse/correlation.hpp"
#include "ptse/encoder.hpp"
#include "ptse/matching_loss.hpp"
#include "ptse/ops.hpp"
#include "ptse/query_decode.hpp"
#include "ptse/rng.hpp"

namespace ptse {

namespace {

constexpr std::size_t kDim = 12;
constexpr std::size_t kHeads = 3;

Tensor uniform_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
    Rng rng(seed);
    Buffer data(shape_numel(shape));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data), true);
}

std::vector<Tensor> with_params(std::vector<Tensor> inputs, const ParameterSet& params) {
    for (const auto& e : params.entries()) inputs.push_back(e.tensor);
    return inputs;
}

// Zero-initialized gates make the gated path symmetric; random gates give
// every branch of the mixture a distinct gradient.
void randomize_gates(ParameterSet& params, std::uint64_t seed) {
    Rng rng(seed);
    for (const auto& e : params.entries()) {
        if (e.name.find("gate") == std::string::npos) continue;
        auto t = e.tensor;
        for (auto& x : t.mutable_data()) x = rng.uniform(-0.3, 0.3);
    }
}

using Body = std::function<GradCheckResult(const std::string&, std::uint64_t, const GradCheckOptions&)>;

// Elementwise/structural op on random inputs: loss = <op(inputs), R>.
Body unary(std::function<Tensor(Tape&, const Tensor&)> op, Shape shape) {
    return [op, shape](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        return gradient_check(
            name, [op](Tape& t, std::span<const Tensor> in) { return random_projection(t, op(t, in[0]), 1); },
            {random_tensor(shape, seed + 1)}, seed, o);
    };
}

Body binary(std::function<Tensor(Tape&, const Tensor&, const Tensor&)> op, Shape a, Shape b) {
    return [op, a, b](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        return gradient_check(
            name,
            [op](Tape& t, std::span<const Tensor> in) { return random_projection(t, op(t, in[0], in[1]), 1); },
            {random_tensor(a, seed + 1), random_tensor(b, seed + 2)}, seed, o);
    };
}

std::vector<GradCheckCase> build() {
    std::vector<GradCheckCase> cases;
    auto reg = [&](const std::string& module, const std::string& name, Body body) {
        cases.push_back({module, name, [name, body](std::uint64_t seed, const GradCheckOptions& o) {
                             return body(name, seed, o);
                         }});
    };

    // tensor engine
    reg("tensor_engine", "matmul", binary([](Tape& t, const Tensor& a, const Tensor& b) { return matmul(t, a, b); },
                                          {4, 5}, {5, 3}));
    reg("tensor_engine", "matmul_nt",
        binary([](Tape& t, const Tensor& a, const Tensor& b) { return matmul_nt(t, a, b); }, {4, 5}, {3, 5}));
    reg("tensor_engine", "transpose", unary([](Tape& t, const Tensor& a) { return transpose(t, a); }, {3, 5}));
    reg("tensor_engine", "add", binary([](Tape& t, const Tensor& a, const Tensor& b) { return add(t, a, b); },
                                       {3, 4}, {3, 4}));
    reg("tensor_engine", "sub", binary([](Tape& t, const Tensor& a, const Tensor& b) { return sub(t, a, b); },
                                       {3, 4}, {3, 4}));
    reg("tensor_engine", "hadamard",
        binary([](Tape& t, const Tensor& a, const Tensor& b) { return hadamard(t, a, b); }, {3, 4}, {3, 4}));
    reg("tensor_engine", "scale", unary([](Tape& t, const Tensor& a) { return scale(t, a, -1.7); }, {3, 4}));
    reg("tensor_engine", "affine", unary([](Tape& t, const Tensor& a) { return affine(t, a, 0.3, 2.0); }, {3, 4}));
    reg("tensor_engine", "add_bias",
        binary([](Tape& t, const Tensor& a, const Tensor& b) { return add_bias(t, a, b); }, {3, 4}, {4}));
    reg("tensor_engine", "relu", unary([](Tape& t, const Tensor& a) { return relu(t, a); }, {4, 5}));
    reg("tensor_engine", "sigmoid", unary([](Tape& t, const Tensor& a) { return sigmoid(t, scale(t, a, 3.0)); },
                                          {4, 5}));
    reg("tensor_engine", "softmax_rows",
        unary([](Tape& t, const Tensor& a) { return softmax_rows(t, scale(t, a, 3.0)); }, {4, 6}));
    reg("tensor_engine", "layer_norm", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        return gradient_check(
            name,
            [](Tape& t, std::span<const Tensor> in) {
                return random_projection(t, layer_norm(t, in[0], in[1], in[2]), 1);
            },
            {random_tensor({4, 6}, seed + 1), uniform_tensor({6}, seed + 2, 0.5, 1.5), random_tensor({6}, seed + 3)},
            seed, o);
    });
    reg("tensor_engine", "sum", unary([](Tape& t, const Tensor& a) { return sum(t, hadamard(t, a, a)); }, {3, 4}));
    reg("tensor_engine", "mean", unary([](Tape& t, const Tensor& a) { return mean(t, hadamard(t, a, a)); }, {3, 4}));
    reg("tensor_engine", "weighted_sum", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        const auto w = random_tensor({3, 4}, seed + 7, false);
        return gradient_check(
            name,
            [w](Tape& t, std::span<const Tensor> in) {
                const auto sq = hadamard(t, in[0], in[0]);
                return weighted_sum(t, sq, w.data());
            },
            {random_tensor({3, 4}, seed + 1)}, seed, o);
    });
    reg("tensor_engine", "concat",
        binary(
            [](Tape& t, const Tensor& a, const Tensor& b) {
                const auto rows = concat(t, {a, b}, 0);
                return concat(t, {rows, rows}, 1);
            },
            {2, 3}, {4, 3}));
    reg("tensor_engine", "slice", unary([](Tape& t, const Tensor& a) {
            return concat(t, {slice(t, a, 0, 1, 3), slice(t, slice(t, a, 1, 2, 5), 0, 0, 2)}, 1);
        }, {4, 6}));
    reg("tensor_engine", "gather_rows", unary([](Tape& t, const Tensor& a) {
            const std::vector<std::size_t> rows{3, 0, 3, 1};
            return gather_rows(t, a, rows);
        }, {5, 3}));
    reg("tensor_engine", "reshape", unary([](Tape& t, const Tensor& a) {
            return matmul(t, reshape(t, a, {4, 3}), reshape(t, a, {3, 4}));
        }, {2, 6}));
    reg("tensor_engine", "conv2d", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        return gradient_check(
            name,
            [](Tape& t, std::span<const Tensor> in) {
                const auto a = conv2d(t, in[0], in[1], in[2], 2, 1);
                return add(t, random_projection(t, a, 1), random_projection(t, conv2d(t, in[0], in[1], in[2], 1, 0), 2));
            },
            {random_tensor({2, 7, 6}, seed + 1), random_tensor({3, 2, 3, 3}, seed + 2), random_tensor({3}, seed + 3)},
            seed, o);
    });

    // nn layers
    reg("nn_layers", "linear", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        ParameterSet p;
        Rng rng(seed);
        Linear lin(p, "lin", 5, 4, rng);
        return gradient_check(
            name, [lin](Tape& t, std::span<const Tensor> in) { return random_projection(t, lin.forward(t, in[0]), 1); },
            with_params({random_tensor({3, 5}, seed + 1)}, p), seed, o);
    });
    reg("nn_layers", "layer_norm_module", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        ParameterSet p;
        LayerNorm ln(p, "ln", 6);
        return gradient_check(
            name, [ln](Tape& t, std::span<const Tensor> in) { return random_projection(t, ln.forward(t, in[0]), 1); },
            with_params({random_tensor({3, 6}, seed + 1)}, p), seed, o);
    });
    reg("nn_layers", "feed_forward", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        ParameterSet p;
        Rng rng(seed);
        FeedForward ffn(p, "ffn", 6, 24, rng);
        return gradient_check(
            name, [ffn](Tape& t, std::span<const Tensor> in) { return random_projection(t, ffn.forward(t, in[0]), 1); },
            with_params({random_tensor({3, 6}, seed + 1)}, p), seed, o);
    });
    reg("nn_layers", "attention_kernel", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        return gradient_check(
            name,
            [](Tape& t, std::span<const Tensor> in) {
                return random_projection(t, attention_kernel(t, in[0], in[1], in[2], 3).output, 1);
            },
            {random_tensor({4, 6}, seed + 1), random_tensor({5, 6}, seed + 2), random_tensor({5, 6}, seed + 3)}, seed,
            o);
    });
    reg("nn_layers", "multi_head_attention", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        ParameterSet p;
        Rng rng(seed);
        MultiHeadAttention mha(p, "mha", kDim, kHeads, rng);
        return gradient_check(
            name,
            [mha](Tape& t, std::span<const Tensor> in) {
                return random_projection(t, mha.forward(t, in[0], in[1]).output, 1);
            },
            with_params({random_tensor({4, kDim}, seed + 1), random_tensor({6, kDim}, seed + 2)}, p), seed, o);
    });

    // correlation
    for (const auto mode : {CorrelationMode::plain, CorrelationMode::gated}) {
        const bool gated = mode == CorrelationMode::gated;
        reg("correlation", gated ? "gated_correlate" : "correlate",
            [mode, gated](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
                ParameterSet p;
                Rng rng(seed);
                CorrelationOptions co;
                co.dim = kDim;
                co.heads = kHeads;
                co.layers = 2;
                co.mode = mode;
                CorrelationBlock block(p, "corr", co, rng);
                randomize_gates(p, seed + 5);
                const std::size_t nv = gated ? 4 : 7;
                return gradient_check(
                    name,
                    [block, gated](Tape& t, std::span<const Tensor> in) {
                        const auto y = gated ? gated_correlate(t, block, in[0], in[1]) : correlate(t, block, in[0], in[1]);
                        return random_projection(t, y, 1);
                    },
                    with_params({random_tensor({4, kDim}, seed + 1), random_tensor({nv, kDim}, seed + 2)}, p), seed,
                    o);
            });
    }

    // encoder
    auto encoder_case = [&](const std::string& name, bool full) {
        reg("encoder", name, [full](const std::string& n, std::uint64_t seed, const GradCheckOptions& o) {
            ParameterSet p;
            Rng rng(seed);
            EncoderOptions eo;
            eo.dim = kDim;
            eo.heads = kHeads;
            eo.layers = 1;
            eo.stem_channels = {3, 4, 6};
            FrameEncoder enc(p, "enc", eo, rng);
            return gradient_check(
                n,
                [enc, full](Tape& t, std::span<const Tensor> in) {
                    const auto y = full ? enc.encode(t, in[0], 1).tokens : enc.backbone_forward(t, in[0]);
                    return random_projection(t, y, 1);
                },
                with_params({uniform_tensor({3, 16, 16}, seed + 1, 0.0, 1.0)}, p), seed, o);
        });
    };
    encoder_case("backbone", false);
    encoder_case("encode", true);

    // aggregation
    enum class Stage { tfam, stam, progressive, full };
    auto aggregation_case = [&](const std::string& name, Stage stage) {
        reg("aggregation", name, [stage](const std::string& n, std::uint64_t seed, const GradCheckOptions& o) {
            ParameterSet p;
            Rng rng(seed);
            AggregationOptions ao;
            ao.dim = kDim;
            ao.heads = kHeads;
            ao.layers = 1;
            Aggregator agg(p, "agg", ao, rng);
            randomize_gates(p, seed + 5);
            return gradient_check(
                n,
                [agg, stage](Tape& t, std::span<const Tensor> in) {
                    const MemoryMap target{in[0], 2, 2, 0};
                    const std::vector<MemoryMap> ctx{{in[1], 2, 2, -1}, {in[2], 2, 2, 2}};
                    switch (stage) {
                        case Stage::tfam: return random_projection(t, agg.tfam(t, target, ctx).h, 1);
                        case Stage::stam: return random_projection(t, agg.stam(t, target, ctx[1]).f, 1);
                        case Stage::progressive: {
                            const TemporalMemory h{in[1]};
                            const std::vector<SpatialMemory> f{{in[2], -1}, {in[3], 2}};
                            return random_projection(t, agg.progressive_aggregate(t, h, f, target).r, 1);
                        }
                        case Stage::full: break;
                    }
                    return random_projection(t, agg.run(t, target, ctx).enhanced.r, 1);
                },
                with_params({random_tensor({4, kDim}, seed + 1), random_tensor({4, kDim}, seed + 2),
                             random_tensor({4, kDim}, seed + 3), random_tensor({4, kDim}, seed + 4)},
                            p),
                seed, o);
        });
    };
    aggregation_case("tfam", Stage::tfam);
    aggregation_case("stam", Stage::stam);
    aggregation_case("progressive_aggregate", Stage::progressive);
    aggregation_case("aggregate", Stage::full);

    // query decoding
    auto decoder_options = [] {
        DecoderOptions d;
        d.dim = kDim;
        d.heads = kHeads;
        d.layers = 1;
        return d;
    };
    reg("query_decode", "transformer_decoder",
        [decoder_options](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
            ParameterSet p;
            Rng rng(seed);
            TransformerDecoder dec(p, "dec", decoder_options(), rng);
            return gradient_check(
                name,
                [dec](Tape& t, std::span<const Tensor> in) {
                    return random_projection(t, dec.forward(t, in[0], in[1]), 1);
                },
                with_params({random_tensor({3, kDim}, seed + 1), random_tensor({5, kDim}, seed + 2)}, p), seed, o);
        });
    reg("query_decode", "query_assembler",
        [decoder_options](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
            ParameterSet p;
            Rng rng(seed);
            QueryAssembler qam(p, "qam", decoder_options(), rng);
            return gradient_check(
                name,
                [qam](Tape& t, std::span<const Tensor> in) {
                    const std::vector<MemoryMap> ctx{{in[1], 2, 2, -1}, {in[2], 2, 2, 1}};
                    return random_projection(t, qam.assemble(t, in[0], ctx).assembled, 1);
                },
                with_params({random_tensor({3, kDim}, seed + 1), random_tensor({4, kDim}, seed + 2),
                             random_tensor({4, kDim}, seed + 3)},
                            p),
                seed, o);
        });
    reg("query_decode", "detection_heads", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        ParameterSet p;
        Rng rng(seed);
        DetectionHeads heads(p, "heads", kDim, 3, rng);
        return gradient_check(
            name,
            [heads](Tape& t, std::span<const Tensor> in) {
                const auto d = heads.forward(t, in[0]);
                return add(t, random_projection(t, d.logits, 1), random_projection(t, d.boxes, 2));
            },
            with_params({random_tensor({4, kDim}, seed + 1)}, p), seed, o);
    });

    // losses
    auto truth = [](std::uint64_t seed, std::size_t n) {
        Rng rng(seed);
        GroundTruth gt;
        for (std::size_t k = 0; k < n; ++k) {
            gt.boxes.push_back({rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.4),
                                rng.uniform(0.1, 0.4)});
            gt.classes.push_back(static_cast<int>(rng.uniform_int(0, 2)));
        }
        return gt;
    };
    reg("matching_loss", "focal_loss_sum", [](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        return gradient_check(
            name,
            [](Tape& t, std::span<const Tensor> in) {
                std::vector<double> tg(in[0].numel(), 0.0);
                tg[1] = tg[5] = tg[9] = 1.0;
                return focal_loss_sum(t, scale(t, in[0], 3.0), tg, 0.25, 2.0);
            },
            {random_tensor({4, 3}, seed + 1)}, seed, o);
    });
    reg("matching_loss", "l1_loss_sum", [truth](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        const auto gt = truth(seed + 9, 3);
        return gradient_check(
            name, [gt](Tape& t, std::span<const Tensor> in) { return l1_loss_sum(t, in[0], gt.boxes); },
            {uniform_tensor({3, 4}, seed + 1, 0.15, 0.75)}, seed, o);
    });
    reg("matching_loss", "giou_loss_sum",
        [truth](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
            const auto gt = truth(seed + 9, 3);
            return gradient_check(
                name, [gt](Tape& t, std::span<const Tensor> in) { return giou_loss_sum(t, in[0], gt.boxes); },
                {uniform_tensor({3, 4}, seed + 1, 0.15, 0.75)}, seed, o);
        });
    reg("matching_loss", "total_loss", [truth](const std::string& name, std::uint64_t seed, const GradCheckOptions& o) {
        const auto gt = truth(seed + 9, 3);
        const auto logits = random_tensor({6, 3}, seed + 1);
        const auto boxes = uniform_tensor({6, 4}, seed + 2, 0.15, 0.75);
        // Assignment computed once and frozen.
        const auto assignment = hungarian(matching_cost(DetectionSet{logits, boxes}, gt, LossWeights{}));
        return gradient_check(
            name,
            [gt, assignment](Tape& t, std::span<const Tensor> in) {
                return total_loss(t, DetectionSet{in[0], in[1]}, gt, assignment, LossWeights{});
            },
            {logits, boxes}, seed, o);
    });
    return cases;
}

}  // namespace

std::vector<GradCheckCase> gradcheck_cases() { return build(); }

bool GradCheckReport::passed() const {
    for (const auto& [module, r] : results) {
        if (!r.passed) return false;
    }
    return !results.empty();
}

std::string GradCheckReport::table() const {
    std::string out;
    char line[160];
    for (const auto& [module, r] : results) {
        std::snprintf(line, sizeof line, "%-14s %-24s worst_rel_err %.3e  %s\n", module.c_str(), r.name.c_str(),
                      r.worst_relative_error, r.passed ? "PASS" : "FAIL");
        out += line;
    }
    return out;
}

GradCheckReport run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& options) {
    const auto start = std::chrono::steady_clock::now();
    GradCheckReport report;
    std::uint64_t s = seed;
    for (const auto& c : gradcheck_cases()) {
        report.results.emplace_back(c.module, c.run(s, options));
        s += 101;
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace ptse
