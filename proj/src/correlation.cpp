#include "ptse/correlation.hpp"

#include <iomanip>
#include <ostream>

#include "ptse/errors.hpp"
#include "ptse/gradcheck.hpp"
#include "ptse/ops.hpp"

namespace ptse {

CorrelationBlock::CorrelationBlock(ParameterSet& params, const std::string& name,
                                   const CorrelationOptions& options, Rng& rng)
    : options_(options) {
    if (options.layers == 0) throw ConfigError("correlation_layers: must be at least 1");
    const auto d = options.dim;
    const auto hidden = options.ffn_hidden ? options.ffn_hidden : 4 * d;
    for (std::size_t i = 0; i < options.layers; ++i) {
        const auto prefix = name + ".layer" + std::to_string(i);
        Layer layer;
        layer.attention = options.projections
                              ? MultiHeadAttention(params, prefix + ".attn", d, options.heads, rng)
                              : MultiHeadAttention::identity(d, options.heads);
        if (options.normalize) layer.norm = LayerNorm(params, prefix + ".norm", d);
        if (options.feed_forward) layer.ffn = FeedForward(params, prefix + ".ffn", d, hidden, rng);
        if (options.mode == CorrelationMode::gated) {
            layer.gate = Linear(params, prefix + ".gate", 2 * d, d, rng, LinearInit::zeros);
        }
        layers_.push_back(std::move(layer));
    }
}

const Linear* CorrelationBlock::gate(std::size_t layer) const {
    if (options_.mode != CorrelationMode::gated) return nullptr;
    return &layers_.at(layer).gate;
}

Tensor CorrelationBlock::forward(Tape& tape, const Tensor& q, const Tensor& kv,
                                 CorrelationTrace* trace) const {
    if (q.rank() != 2 || kv.rank() != 2 || q.cols() != options_.dim || kv.cols() != options_.dim) {
        throw DimensionError("correlation: q " + shape_str(q.shape()) + " and kv " +
                             shape_str(kv.shape()) + " must both have feature dim " +
                             std::to_string(options_.dim));
    }
    const bool gated = options_.mode == CorrelationMode::gated;
    if (gated && q.shape() != kv.shape()) {
        throw ContractError("gated correlation requires Q, V and M of the same size, got q " +
                            shape_str(q.shape()) + " and kv " + shape_str(kv.shape()));
    }
    Tensor x = q;
    for (const auto& layer : layers_) {
        auto attn = layer.attention.forward(tape, x, kv);
        Tensor y;
        if (gated) {
            auto mask = sigmoid(tape, layer.gate.forward(tape, concat(tape, {x, kv}, 1)));
            auto keep_q = hadamard(tape, mask, x);
            auto keep_v = hadamard(tape, affine(tape, mask, -1.0, 1.0), kv);
            y = add(tape, attn.output, add(tape, keep_q, keep_v));
            if (trace) trace->gate_masks.push_back(mask);
        } else {
            y = add(tape, attn.output, x);
        }
        if (trace) trace->attention.push_back(attn.weights);
        if (options_.normalize) y = layer.norm.forward(tape, y);
        if (options_.feed_forward) y = layer.ffn.forward(tape, y);
        x = y;
    }
    return x;
}

Tensor correlate(Tape& tape, const CorrelationBlock& block, const Tensor& q, const Tensor& kv) {
    if (block.mode() != CorrelationMode::plain) throw ContractError("correlate() needs a plain block");
    return block.forward(tape, q, kv);
}

Tensor gated_correlate(Tape& tape, const CorrelationBlock& block, const Tensor& q, const Tensor& kv) {
    if (block.mode() != CorrelationMode::gated) {
        throw ContractError("gated_correlate() needs a gated block");
    }
    return block.forward(tape, q, kv);
}

std::vector<ImbalanceRow> attention_imbalance_report(const std::vector<std::size_t>& n_values,
                                                     std::size_t dim, std::size_t n_queries,
                                                     std::uint64_t seed) {
    std::vector<ImbalanceRow> rows;
    for (auto nv : n_values) {
        if (nv == 0) throw ContractError("attention_imbalance_report: N_V must be at least 1");
        Tape tape;
        const auto q = random_tensor({n_queries, dim}, seed, false);
        const auto kv = random_tensor({nv, dim}, seed + nv, false);
        const auto res = attention_kernel(tape, q, kv, kv, 1);
        double total = 0.0;
        for (double w : res.weights.data()) total += w;
        rows.push_back({nv, total / static_cast<double>(res.weights.numel()), 1.0});
    }
    return rows;
}

void write_imbalance_tsv(std::ostream& os, const std::vector<ImbalanceRow>& rows) {
    os << "N_V\tmean_attn_weight\tresidual_weight\n";
    for (const auto& r : rows) {
        os << r.n_values << '\t' << std::setprecision(17) << r.mean_attention_weight << '\t'
           << r.residual_weight << '\n';
    }
}

}  // namespace ptse
