#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ptse/nn.hpp"

namespace ptse {

enum class CorrelationMode { plain, gated };

struct CorrelationOptions {
    std::size_t dim = 48;
    std::size_t heads = 6;
    std::size_t layers = 2;
    CorrelationMode mode = CorrelationMode::plain;
    /// false: raw attention on the input tokens (identity projections).
    bool projections = true;
    bool feed_forward = true;
    bool normalize = true;
    /// 0 selects 4 * dim.
    std::size_t ffn_hidden = 0;
};

/// Per-layer diagnostics captured during a forward pass.
struct CorrelationTrace {
    std::vector<Tensor> attention;   ///< head-averaged weights, one per layer
    std::vector<Tensor> gate_masks;  ///< M per layer (gated mode only)
};

/// Stack of correlation layers. Each layer attends from the running query
/// tokens onto the fixed kv tokens and adds a residual:
///
///   plain:  A(Q, V) + Q
///   gated:  A(Q, V) + M * Q + (1 - M) * V,   M = sigmoid(G([Q, V]))
///
/// followed (optionally) by a layer norm and a feed-forward block. G maps
/// the feature-wise concatenation [Q, V] (2d wide) to d and starts at all
/// zeros, so M = 0.5 everywhere before training.
class CorrelationBlock {
public:
    CorrelationBlock() = default;
    CorrelationBlock(ParameterSet& params, const std::string& name, const CorrelationOptions& options,
                     Rng& rng);

    Tensor forward(Tape& tape, const Tensor& q, const Tensor& kv, CorrelationTrace* trace = nullptr) const;

    const CorrelationOptions& options() const { return options_; }
    CorrelationMode mode() const { return options_.mode; }
    /// Gate layer of the given layer; null in plain mode.
    const Linear* gate(std::size_t layer) const;

private:
    struct Layer {
        MultiHeadAttention attention;
        LayerNorm norm;
        FeedForward ffn;
        Linear gate;
    };

    CorrelationOptions options_;
    std::vector<Layer> layers_;
};

/// Plain correlation C(Q, V); block must be in plain mode.
Tensor correlate(Tape& tape, const CorrelationBlock& block, const Tensor& q, const Tensor& kv);
/// Gated correlation C^g(Q, V); q and kv must have the same shape.
Tensor gated_correlate(Tape& tape, const CorrelationBlock& block, const Tensor& q, const Tensor& kv);

struct ImbalanceRow {
    std::size_t n_values = 0;
    double mean_attention_weight = 0.0;
    double residual_weight = 1.0;
};

/// For each key-set size N_V, runs raw attention on random tokens and
/// reports the mean softmax weight a single value receives against the
/// unit weight of the residual path.
std::vector<ImbalanceRow> attention_imbalance_report(const std::vector<std::size_t>& n_values,
                                                     std::size_t dim = 48, std::size_t n_queries = 16,
                                                     std::uint64_t seed = 7);
/// TSV with header N_V, mean_attn_weight, residual_weight.
void write_imbalance_tsv(std::ostream& os, const std::vector<ImbalanceRow>& rows);

}  // namespace ptse
