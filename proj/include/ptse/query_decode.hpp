#pragma once

#include <span>
#include <string>
#include <vector>

#include "ptse/encoder.hpp"

namespace ptse {

struct DecoderOptions {
    std::size_t dim = 48;
    std::size_t heads = 6;
    std::size_t layers = 2;
    /// Query self-attention; switching it off makes queries independent.
    bool self_attention = true;
};

struct DecoderTrace {
    std::vector<Tensor> cross_attention;  ///< head-averaged, one per layer
};

/// Post-norm transformer decoder: self-attention over queries,
/// cross-attention onto a memory, feed-forward.
class TransformerDecoder {
public:
    TransformerDecoder() = default;
    TransformerDecoder(ParameterSet& params, const std::string& name, const DecoderOptions& options, Rng& rng);

    Tensor forward(Tape& tape, const Tensor& queries, const Tensor& memory, DecoderTrace* trace = nullptr) const;

    const DecoderOptions& options() const { return options_; }

private:
    struct Layer {
        MultiHeadAttention self_attn;
        LayerNorm self_norm;
        MultiHeadAttention cross_attn;
        LayerNorm cross_norm;
        FeedForward ffn;
    };

    DecoderOptions options_;
    std::vector<Layer> layers_;
};

struct QuerySet {
    Tensor primal;     ///< [N_p x d]
    Tensor assembled;  ///< [(N_p * (1 + N_c)) x d], primal rows first
    std::size_t context_blocks = 0;
};

/// Query assembling: [Q_p; SD(Q_p, M_c1); SD(Q_p, M_c2); ...] with one
/// shallow decoder SD shared by all context frames.
class QueryAssembler {
public:
    QueryAssembler() = default;
    QueryAssembler(ParameterSet& params, const std::string& name, const DecoderOptions& options, Rng& rng);

    QuerySet assemble(Tape& tape, const Tensor& primal, std::span<const MemoryMap> context) const;

    const TransformerDecoder& shallow_decoder() const { return shallow_; }

private:
    TransformerDecoder shallow_;
};

/// Per-query predictions: class logits (independent sigmoids, no
/// background class) and boxes (cx, cy, w, h) in (0, 1).
struct DetectionSet {
    Tensor logits;  ///< [Q x C]
    Tensor boxes;   ///< [Q x 4]

    std::size_t size() const { return logits.rows(); }
    std::size_t num_classes() const { return logits.cols(); }
};

/// Class head: one linear layer. Box head: 3-layer MLP (hidden d) + sigmoid.
class DetectionHeads {
public:
    DetectionHeads() = default;
    DetectionHeads(ParameterSet& params, const std::string& name, std::size_t dim, std::size_t num_classes,
                   Rng& rng, double prior_probability = 0.01);

    DetectionSet forward(Tape& tape, const Tensor& decoded) const;

private:
    Linear classifier_;
    Linear box_hidden1_;
    Linear box_hidden2_;
    Linear box_out_;
};

}  // namespace ptse
