#include "ptse/query_decode.hpp"

#include <algorithm>
#include <cmath>

#include "ptse/errors.hpp"
#include "ptse/ops.hpp"

namespace ptse {

TransformerDecoder::TransformerDecoder(ParameterSet& params, const std::string& name,
                                       const DecoderOptions& options, Rng& rng)
    : options_(options) {
    const auto d = options.dim;
    for (std::size_t i = 0; i < options.layers; ++i) {
        const auto p = name + ".layer" + std::to_string(i);
        Layer layer;
        if (options.self_attention) {
            layer.self_attn = MultiHeadAttention(params, p + ".self_attn", d, options.heads, rng);
            layer.self_norm = LayerNorm(params, p + ".self_norm", d);
        }
        layer.cross_attn = MultiHeadAttention(params, p + ".cross_attn", d, options.heads, rng);
        layer.cross_norm = LayerNorm(params, p + ".cross_norm", d);
        layer.ffn = FeedForward(params, p + ".ffn", d, 4 * d, rng);
        layers_.push_back(std::move(layer));
    }
}

Tensor TransformerDecoder::forward(Tape& tape, const Tensor& queries, const Tensor& memory,
                                   DecoderTrace* trace) const {
    if (queries.rank() != 2 || memory.rank() != 2 || queries.cols() != options_.dim ||
        memory.cols() != options_.dim) {
        throw DimensionError("decoder: queries " + shape_str(queries.shape()) + " and memory " +
                             shape_str(memory.shape()) + " must have feature dim " + std::to_string(options_.dim));
    }
    Tensor x = queries;
    for (const auto& layer : layers_) {
        if (options_.self_attention) {
            const auto s = layer.self_attn.forward(tape, x, x);
            x = layer.self_norm.forward(tape, add(tape, s.output, x));
        }
        const auto c = layer.cross_attn.forward(tape, x, memory);
        if (trace) trace->cross_attention.push_back(c.weights);
        x = layer.cross_norm.forward(tape, add(tape, c.output, x));
        x = layer.ffn.forward(tape, x);
    }
    return x;
}

QueryAssembler::QueryAssembler(ParameterSet& params, const std::string& name, const DecoderOptions& options,
                               Rng& rng)
    : shallow_(params, name + ".sd", options, rng) {}

QuerySet QueryAssembler::assemble(Tape& tape, const Tensor& primal, std::span<const MemoryMap> context) const {
    if (context.empty()) throw ContractError("assemble_queries: at least one context frame is required");
    std::vector<Tensor> blocks{primal};
    for (const auto& c : context) blocks.push_back(shallow_.forward(tape, primal, c.tokens));
    return {primal, concat(tape, blocks, 0), context.size()};
}

DetectionHeads::DetectionHeads(ParameterSet& params, const std::string& name, std::size_t dim,
                               std::size_t num_classes, Rng& rng, double prior_probability)
    : classifier_(params, name + ".cls", dim, num_classes, rng),
      box_hidden1_(params, name + ".box0", dim, dim, rng),
      box_hidden2_(params, name + ".box1", dim, dim, rng),
      box_out_(params, name + ".box2", dim, 4, rng) {
    // Start every class probability at the prior so focal loss begins balanced.
    auto bias = classifier_.bias();
    std::ranges::fill(bias.mutable_data(), -std::log((1.0 - prior_probability) / prior_probability));
}

DetectionSet DetectionHeads::forward(Tape& tape, const Tensor& decoded) const {
    DetectionSet out;
    out.logits = classifier_.forward(tape, decoded);
    auto h = relu(tape, box_hidden1_.forward(tape, decoded));
    h = relu(tape, box_hidden2_.forward(tape, h));
    out.boxes = sigmoid(tape, box_out_.forward(tape, h));
    return out;
}

}  // namespace ptse
