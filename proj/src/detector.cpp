#include "ptse/detector.hpp"

#include "ptse/errors.hpp"
#include "ptse/ops.hpp"

namespace ptse {

namespace {

EncoderOptions encoder_options(const RunConfig& c) {
    EncoderOptions o;
    o.dim = c.d_model;
    o.heads = c.heads;
    o.layers = c.encoder_layers;
    o.stem_channels = c.stem_channels;
    return o;
}

AggregationOptions aggregation_options(const RunConfig& c) {
    AggregationOptions o;
    o.dim = c.d_model;
    o.heads = c.heads;
    o.layers = c.correlation_layers;
    o.enable_tfam = c.enable_tfam;
    o.enable_stam = c.enable_stam;
    o.gated = c.gated;
    o.residual_gated = c.residual_gated;
    return o;
}

DecoderOptions decoder_options(const RunConfig& c) {
    DecoderOptions o;
    o.dim = c.d_model;
    o.heads = c.heads;
    o.layers = c.decoder_layers;
    return o;
}

}  // namespace

Detector::Detector(const RunConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    encoder_ = FrameEncoder(params_, "encoder", encoder_options(config_), rng);
    aggregator_ = Aggregator(params_, "aggregation", aggregation_options(config_), rng);
    assembler_ = QueryAssembler(params_, "qam", decoder_options(config_), rng);
    decoder_ = TransformerDecoder(params_, "decoder", decoder_options(config_), rng);
    heads_ = DetectionHeads(params_, "heads", config_.d_model, config_.num_classes, rng);
    Buffer q(config_.num_queries * config_.d_model);
    for (auto& x : q) x = rng.normal();
    primal_queries_ = params_.add("primal_queries", Tensor({config_.num_queries, config_.d_model}, std::move(q)));
}

DetectionSet Detector::forward(Tape& tape, const FrameImage& target, std::span<const FrameImage> context,
                               std::span<const int> offsets, DetectorTrace* trace) const {
    if (!offsets.empty() && offsets.size() != context.size()) {
        throw ContractError("detector: " + std::to_string(offsets.size()) + " offsets for " +
                            std::to_string(context.size()) + " context frames");
    }
    const auto target_map = encoder_.encode(tape, target, 0);
    std::vector<MemoryMap> ctx;
    if (config_.uses_context()) {
        for (std::size_t i = 0; i < context.size(); ++i) {
            ctx.push_back(encoder_.encode(tape, context[i], offsets.empty() ? 0 : offsets[i]));
        }
    }
    auto agg = aggregator_.run(tape, target_map, ctx);
    const Tensor queries = config_.enable_qam && !ctx.empty()
                               ? assembler_.assemble(tape, primal_queries_, ctx).assembled
                               : primal_queries_;
    const auto decoded = decoder_.forward(tape, queries, agg.enhanced.r);
    auto out = heads_.forward(tape, decoded);
    if (trace) {
        trace->target = target_map;
        trace->context = std::move(ctx);
        trace->aggregation = std::move(agg);
        trace->queries = queries;
    }
    return out;
}

void Detector::save(const std::filesystem::path& path) const { save_checkpoint(path, params_.entries()); }

void Detector::load(const std::filesystem::path& path) { params_.copy_values_from(load_checkpoint(path)); }

}  // namespace ptse
