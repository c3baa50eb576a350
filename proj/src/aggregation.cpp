#include "ptse/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ptse/errors.hpp"
#include "ptse/ops.hpp"

namespace ptse {

namespace {

CorrelationOptions block_options(const AggregationOptions& o, CorrelationMode mode) {
    CorrelationOptions c;
    c.dim = o.dim;
    c.heads = o.heads;
    c.layers = o.layers;
    c.mode = mode;
    if (o.raw) {
        c.projections = false;
        c.feed_forward = false;
        c.normalize = false;
    }
    return c;
}

void require_same_grid(const MemoryMap& a, const MemoryMap& b, const char* what) {
    if (a.grid_h != b.grid_h || a.grid_w != b.grid_w || a.tokens.shape() != b.tokens.shape()) {
        throw ContractError(std::string(what) + ": memory grids differ (" + std::to_string(a.grid_h) + "x" +
                            std::to_string(a.grid_w) + " vs " + std::to_string(b.grid_h) + "x" +
                            std::to_string(b.grid_w) + ")");
    }
}

}  // namespace

Aggregator::Aggregator(ParameterSet& params, const std::string& name, const AggregationOptions& options,
                       Rng& rng)
    : options_(options) {
    // Blocks are always built so checkpoints share one layout across ablations.
    tfam_ = CorrelationBlock(params, name + ".tfam", block_options(options, CorrelationMode::plain), rng);
    stam_ = CorrelationBlock(params, name + ".stam",
                             block_options(options, options.gated ? CorrelationMode::gated : CorrelationMode::plain),
                             rng);
    fuse_ = CorrelationBlock(params, name + ".fuse", block_options(options, CorrelationMode::plain), rng);
    rgc_ = CorrelationBlock(params, name + ".rgc", block_options(options, CorrelationMode::gated), rng);
}

Tensor stack_tokens(Tape& tape, std::span<const Tensor> maps) {
    if (maps.empty()) throw ContractError("stack_tokens: no token maps");
    for (const auto& m : maps) {
        if (m.shape() != maps[0].shape()) {
            throw ContractError("stack_tokens: token maps differ in shape, " + shape_str(maps[0].shape()) +
                                " vs " + shape_str(m.shape()));
        }
    }
    if (maps.size() == 1) return maps[0];
    return concat(tape, maps, 0);
}

TemporalMemory Aggregator::tfam(Tape& tape, const MemoryMap& target, std::span<const MemoryMap> context) const {
    if (context.empty()) throw ContractError("tfam: at least one context frame is required");
    std::vector<Tensor> maps;
    for (const auto& c : context) {
        require_same_grid(target, c, "tfam");
        maps.push_back(c.tokens);
    }
    return {tfam_.forward(tape, target.tokens, stack_tokens(tape, maps))};
}

SpatialMemory Aggregator::stam(Tape& tape, const MemoryMap& target, const MemoryMap& context) const {
    require_same_grid(target, context, "stam");
    return {stam_.forward(tape, target.tokens, context.tokens), context.frame_offset};
}

EnhancedMemory Aggregator::progressive_aggregate(Tape& tape, const TemporalMemory& temporal,
                                                 std::span<const SpatialMemory> spatial,
                                                 const MemoryMap& target) const {
    if (spatial.empty()) throw ContractError("progressive_aggregate: no spatial memories");
    std::vector<Tensor> maps;
    for (const auto& f : spatial) {
        if (f.f.shape() != temporal.h.shape()) {
            throw ContractError("progressive_aggregate: spatial memory " + shape_str(f.f.shape()) +
                                " does not match temporal memory " + shape_str(temporal.h.shape()));
        }
        maps.push_back(f.f);
    }
    EnhancedMemory out;
    out.e = fuse_.forward(tape, temporal.h, stack_tokens(tape, maps));
    out.r = options_.residual_gated ? rgc_.forward(tape, out.e, target.tokens) : out.e;
    return out;
}

AggregationTrace Aggregator::run(Tape& tape, const MemoryMap& target, std::span<const MemoryMap> context) const {
    AggregationTrace trace;
    const bool any = !context.empty() && (options_.enable_tfam || options_.enable_stam);
    if (!any) {
        trace.temporal.h = target.tokens;
        trace.enhanced = {target.tokens, target.tokens};
        return trace;
    }
    trace.temporal = options_.enable_tfam ? tfam(tape, target, context) : TemporalMemory{target.tokens};
    if (options_.enable_stam) {
        for (const auto& c : context) trace.spatial.push_back(stam(tape, target, c));
        trace.enhanced = progressive_aggregate(tape, trace.temporal, trace.spatial, target);
    } else {
        trace.enhanced.e = trace.temporal.h;
        trace.enhanced.r = options_.residual_gated ? rgc_.forward(tape, trace.enhanced.e, target.tokens)
                                                   : trace.enhanced.e;
    }
    return trace;
}

std::vector<unsigned char> feature_heatmap(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w) {
    if (tokens.rank() != 2 || tokens.rows() != grid_h * grid_w) {
        throw DimensionError("heatmap: " + shape_str(tokens.shape()) + " is not a " + std::to_string(grid_h) +
                             "x" + std::to_string(grid_w) + " token grid");
    }
    const auto n = tokens.rows(), d = tokens.cols();
    Buffer norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += tokens.at(i, c) * tokens.at(i, c);
        norms[i] = std::sqrt(s);
    }
    const auto [lo, hi] = std::minmax_element(norms.begin(), norms.end());
    const double range = *hi - *lo;
    std::vector<unsigned char> out(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = range > 0.0 ? (norms[i] - *lo) / range : 0.0;
        out[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    return out;
}

void write_pgm(const std::filesystem::path& path, std::span<const unsigned char> pixels, std::size_t height,
               std::size_t width) {
    if (pixels.size() != height * width) throw DimensionError("write_pgm: pixel count does not match size");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P5\n" << width << ' ' << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace ptse
