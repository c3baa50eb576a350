#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ptse/correlation.hpp"
#include "ptse/encoder.hpp"

namespace ptse {

struct TemporalMemory {
    Tensor h;  ///< [N x d]
};

struct SpatialMemory {
    Tensor f;  ///< [N x d]
    int offset = 0;
};

struct EnhancedMemory {
    Tensor e;  ///< E_t, [N x d]
    Tensor r;  ///< R_t, [N x d]
};

struct AggregationOptions {
    std::size_t dim = 48;
    std::size_t heads = 6;
    std::size_t layers = 2;
    bool enable_tfam = true;
    bool enable_stam = true;
    /// STAM uses gated correlation; false swaps in plain correlation.
    bool gated = true;
    /// Final residual gated correlation against M_t; false keeps R_t = E_t.
    bool residual_gated = true;
    /// Identity projections, no norm or feed-forward inside the blocks.
    bool raw = false;
};

/// Every intermediate of one aggregation pass, for inspection and dumps.
struct AggregationTrace {
    TemporalMemory temporal;
    std::vector<SpatialMemory> spatial;
    EnhancedMemory enhanced;
};

/// Temporal/spatial fusion of a target memory with its context memories.
///
///   h_t = C(M_t, [M_c1; M_c2; ...])        temporal aggregation
///   f_i = C^g(M_t, M_ci)                    spatial transition, per context
///   E_t = C(h_t, [f_1; f_2; ...])
///   R_t = C^g(E_t, M_t)                     residual gated correlation
class Aggregator {
public:
    Aggregator() = default;
    Aggregator(ParameterSet& params, const std::string& name, const AggregationOptions& options, Rng& rng);

    TemporalMemory tfam(Tape& tape, const MemoryMap& target, std::span<const MemoryMap> context) const;
    SpatialMemory stam(Tape& tape, const MemoryMap& target, const MemoryMap& context) const;
    EnhancedMemory progressive_aggregate(Tape& tape, const TemporalMemory& temporal,
                                         std::span<const SpatialMemory> spatial, const MemoryMap& target) const;

    /// Full pass honoring the ablation switches. A stage that is switched
    /// off passes its input through (h_t = M_t, E_t = h_t, R_t = E_t); with
    /// no context at all R_t = M_t.
    AggregationTrace run(Tape& tape, const MemoryMap& target, std::span<const MemoryMap> context) const;

    const AggregationOptions& options() const { return options_; }
    const CorrelationBlock& tfam_block() const { return tfam_; }
    const CorrelationBlock& stam_block() const { return stam_; }
    const CorrelationBlock& fuse_block() const { return fuse_; }
    const CorrelationBlock& rgc_block() const { return rgc_; }

private:
    AggregationOptions options_;
    CorrelationBlock tfam_;
    CorrelationBlock stam_;
    CorrelationBlock fuse_;
    CorrelationBlock rgc_;
};

/// Concatenates token maps along the token axis after checking the grids agree.
Tensor stack_tokens(Tape& tape, std::span<const Tensor> maps);

/// Per-token L2 norm over features, min-max scaled to 0..255, grid_h x grid_w bytes.
std::vector<unsigned char> feature_heatmap(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w);
/// Binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, std::span<const unsigned char> pixels, std::size_t height,
               std::size_t width);

}  // namespace ptse
