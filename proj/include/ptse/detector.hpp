#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "ptse/aggregation.hpp"
#include "ptse/config.hpp"
#include "ptse/query_decode.hpp"

namespace ptse {

/// Intermediates of one forward pass.
struct DetectorTrace {
    MemoryMap target;
    std::vector<MemoryMap> context;
    AggregationTrace aggregation;
    Tensor queries;
};

/// Encoder -> aggregation -> query assembling -> decoder -> heads, with the
/// ablation switches of the run config. Every submodule is always built so a
/// checkpoint has the same layout whatever switches are set.
class Detector {
public:
    Detector(const RunConfig& config, std::uint64_t seed);

    Detector(const Detector&) = delete;
    Detector& operator=(const Detector&) = delete;

    /// `offsets` gives each context frame's index relative to the target.
    DetectionSet forward(Tape& tape, const FrameImage& target, std::span<const FrameImage> context,
                         std::span<const int> offsets = {}, DetectorTrace* trace = nullptr) const;

    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }
    const RunConfig& config() const { return config_; }

    void save(const std::filesystem::path& path) const;
    /// Loads values saved from a detector with the same layout.
    void load(const std::filesystem::path& path);

private:
    RunConfig config_;
    ParameterSet params_;
    FrameEncoder encoder_;
    Aggregator aggregator_;
    QueryAssembler assembler_;
    TransformerDecoder decoder_;
    DetectionHeads heads_;
    Tensor primal_queries_;
};

}  // namespace ptse
