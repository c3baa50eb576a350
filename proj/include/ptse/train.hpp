#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ptse/detector.hpp"
#include "ptse/eval.hpp"

namespace ptse {

struct StepRecord {
    std::size_t step = 0;  ///< 1-based optimizer step
    std::size_t epoch = 0;
    double lr = 0.0;
    LossBreakdown loss;  ///< mean over the batch
    double grad_norm = 0.0;  ///< before clipping
};

/// One optimizer step per call: forward, matching and backward for every
/// sample of the batch, gradient-norm clipping, then Adam.
class Trainer {
public:
    explicit Trainer(Detector& detector);

    /// Throws NumericError on a non-finite loss or gradient. When
    /// `dump_dir` is set the offending batch is described in
    /// dump_dir/nan_dump.json first.
    StepRecord step(std::span<const VideoSample> batch, double lr, std::size_t epoch = 0,
                    const std::optional<std::filesystem::path>& dump_dir = std::nullopt);

    std::size_t steps() const { return steps_; }

private:
    Detector& detector_;
    Adam adam_;
    std::size_t steps_ = 0;
};

/// Forward pass plus matching and loss for one sample, without backward.
LossBreakdown sample_loss(const Detector& detector, const VideoSample& sample);

struct EpochRecord {
    std::size_t epoch = 0;  ///< 1-based
    double lr = 0.0;
    std::size_t steps = 0;
    LossBreakdown loss;  ///< mean over the epoch's steps
    std::optional<EvalReport> eval;
};

struct TrainResult {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
};

/// Epoch loop over every (sequence, frame) pair in shuffled order, or
/// `samples_per_epoch` draws when that is nonzero. Context frames are drawn
/// from the sampling window. With `out_dir` set, writes train_log.csv,
/// loss_curve.csv, config.json and checkpoint.ptse there.
TrainResult train(Detector& detector, std::span<const Sequence> train_set, std::span<const Sequence> eval_set,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

void write_loss_curve(const std::filesystem::path& path, std::span<const StepRecord> steps);

}  // namespace ptse
