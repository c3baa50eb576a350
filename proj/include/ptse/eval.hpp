#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "ptse/detector.hpp"
#include "ptse/synthvid.hpp"

namespace ptse {

struct ClassDetection {
    std::size_t frame = 0;
    double score = 0.0;
    Box box;
};

struct ClassTruth {
    std::size_t frame = 0;
    Box box;
};

/// VOC all-point average precision for one class. Detections are taken in
/// descending score order and each claims the highest-IoU unclaimed truth in
/// its frame with IoU >= threshold. NaN when there is no truth.
double average_precision(std::span<const ClassDetection> detections, std::span<const ClassTruth> truths,
                         double iou_threshold = 0.5);

struct Detection {
    int class_id = 0;
    double score = 0.0;
    Box box;
};

struct FrameResult {
    std::size_t sequence_id = 0;
    std::size_t frame = 0;
    std::vector<Detection> detections;
    GroundTruth truth;
    bool occluded = false;
};

struct SplitReport {
    std::vector<double> ap;  ///< per class, NaN without truth
    double map = 0.0;        ///< mean over classes with truth; NaN if none
    std::size_t frames = 0;
    std::size_t detections = 0;
    std::size_t truths = 0;
};

struct EvalReport {
    SplitReport all;
    SplitReport occluded;
    SplitReport clean;

    std::string to_json() const;
};

SplitReport summarize(std::span<const FrameResult> frames, std::size_t num_classes, double iou_threshold = 0.5);
EvalReport make_report(std::span<const FrameResult> frames, std::size_t num_classes);

/// Best `limit` (query, class) pairs by sigmoid score, at least `min_score`.
std::vector<Detection> top_detections(const DetectionSet& preds, std::size_t limit, double min_score = 0.0);

/// Runs the detector on every `eval_frame_stride`-th frame with the nearest
/// context frames.
std::vector<FrameResult> run_inference(const Detector& detector, std::span<const Sequence> sequences);
EvalReport evaluate(const Detector& detector, std::span<const Sequence> sequences);

/// JSON lines {sequence_id, frame_id, class_id, score, box:[cx,cy,w,h]} for
/// detections scoring at least `threshold`.
std::string detections_jsonl(std::span<const FrameResult> frames, double threshold);

struct Heatmap {
    std::string name;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<unsigned char> pixels;
};

inline constexpr std::array<const char*, 5> kFeatureStages{"M_t", "h_t", "f_i", "E_t", "R_t"};

/// Feature-norm heatmaps of one aggregation stage for frame t, with the
/// nearest context frames. f_i gives one map per context frame. Throws
/// ConfigError for an unknown stage and ContractError for a stage the
/// configuration does not compute.
std::vector<Heatmap> feature_maps(const Detector& detector, const Sequence& seq, std::size_t t,
                                  const std::string& stage);

}  // namespace ptse
