#pragma once

#include <array>
#include <cstddef>
#include <utility>
#include <vector>

#include "ptse/query_decode.hpp"

namespace ptse {

/// Normalized center-size box (cx, cy, w, h).
struct Box {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;
};

/// Corner box (x0, y0, x1, y1).
using CornerBox = std::array<double, 4>;

CornerBox to_corners(const Box& b);
double iou(const CornerBox& a, const CornerBox& b);
double iou(const Box& a, const Box& b);
/// IoU - (enclosure - union) / enclosure. Zero-area pieces contribute 0
/// instead of NaN.
double giou(const CornerBox& a, const CornerBox& b);
double giou(const Box& a, const Box& b);

struct GroundTruth {
    std::vector<Box> boxes;
    std::vector<int> classes;

    std::size_t size() const { return boxes.size(); }
    /// Throws ContractError on out-of-range coordinates or class ids.
    void validate(std::size_t num_classes) const;
};

struct Assignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  ///< (query, gt)
    std::vector<std::size_t> unmatched;                      ///< query indices
};

enum class ClassCost { probability, focal };

struct LossWeights {
    double cls = 2.0;
    double box = 1.0;
    double l1 = 5.0;
    double giou = 2.0;
    ClassCost class_cost = ClassCost::probability;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
};

/// Sigmoid focal loss of one logit: -a_t (1 - p_t)^gamma log(p_t), with
/// logs clamped at 1e-12.
double focal_loss(double logit, int target, double alpha = 0.25, double gamma = 2.0);

/// Dense row-major matrix, rows = queries, cols = ground-truth objects.
struct CostMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
};

CostMatrix matching_cost(const DetectionSet& preds, const GroundTruth& gt, const LossWeights& weights);

/// Minimum-cost assignment of every column to a distinct row (rows >= cols),
/// shortest augmenting paths with dual potentials, O(cols^2 rows).
/// Throws NumericError on non-finite costs.
Assignment hungarian(const CostMatrix& cost);
double assignment_cost(const CostMatrix& cost, const Assignment& a);

struct LossBreakdown {
    double classification = 0.0;  ///< focal, normalized by gt count
    double l1 = 0.0;
    double giou = 0.0;  ///< mean of 1 - GIoU over matched pairs
    double total = 0.0;
};

/// Differentiable focal-loss sum over a [Q x C] logit matrix and 0/1 targets.
Tensor focal_loss_sum(Tape& tape, const Tensor& logits, std::vector<double> targets, double alpha, double gamma);
/// Sum of |pred - target| over a [K x 4] box tensor.
Tensor l1_loss_sum(Tape& tape, const Tensor& boxes, std::vector<Box> targets);
/// Sum of (1 - GIoU) over a [K x 4] box tensor.
Tensor giou_loss_sum(Tape& tape, const Tensor& boxes, std::vector<Box> targets);

/// lambda_cls L_cls + lambda_box (lambda_L1 L_L1 + lambda_giou L_giou), all
/// terms normalized by max(1, |gt|). Classification covers every query
/// (unmatched queries target all-zero); box terms cover matched pairs only.
Tensor total_loss(Tape& tape, const DetectionSet& preds, const GroundTruth& gt, const Assignment& assignment,
                  const LossWeights& weights, LossBreakdown* breakdown = nullptr);

}  // namespace ptse
