#include "ptse/matching_loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ptse/errors.hpp"
#include "ptse/ops.hpp"

namespace ptse {

namespace {

constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

struct FocalTerm {
    double value;
    double grad;  // d value / d logit
};

FocalTerm focal_term(double x, bool positive, double alpha, double gamma) {
    const double p = sigmoid_value(x);
    if (positive) {
        double lp = log_sigmoid(x);
        double dlp = 1.0 - p;
        if (lp < kLogFloor) {
            lp = kLogFloor;
            dlp = 0.0;
        }
        const double mod = std::pow(1.0 - p, gamma);
        const double value = -alpha * mod * lp;
        // d(1-p)^gamma/dx = -gamma (1-p)^gamma p
        const double grad = -alpha * (-gamma * mod * p * lp + mod * dlp);
        return {value, grad};
    }
    double lq = log_sigmoid(-x);
    double dlq = -p;
    if (lq < kLogFloor) {
        lq = kLogFloor;
        dlq = 0.0;
    }
    const double mod = std::pow(p, gamma);
    const double value = -(1.0 - alpha) * mod * lq;
    // dp^gamma/dx = gamma p^gamma (1-p)
    const double grad = -(1.0 - alpha) * (gamma * mod * (1.0 - p) * lq + mod * dlq);
    return {value, grad};
}

Box box_row(const Tensor& boxes, std::size_t r) {
    return {boxes.at(r, 0), boxes.at(r, 1), boxes.at(r, 2), boxes.at(r, 3)};
}

// GIoU of a predicted box against a fixed target plus its gradient with
// respect to the predicted (cx, cy, w, h).
double giou_with_grad(const Box& pred, const Box& target, std::array<double, 4>& grad) {
    const auto p = to_corners(pred);
    const auto t = to_corners(target);
    std::array<double, 4> d_corner{};  // d giou / d (x0, y0, x1, y1) of pred

    const double pw = p[2] - p[0], ph = p[3] - p[1];
    const double tw = t[2] - t[0], th = t[3] - t[1];
    const double iw_raw = std::min(p[2], t[2]) - std::max(p[0], t[0]);
    const double ih_raw = std::min(p[3], t[3]) - std::max(p[1], t[1]);
    const double iw = std::max(0.0, iw_raw), ih = std::max(0.0, ih_raw);
    const double inter = iw * ih;
    const double area_p = pw * ph, area_t = tw * th;
    const double uni = area_p + area_t - inter;
    const double ew = std::max(p[2], t[2]) - std::min(p[0], t[0]);
    const double eh = std::max(p[3], t[3]) - std::min(p[1], t[1]);
    const double enc = ew * eh;

    double value = 0.0;
    // Partial derivatives of inter, union and enclosure w.r.t. pred corners.
    std::array<double, 4> d_inter{}, d_area{}, d_enc{};
    d_area = {-ph, -pw, ph, pw};
    if (iw_raw > 0.0 && ih_raw > 0.0) {
        if (p[0] > t[0]) d_inter[0] = -ih;
        if (p[2] < t[2]) d_inter[2] = ih;
        if (p[1] > t[1]) d_inter[1] = -iw;
        if (p[3] < t[3]) d_inter[3] = iw;
    }
    if (p[0] < t[0]) d_enc[0] = -eh;
    if (p[2] > t[2]) d_enc[2] = eh;
    if (p[1] < t[1]) d_enc[1] = -ew;
    if (p[3] > t[3]) d_enc[3] = ew;

    if (uni > 0.0) {
        value += inter / uni;
        for (int k = 0; k < 4; ++k) {
            const double d_uni = d_area[k] - d_inter[k];
            d_corner[k] += (d_inter[k] * uni - inter * d_uni) / (uni * uni);
        }
    }
    if (enc > 0.0) {
        // giou = iou - (enc - uni) / enc = iou - 1 + uni / enc
        value += uni / enc - 1.0;
        for (int k = 0; k < 4; ++k) {
            const double d_uni = d_area[k] - d_inter[k];
            d_corner[k] += (d_uni * enc - uni * d_enc[k]) / (enc * enc);
        }
    }
    grad[0] = d_corner[0] + d_corner[2];
    grad[1] = d_corner[1] + d_corner[3];
    grad[2] = 0.5 * (d_corner[2] - d_corner[0]);
    grad[3] = 0.5 * (d_corner[3] - d_corner[1]);
    return value;
}

void require_box_tensor(const Tensor& boxes, std::size_t n, const char* op) {
    if (boxes.rank() != 2 || boxes.cols() != 4 || boxes.rows() != n) {
        throw DimensionError(std::string(op) + ": expected [" + std::to_string(n) + "x4] boxes, got " +
                             shape_str(boxes.shape()));
    }
}

}  // namespace

CornerBox to_corners(const Box& b) {
    return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

double iou(const CornerBox& a, const CornerBox& b) {
    const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
    const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
    const double inter = iw * ih;
    const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double iou(const Box& a, const Box& b) { return iou(to_corners(a), to_corners(b)); }

double giou(const CornerBox& a, const CornerBox& b) {
    const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
    const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
    const double inter = iw * ih;
    const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    const double enc = (std::max(a[2], b[2]) - std::min(a[0], b[0])) * (std::max(a[3], b[3]) - std::min(a[1], b[1]));
    const double iou_term = uni > 0.0 ? inter / uni : 0.0;
    const double penalty = enc > 0.0 ? (enc - uni) / enc : 0.0;
    return iou_term - penalty;
}

double giou(const Box& a, const Box& b) { return giou(to_corners(a), to_corners(b)); }

void GroundTruth::validate(std::size_t num_classes) const {
    if (classes.size() != boxes.size()) throw ContractError("ground truth: class/box count mismatch");
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        if (!(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0 && b.cx >= 0.0 && b.cx <= 1.0 && b.cy >= 0.0 &&
              b.cy <= 1.0)) {
            throw ContractError("ground truth box " + std::to_string(i) + " outside the normalized range");
        }
        if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= num_classes) {
            throw ContractError("ground truth class " + std::to_string(classes[i]) + " out of range");
        }
    }
}

double focal_loss(double logit, int target, double alpha, double gamma) {
    return focal_term(logit, target != 0, alpha, gamma).value;
}

CostMatrix matching_cost(const DetectionSet& preds, const GroundTruth& gt, const LossWeights& w) {
    CostMatrix cost{preds.size(), gt.size(), {}};
    cost.values.assign(cost.rows * cost.cols, 0.0);
    if (gt.size() == 0) return cost;
    for (std::size_t q = 0; q < cost.rows; ++q) {
        const Box pb = box_row(preds.boxes, q);
        for (std::size_t g = 0; g < cost.cols; ++g) {
            const double logit = preds.logits.at(q, static_cast<std::size_t>(gt.classes[g]));
            double cls = 0.0;
            if (w.class_cost == ClassCost::probability) {
                cls = -sigmoid_value(logit);
            } else {
                cls = focal_term(logit, true, w.focal_alpha, w.focal_gamma).value -
                      focal_term(logit, false, w.focal_alpha, w.focal_gamma).value;
            }
            const Box& gb = gt.boxes[g];
            const double l1 = std::abs(pb.cx - gb.cx) + std::abs(pb.cy - gb.cy) + std::abs(pb.w - gb.w) +
                              std::abs(pb.h - gb.h);
            cost(q, g) = w.cls * cls + w.l1 * l1 - w.giou * giou(pb, gb);
        }
    }
    return cost;
}

Assignment hungarian(const CostMatrix& cost) {
    const std::size_t n = cost.cols;  // objects to place
    const std::size_t m = cost.rows;  // candidate queries
    if (m < n) {
        throw ContractError("hungarian: " + std::to_string(m) + " rows cannot cover " + std::to_string(n) +
                            " columns");
    }
    if (cost.values.size() != m * n) throw ContractError("hungarian: cost matrix size does not match its shape");
    for (double v : cost.values) {
        if (!std::isfinite(v)) throw NumericError("hungarian: non-finite matching cost");
    }
    Assignment out;
    if (n == 0) {
        for (std::size_t q = 0; q < m; ++q) out.unmatched.push_back(q);
        return out;
    }
    const double inf = std::numeric_limits<double>::infinity();
    // 1-based potentials: u over columns (objects), v over rows (queries).
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        owner[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = owner[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (owner[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> query_of(n);
    for (std::size_t j = 1; j <= m; ++j) {
        if (owner[j] != 0) {
            query_of[owner[j] - 1] = j - 1;
        } else {
            out.unmatched.push_back(j - 1);
        }
    }
    for (std::size_t g = 0; g < n; ++g) out.pairs.emplace_back(query_of[g], g);
    return out;
}

double assignment_cost(const CostMatrix& cost, const Assignment& a) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs = a.pairs;
    std::sort(pairs.begin(), pairs.end(), [](const auto& x, const auto& y) { return x.second < y.second; });
    double total = 0.0;
    for (const auto& [q, g] : pairs) total += cost(q, g);
    return total;
}

Tensor focal_loss_sum(Tape& tape, const Tensor& logits, std::vector<double> targets, double alpha, double gamma) {
    if (targets.size() != logits.numel()) {
        throw DimensionError("focal_loss_sum: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape()));
    }
    const auto x = logits.data();
    Buffer grads(x.size());
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto term = focal_term(x[i], targets[i] > 0.5, alpha, gamma);
        total += term.value;
        grads[i] = term.grad;
    }
    return tape.record({}, {total}, {logits},
                       [logits, grads = std::move(grads)](std::span<const double> g, std::span<const double>) {
                           auto gl = logits.grad_accumulator();
                           for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g[0] * grads[i];
                       });
}

Tensor l1_loss_sum(Tape& tape, const Tensor& boxes, std::vector<Box> targets) {
    require_box_tensor(boxes, targets.size(), "l1_loss_sum");
    const auto b = boxes.data();
    Buffer signs(b.size());
    double total = 0.0;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        const double t[4] = {targets[k].cx, targets[k].cy, targets[k].w, targets[k].h};
        for (std::size_t c = 0; c < 4; ++c) {
            const double diff = b[k * 4 + c] - t[c];
            total += std::abs(diff);
            signs[k * 4 + c] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        }
    }
    return tape.record({}, {total}, {boxes},
                       [boxes, signs = std::move(signs)](std::span<const double> g, std::span<const double>) {
                           auto gb = boxes.grad_accumulator();
                           for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * signs[i];
                       });
}

Tensor giou_loss_sum(Tape& tape, const Tensor& boxes, std::vector<Box> targets) {
    require_box_tensor(boxes, targets.size(), "giou_loss_sum");
    Buffer grads(boxes.numel());
    double total = 0.0;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        std::array<double, 4> g{};
        total += 1.0 - giou_with_grad(box_row(boxes, k), targets[k], g);
        for (std::size_t c = 0; c < 4; ++c) grads[k * 4 + c] = -g[c];
    }
    return tape.record({}, {total}, {boxes},
                       [boxes, grads = std::move(grads)](std::span<const double> g, std::span<const double>) {
                           auto gb = boxes.grad_accumulator();
                           for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * grads[i];
                       });
}

Tensor total_loss(Tape& tape, const DetectionSet& preds, const GroundTruth& gt, const Assignment& assignment,
                  const LossWeights& w, LossBreakdown* breakdown) {
    const auto nq = preds.size(), nc = preds.num_classes();
    if (preds.boxes.rank() != 2 || preds.boxes.rows() != nq || preds.boxes.cols() != 4) {
        throw DimensionError("total_loss: boxes " + shape_str(preds.boxes.shape()) + " do not match " +
                             std::to_string(nq) + " queries");
    }
    const double norm = std::max<double>(1.0, static_cast<double>(gt.size()));
    std::vector<double> targets(nq * nc, 0.0);
    std::vector<std::size_t> rows;
    std::vector<Box> matched;
    for (const auto& [q, g] : assignment.pairs) {
        if (q >= nq || g >= gt.size()) throw ContractError("total_loss: assignment index out of range");
        targets[q * nc + static_cast<std::size_t>(gt.classes[g])] = 1.0;
        rows.push_back(q);
        matched.push_back(gt.boxes[g]);
    }
    const auto cls = scale(tape, focal_loss_sum(tape, preds.logits, std::move(targets), w.focal_alpha, w.focal_gamma),
                           1.0 / norm);
    Tensor total = scale(tape, cls, w.cls);
    LossBreakdown parts;
    parts.classification = cls.item();
    if (!rows.empty()) {
        const auto picked = gather_rows(tape, preds.boxes, rows);
        const auto l1 = scale(tape, l1_loss_sum(tape, picked, matched), 1.0 / norm);
        const auto gi = scale(tape, giou_loss_sum(tape, picked, matched), 1.0 / norm);
        parts.l1 = l1.item();
        parts.giou = gi.item();
        const auto box = add(tape, scale(tape, l1, w.l1), scale(tape, gi, w.giou));
        total = add(tape, total, scale(tape, box, w.box));
    }
    parts.total = total.item();
    if (breakdown) *breakdown = parts;
    return total;
}

}  // namespace ptse
