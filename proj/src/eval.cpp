#include "ptse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "ptse/errors.hpp"

namespace ptse {

double average_precision(std::span<const ClassDetection> detections, std::span<const ClassTruth> truths,
                         double iou_threshold) {
    if (truths.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    for (const auto& d : detections) {
        if (!std::isfinite(d.score)) throw ContractError("average_precision: non-finite detection score");
    }
    std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) {
        return detections[a].score > detections[b].score;
    });

    std::vector<char> claimed(truths.size(), 0);
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        const auto& d = detections[order[rank]];
        double best = iou_threshold;
        std::size_t hit = truths.size();
        for (std::size_t g = 0; g < truths.size(); ++g) {
            if (claimed[g] || truths[g].frame != d.frame) continue;
            const double o = iou(d.box, truths[g].box);
            if (o >= best && (hit == truths.size() || o > best)) {
                best = o;
                hit = g;
            }
        }
        if (hit != truths.size()) {
            claimed[hit] = 1;
            ++tp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(truths.size()));
    }

    // Area under the monotone precision envelope.
    std::vector<double> mrec{0.0}, mpre{0.0};
    mrec.insert(mrec.end(), recall.begin(), recall.end());
    mpre.insert(mpre.end(), precision.begin(), precision.end());
    mrec.push_back(1.0);
    mpre.push_back(0.0);
    for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
    double ap = 0.0;
    for (std::size_t i = 1; i < mrec.size(); ++i) {
        if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
    }
    return ap;
}

SplitReport summarize(std::span<const FrameResult> frames, std::size_t num_classes, double iou_threshold) {
    SplitReport r;
    r.frames = frames.size();
    std::vector<std::vector<ClassDetection>> dets(num_classes);
    std::vector<std::vector<ClassTruth>> truths(num_classes);
    for (std::size_t f = 0; f < frames.size(); ++f) {
        for (const auto& d : frames[f].detections) {
            if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= num_classes) {
                throw ContractError("summarize: detection class " + std::to_string(d.class_id) + " out of range");
            }
            dets[static_cast<std::size_t>(d.class_id)].push_back({f, d.score, d.box});
            ++r.detections;
        }
        const auto& gt = frames[f].truth;
        for (std::size_t k = 0; k < gt.size(); ++k) {
            truths[static_cast<std::size_t>(gt.classes[k])].push_back({f, gt.boxes[k]});
            ++r.truths;
        }
    }
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        r.ap.push_back(average_precision(dets[c], truths[c], iou_threshold));
        if (!std::isnan(r.ap.back())) {
            total += r.ap.back();
            ++counted;
        }
    }
    r.map = counted > 0 ? total / static_cast<double>(counted) : std::numeric_limits<double>::quiet_NaN();
    return r;
}

EvalReport make_report(std::span<const FrameResult> frames, std::size_t num_classes) {
    std::vector<FrameResult> occluded, clean;
    for (const auto& f : frames) (f.occluded ? occluded : clean).push_back(f);
    return {summarize(frames, num_classes), summarize(occluded, num_classes), summarize(clean, num_classes)};
}

std::string EvalReport::to_json() const {
    auto number = [](double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); };
    auto split = [&](const SplitReport& s) {
        nlohmann::json ap = nlohmann::json::array();
        for (double a : s.ap) ap.push_back(number(a));
        return nlohmann::json{{"map", number(s.map)},
                              {"ap", ap},
                              {"frames", s.frames},
                              {"detections", s.detections},
                              {"ground_truths", s.truths}};
    };
    return nlohmann::json{{"iou_threshold", 0.5}, {"all", split(all)}, {"occluded", split(occluded)},
                          {"clean", split(clean)}}
        .dump(2);
}

std::vector<Detection> top_detections(const DetectionSet& preds, std::size_t limit, double min_score) {
    const auto q = preds.size(), c = preds.num_classes();
    std::vector<Detection> all;
    all.reserve(q * c);
    for (std::size_t i = 0; i < q; ++i) {
        const Box box{preds.boxes.at(i, 0), preds.boxes.at(i, 1), preds.boxes.at(i, 2), preds.boxes.at(i, 3)};
        for (std::size_t k = 0; k < c; ++k) {
            const double score = 1.0 / (1.0 + std::exp(-preds.logits.at(i, k)));
            if (score >= min_score) all.push_back({static_cast<int>(k), score, box});
        }
    }
    std::ranges::stable_sort(all, [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (all.size() > limit) all.resize(limit);
    return all;
}

std::vector<FrameResult> run_inference(const Detector& detector, std::span<const Sequence> sequences) {
    const auto& cfg = detector.config();
    std::vector<FrameResult> out;
    for (const auto& seq : sequences) {
        for (std::size_t t = 0; t < seq.size(); t += cfg.eval_frame_stride) {
            const auto ctx = cfg.uses_context() ? nearest_context(seq.size(), t, cfg.num_context)
                                                : std::vector<std::size_t>{};
            const auto sample = make_sample(seq, t, ctx);
            Tape tape;
            const auto preds = detector.forward(tape, sample.target, sample.context, sample.offsets);
            out.push_back({seq.id, t, top_detections(preds, cfg.max_detections), sample.target_truth,
                           sample.occluded});
        }
    }
    return out;
}

EvalReport evaluate(const Detector& detector, std::span<const Sequence> sequences) {
    return make_report(run_inference(detector, sequences), detector.config().num_classes);
}

std::string detections_jsonl(std::span<const FrameResult> frames, double threshold) {
    std::string out;
    for (const auto& f : frames) {
        for (const auto& d : f.detections) {
            if (d.score < threshold) continue;
            const nlohmann::json j{{"sequence_id", f.sequence_id},
                                   {"frame_id", f.frame},
                                   {"class_id", d.class_id},
                                   {"score", d.score},
                                   {"box", {d.box.cx, d.box.cy, d.box.w, d.box.h}}};
            out += j.dump();
            out += '\n';
        }
    }
    return out;
}

std::vector<Heatmap> feature_maps(const Detector& detector, const Sequence& seq, std::size_t t,
                                  const std::string& stage) {
    if (std::ranges::find(kFeatureStages, stage) == kFeatureStages.end()) {
        throw ConfigError("unknown stage '" + stage + "' (expected M_t, h_t, f_i, E_t or R_t)");
    }
    if (t >= seq.size()) {
        throw ContractError("frame " + std::to_string(t) + " outside sequence " + std::to_string(seq.id) + " of " +
                            std::to_string(seq.size()) + " frames");
    }
    const auto& cfg = detector.config();
    const auto ctx = cfg.uses_context() ? nearest_context(seq.size(), t, cfg.num_context) : std::vector<std::size_t>{};
    const auto sample = make_sample(seq, t, ctx);
    Tape tape;
    DetectorTrace trace;
    detector.forward(tape, sample.target, sample.context, sample.offsets, &trace);
    const auto gh = trace.target.grid_h, gw = trace.target.grid_w;
    auto map = [&](const std::string& name, const Tensor& tokens) {
        return Heatmap{name, gh, gw, feature_heatmap(tokens, gh, gw)};
    };
    const auto& agg = trace.aggregation;
    if (stage == "M_t") return {map("M_t", trace.target.tokens)};
    if (stage == "h_t") {
        if (!cfg.enable_tfam || ctx.empty()) throw ContractError("stage h_t is not computed with this configuration");
        return {map("h_t", agg.temporal.h)};
    }
    if (stage == "f_i") {
        if (agg.spatial.empty()) throw ContractError("stage f_i is not computed with this configuration");
        std::vector<Heatmap> out;
        for (std::size_t i = 0; i < agg.spatial.size(); ++i) {
            out.push_back(map("f_" + std::to_string(i + 1), agg.spatial[i].f));
        }
        return out;
    }
    if (stage == "E_t") return {map("E_t", agg.enhanced.e)};
    return {map("R_t", agg.enhanced.r)};
}

}  // namespace ptse
