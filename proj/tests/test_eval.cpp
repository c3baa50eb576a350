#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ptse/errors.hpp"
#include "ptse/eval.hpp"
#include "ptse/rng.hpp"

using namespace ptse;

namespace {

// A w-wide box shifted along x by w(1-r)/(1+r) has IoU r with the original.
Box at_iou(const Box& b, double r) { return {b.cx + b.w * (1 - r) / (1 + r), b.cy, b.w, b.h}; }

// Independent evaluator: precision/recall recomputed from scratch for every
// prefix of the ranking, then AP = sum over recall steps of the best
// precision at that recall or beyond.
double reference_ap(const std::vector<ClassDetection>& dets, const std::vector<ClassTruth>& gts, double thr) {
    std::vector<ClassDetection> ranked = dets;
    std::ranges::stable_sort(ranked, [](const auto& a, const auto& b) { return a.score > b.score; });
    std::vector<double> prec, rec;
    for (std::size_t k = 1; k <= ranked.size(); ++k) {
        std::vector<bool> used(gts.size(), false);
        std::size_t tp = 0;
        for (std::size_t i = 0; i < k; ++i) {
            int best = -1;
            double best_iou = -1.0;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                if (used[g] || gts[g].frame != ranked[i].frame) continue;
                const double o = iou(ranked[i].box, gts[g].box);
                if (o >= thr && o > best_iou) {
                    best_iou = o;
                    best = static_cast<int>(g);
                }
            }
            if (best >= 0) {
                used[static_cast<std::size_t>(best)] = true;
                ++tp;
            }
        }
        prec.push_back(double(tp) / double(k));
        rec.push_back(double(tp) / double(gts.size()));
    }
    double ap = 0.0, prev = 0.0;
    for (std::size_t k = 0; k < rec.size(); ++k) {
        if (rec[k] <= prev) continue;
        double p = 0.0;
        for (std::size_t j = k; j < rec.size(); ++j) p = std::max(p, prec[j]);
        ap += (rec[k] - prev) * p;
        prev = rec[k];
    }
    return ap;
}

FrameResult copy_truth(const GroundTruth& gt, bool occluded) {
    FrameResult f;
    f.truth = gt;
    f.occluded = occluded;
    for (std::size_t k = 0; k < gt.size(); ++k) f.detections.push_back({gt.classes[k], 1.0, gt.boxes[k]});
    return f;
}

}  // namespace

TEST_CASE("AP hand cases") {
    const Box gt{0.5, 0.5, 0.2, 0.2};
    const std::vector<ClassTruth> one{{0, gt}};
    SUBCASE("single matching detection") {
        CHECK(iou(at_iou(gt, 0.9), gt) == doctest::Approx(0.9).epsilon(1e-12));
        const std::vector<ClassDetection> d{{0, 0.7, at_iou(gt, 0.9)}};
        CHECK(average_precision(d, one) == 1.0);
    }
    SUBCASE("false positive ranked above the true positive") {
        const Box low = at_iou(gt, 0.3), high = at_iou(gt, 0.7);
        CHECK(iou(low, gt) == doctest::Approx(0.3).epsilon(1e-12));
        CHECK(iou(high, gt) == doctest::Approx(0.7).epsilon(1e-12));
        const std::vector<ClassDetection> d{{0, 0.9, low}, {0, 0.8, high}};
        CHECK(average_precision(d, one) == 0.5);
    }
    SUBCASE("undefined without truth, zero without detections") {
        CHECK(std::isnan(average_precision(std::vector<ClassDetection>{{0, 0.5, gt}}, {})));
        CHECK(average_precision({}, one) == 0.0);
    }
    SUBCASE("detections in another frame never match") {
        const std::vector<ClassDetection> d{{1, 0.9, gt}};
        CHECK(average_precision(d, one) == 0.0);
    }
    SUBCASE("non-finite score") {
        const std::vector<ClassDetection> d{{0, std::nan(""), gt}};
        CHECK_THROWS_AS(average_precision(d, one), ContractError);
    }
}

TEST_CASE("AP matches the reference evaluator on small random instances") {
    Rng rng(11);
    std::size_t checked = 0;
    for (int trial = 0; trial < 4000; ++trial) {
        const auto nd = static_cast<std::size_t>(rng.uniform_int(0, 5));
        const auto ng = static_cast<std::size_t>(rng.uniform_int(1, 4));
        std::vector<ClassTruth> gts;
        std::vector<ClassDetection> dets;
        auto random_box = [&] {
            return Box{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)};
        };
        for (std::size_t g = 0; g < ng; ++g) gts.push_back({static_cast<std::size_t>(rng.uniform_int(0, 1)), random_box()});
        for (std::size_t d = 0; d < nd; ++d) {
            const auto frame = static_cast<std::size_t>(rng.uniform_int(0, 1));
            // Half the detections are jittered copies of a truth box.
            Box b = random_box();
            if (rng.bernoulli(0.5)) {
                b = gts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ng) - 1))].box;
                b.cx += rng.uniform(-0.05, 0.05);
                b.w *= rng.uniform(0.8, 1.2);
            }
            dets.push_back({frame, rng.uniform(), b});
        }
        CHECK(average_precision(dets, gts) == doctest::Approx(reference_ap(dets, gts, 0.5)).epsilon(1e-12));
        const double ap = average_precision(dets, gts);
        CHECK(ap >= 0.0);
        CHECK(ap <= 1.0);
        ++checked;
    }
    CHECK(checked == 4000);
}

TEST_CASE("summaries: ground-truth copy scores 1, empty predictions 0") {
    SceneSpec spec;
    spec.frames = 6;
    const auto seq = generate_sequence(spec, 3);
    std::vector<FrameResult> copies, empty;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        copies.push_back(copy_truth(seq.annotations[t].ground_truth(), t % 2 == 0));
        empty.push_back(copies.back());
        empty.back().detections.clear();
    }
    const auto full = make_report(copies, kNumShapeClasses);
    CHECK(full.all.map == 1.0);
    CHECK(full.occluded.map == 1.0);
    CHECK(full.clean.map == 1.0);
    CHECK(full.all.frames == 6);
    CHECK(full.occluded.frames + full.clean.frames == 6);
    CHECK(full.all.detections == full.all.truths);
    const auto none = make_report(empty, kNumShapeClasses);
    CHECK(none.all.map == 0.0);
    CHECK(none.all.detections == 0);

    SUBCASE("classes without truth are left out of the mean") {
        FrameResult f;
        f.truth.boxes = {{0.5, 0.5, 0.2, 0.2}};
        f.truth.classes = {1};
        f.detections = {{1, 0.9, {0.5, 0.5, 0.2, 0.2}}, {0, 0.8, {0.2, 0.2, 0.1, 0.1}}};
        const auto s = summarize(std::vector<FrameResult>{f}, 3);
        CHECK(std::isnan(s.ap[0]));
        CHECK(std::isnan(s.ap[2]));
        CHECK(s.map == 1.0);
        CHECK(std::isnan(summarize({}, 3).map));
    }
}

TEST_CASE("top detections rank (query, class) scores") {
    DetectionSet d{Tensor({2, 2}, {0.0, 2.0, -1.0, 1.0}), Tensor({2, 4}, {0.5, 0.5, 0.1, 0.1, 0.2, 0.2, 0.3, 0.3})};
    const auto top = top_detections(d, 3);
    REQUIRE(top.size() == 3);
    CHECK(top[0].class_id == 1);
    CHECK(top[0].score == doctest::Approx(1 / (1 + std::exp(-2.0))));
    CHECK(top[1].box.cx == 0.2);
    CHECK(top[2].score == 0.5);
    CHECK(top_detections(d, 10, 0.6).size() == 2);
}

TEST_CASE("evaluation of a detector is deterministic") {
    RunConfig cfg;
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.num_queries = 6;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.correlation_layers = 1;
    cfg.stem_channels = {4, 8, 8};
    cfg.eval_frame_stride = 3;
    SceneSpec spec;
    spec.frames = 7;
    spec.height = spec.width = 32;
    spec.min_size = 3;
    spec.max_size = 5;
    const std::vector<Sequence> data{generate_sequence(spec, 0), generate_sequence(spec, 1)};
    const Detector det(cfg, 5);
    const auto a = run_inference(det, data);
    CHECK(a.size() == 6);
    CHECK(a[1].frame == 3);
    for (const auto& f : a) CHECK(f.detections.size() == cfg.num_queries * (1 + cfg.num_context) * cfg.num_classes);
    CHECK(evaluate(det, data).to_json() == evaluate(det, data).to_json());
}
