// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only if
// every criterion passes.
//
//   acceptance [--only N[,N...]] [--out DIR]
//
// --out keeps the artifacts (imbalance TSV, loss curves, ablation log).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "ptse/correlation.hpp"
#include "ptse/gradcheck_suite.hpp"
#include "ptse/ops.hpp"
#include "ptse/train.hpp"

using namespace ptse;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string format(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// softmax(Q V^T / sqrt(d)) V with plain loops.
std::vector<double> attention_reference(const Tensor& q, const Tensor& v) {
    const auto nq = q.rows(), nv = v.rows(), d = q.cols();
    std::vector<double> out(nq * d, 0.0);
    for (std::size_t i = 0; i < nq; ++i) {
        std::vector<double> s(nv);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < nv; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += q.at(i, c) * v.at(j, c);
            s[j] = dot / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, s[j]);
        }
        double total = 0.0;
        for (auto& x : s) total += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < nv; ++j) {
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += s[j] / total * v.at(j, c);
        }
    }
    return out;
}

// ---------------------------------------------------------------- 2

Verdict gradient_checks() {
    const auto t0 = Clock::now();
    const auto report = run_gradcheck_suite(2024);
    const double secs = seconds_since(t0);
    std::set<std::string> modules;
    std::size_t failed = 0;
    double worst = 0.0;
    bool total_loss_seen = false;
    for (const auto& [module, r] : report.results) {
        modules.insert(module);
        worst = std::max(worst, r.worst_relative_error);
        if (!r.passed || r.probes != 10) ++failed;
        if (r.name == "total_loss") total_loss_seen = true;
    }
    const std::set<std::string> required{"tensor_engine", "nn_layers", "correlation", "encoder", "query_decode",
                                         "matching_loss"};
    const bool covered = std::ranges::includes(modules, required) && total_loss_seen;
    return {failed == 0 && covered && secs < 120.0,
            format("%zu ops, %zu failed, worst rel err %.2e, %s, %.2f s (limit 120 s)", report.results.size(),
                   failed, worst, covered ? "all modules covered" : "MISSING MODULES", secs)};
}

// ---------------------------------------------------------------- 3

Verdict gated_initialization() {
    CorrelationOptions o;
    o.dim = 48;
    o.heads = 1;
    o.layers = 1;
    o.mode = CorrelationMode::gated;
    o.projections = false;
    o.feed_forward = false;
    o.normalize = false;
    ParameterSet params;
    Rng rng(3);
    CorrelationBlock block(params, "g", o, rng);
    double worst = 0.0;
    bool half = true;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto q = random_tensor({16, 48}, seed, false);
        const auto v = random_tensor({16, 48}, seed + 100, false);
        Tape tape;
        CorrelationTrace trace;
        const auto out = block.forward(tape, q, v, &trace);
        for (double m : trace.gate_masks.at(0).data()) half = half && m == 0.5;
        const auto av = attention_reference(q, v);
        for (std::size_t i = 0; i < out.numel(); ++i) {
            worst = std::max(worst, std::abs(out.data()[i] - (av[i] + 0.5 * q.data()[i] + 0.5 * v.data()[i])));
        }
    }
    // Every gate of a freshly built detector starts at zero as well.
    RunConfig cfg;
    Detector det(cfg, 9);
    std::size_t gates = 0;
    bool zero = true;
    for (const auto& e : det.parameters().entries()) {
        if (e.name.find(".gate.") == std::string::npos) continue;
        ++gates;
        zero = zero && std::ranges::all_of(e.tensor.data(), [](double x) { return x == 0.0; });
    }
    return {half && worst <= 1e-12 && zero && gates > 0,
            format("M == 0.5 everywhere: %s; max |out - (AV + 0.5Q + 0.5V)| = %.2e (limit 1e-12); "
                   "%zu detector gate tensors all zero: %s",
                   half ? "yes" : "NO", worst, gates, zero ? "yes" : "NO")};
}

// ---------------------------------------------------------------- 4

Verdict attention_imbalance(const std::optional<fs::path>& out) {
    const auto rows = attention_imbalance_report({1, 10, 100});
    std::ostringstream tsv;
    write_imbalance_tsv(tsv, rows);
    std::printf("%s", tsv.str().c_str());
    if (out) std::ofstream(*out / "attention_imbalance.tsv") << tsv.str();
    bool ok = rows.size() == 3;
    double worst = 0.0;
    for (const auto& r : rows) {
        worst = std::max(worst, std::abs(r.mean_attention_weight - 1.0 / static_cast<double>(r.n_values)));
        ok = ok && r.residual_weight == 1.0;
    }
    ok = ok && worst <= 1e-15;
    return {ok, format("mean weight vs 1/N_V max deviation %.1e for N_V in {1, 10, 100}; residual weight 1", worst)};
}

// ---------------------------------------------------------------- 5

double brute_force_min(const CostMatrix& c) {
    std::vector<std::size_t> rows(c.rows);
    std::iota(rows.begin(), rows.end(), 0);
    double best = INFINITY;
    // Every injective column -> row map appears as the first `cols` entries
    // of some permutation.
    do {
        double total = 0.0;
        for (std::size_t g = 0; g < c.cols; ++g) total += c(rows[g], g);
        best = std::min(best, total);
    } while (std::next_permutation(rows.begin(), rows.end()));
    return best;
}

Verdict hungarian_oracle() {
    const auto t0 = Clock::now();
    Rng rng(5);
    std::size_t mismatches = 0, invalid = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto cols = static_cast<std::size_t>(rng.uniform_int(1, 7));
        const auto rows = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cols), 7));
        CostMatrix c{rows, cols, std::vector<double>(rows * cols)};
        // Integer costs: every partial sum is exact, so equality is exact.
        for (auto& x : c.values) x = static_cast<double>(rng.uniform_int(-100, 100));
        const auto a = hungarian(c);
        std::vector<int> row_use(rows, 0), col_use(cols, 0);
        for (const auto& [q, g] : a.pairs) {
            ++row_use[q];
            ++col_use[g];
        }
        for (auto q : a.unmatched) ++row_use[q];
        if (!std::ranges::all_of(row_use, [](int n) { return n == 1; }) ||
            !std::ranges::all_of(col_use, [](int n) { return n == 1; })) {
            ++invalid;
        }
        if (assignment_cost(c, a) != brute_force_min(c)) ++mismatches;
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && invalid == 0 && secs < 60.0,
            format("1000 matrices up to 7x7: %zu cost mismatches, %zu invalid assignments, %.2f s (limit 60 s)",
                   mismatches, invalid, secs)};
}

// ---------------------------------------------------------------- 6

// A w-wide box shifted along x by w(1-r)/(1+r) has IoU r with the original.
Box at_iou(const Box& b, double r) { return {b.cx + b.w * (1 - r) / (1 + r), b.cy, b.w, b.h}; }

// Precision and recall recomputed from scratch for every prefix of the
// ranking; AP sums, over each recall increase, the best precision at that
// recall or beyond.
double reference_ap(const std::vector<ClassDetection>& dets, const std::vector<ClassTruth>& gts) {
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
                if (o >= 0.5 && o > best_iou) {
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

Verdict loss_and_metric_oracles() {
    const double g = giou(CornerBox{0, 0, 1, 1}, CornerBox{1, 1, 2, 2});
    const double f = focal_loss(0.0, 1, 0.25, 2.0);  // p_t = 0.5

    const Box gt{0.5, 0.5, 0.2, 0.2};
    const std::vector<ClassTruth> one{{0, gt}};
    const std::vector<ClassDetection> hand{{0, 0.9, at_iou(gt, 0.3)}, {0, 0.8, at_iou(gt, 0.7)}};
    const double hand_ap = average_precision(hand, one);

    // Every instance over two truths in one frame, a second frame, and up to
    // three detections drawn from a pool of boxes around them, in every score
    // order.
    const Box gt2{0.3, 0.3, 0.2, 0.2};
    const std::vector<std::vector<ClassTruth>> truth_sets{{{0, gt}}, {{0, gt}, {0, gt2}}, {{0, gt}, {1, gt2}}};
    const std::vector<std::pair<std::size_t, Box>> pool{
        {0, at_iou(gt, 0.9)}, {0, at_iou(gt, 0.6)}, {0, at_iou(gt, 0.4)}, {0, at_iou(gt2, 0.8)},
        {1, at_iou(gt2, 0.7)}, {0, Box{0.8, 0.8, 0.1, 0.1}}};
    std::size_t instances = 0, mismatches = 0;
    for (const auto& truths : truth_sets) {
        for (std::size_t n = 0; n <= 3; ++n) {
            std::vector<std::size_t> pick(n, 0);
            for (;;) {
                std::vector<double> scores(n);
                std::iota(scores.begin(), scores.end(), 1.0);
                do {
                    std::vector<ClassDetection> dets;
                    for (std::size_t i = 0; i < n; ++i) {
                        dets.push_back({pool[pick[i]].first, scores[i] / 4.0, pool[pick[i]].second});
                    }
                    ++instances;
                    if (std::abs(average_precision(dets, truths) - reference_ap(dets, truths)) > 1e-12) ++mismatches;
                } while (std::next_permutation(scores.begin(), scores.end()));
                std::size_t i = 0;
                while (i < n && ++pick[i] == pool.size()) pick[i++] = 0;
                if (i == n) break;
            }
        }
    }
    const bool ok = std::abs(g + 0.5) <= 1e-12 && std::abs(f - 0.0433) <= 1e-4 && hand_ap == 0.5 && mismatches == 0;
    return {ok, format("GIoU = %.15f; focal(p_t=0.5) = %.6f; hand AP = %.17g; exhaustive AP: %zu instances, "
                       "%zu mismatches",
                       g, f, hand_ap, instances, mismatches)};
}

// ---------------------------------------------------------------- 7

Verdict structural_laws() {
    RunConfig cfg;  // N_p = 100, N_c = 2
    Detector det(cfg, 4);
    SceneSpec scene;
    const auto seq = generate_sequence(scene, 3);
    const auto sample = make_sample(seq, 10, nearest_context(seq.size(), 10, cfg.num_context));
    Tape tape;
    DetectorTrace trace;
    const auto preds = det.forward(tape, sample.target, sample.context, sample.offsets, &trace);
    const std::size_t expected = cfg.num_queries * (1 + cfg.num_context);
    const bool count_ok = trace.queries.rows() == expected && preds.size() == expected;

    const auto& m = trace.target.tokens;
    const auto& agg = trace.aggregation;
    const bool shapes_ok = agg.temporal.h.shape() == m.shape() && agg.enhanced.e.shape() == m.shape() &&
                           agg.enhanced.r.shape() == m.shape();

    // Order invariance on four random context memories.
    AggregationOptions ao;
    ao.dim = 48;
    ParameterSet params;
    Rng rng(6);
    Aggregator aggregator(params, "agg", ao, rng);
    auto map = [](std::uint64_t seed, int offset) { return MemoryMap{random_tensor({16, 48}, seed, false), 4, 4, offset}; };
    const auto target = map(1, 0);
    const std::vector<MemoryMap> ctx{map(2, -2), map(3, -1), map(4, 1), map(5, 2)};
    const std::vector<MemoryMap> perm{ctx[2], ctx[0], ctx[3], ctx[1]};
    const auto h = aggregator.tfam(tape, target, ctx);
    const auto hp = aggregator.tfam(tape, target, perm);
    std::vector<SpatialMemory> f, fp;
    for (const auto& c : ctx) f.push_back(aggregator.stam(tape, target, c));
    for (const auto& c : perm) fp.push_back(aggregator.stam(tape, target, c));
    const auto e = aggregator.progressive_aggregate(tape, h, f, target);
    const auto ep = aggregator.progressive_aggregate(tape, h, fp, target);
    const double tfam_diff = max_abs_diff(h.h, hp.h);
    const double fuse_diff = max_abs_diff(e.e, ep.e);

    return {count_ok && shapes_ok && tfam_diff <= 1e-12 && fuse_diff <= 1e-12,
            format("assembled queries %zu (expected %zu); M_t/h_t/E_t/R_t shapes equal: %s; context order: "
                   "TFAM diff %.1e, E_t diff %.1e (limit 1e-12)",
                   trace.queries.rows(), expected, shapes_ok ? "yes" : "NO", tfam_diff, fuse_diff)};
}

// ---------------------------------------------------------------- 8

// The toy ablation recipe. The dataset is occlusion heavy: two opaque bars
// sweep the frame, each covering it half of the time.
DatasetSpec ablation_data(std::size_t sequences, std::size_t first_id) {
    DatasetSpec d;
    d.sequences = sequences;
    d.first_id = first_id;
    d.scene.seed = 11;
    d.scene.max_objects = 1;
    d.scene.occluders = 3;
    d.scene.occluder_width = 20.0;
    return d;
}

RunConfig ablation_config(bool full) {
    RunConfig c;
    // One primal query per object: with many queries per object the matching
    // keeps the queries symmetric and the deeper full model stalls.
    c.num_queries = 1;
    c.window_half = 2;
    c.lr = 2e-4;
    c.epochs = 10;
    c.samples_per_epoch = 3000;
    c.eval_frame_stride = 2;
    c.seed = 1;
    if (!full) {
        c.enable_tfam = c.enable_stam = c.enable_qam = false;
        c.residual_gated = false;
    }
    return c;
}

Verdict toy_ablation(const std::optional<fs::path>& out) {
    const auto t0 = Clock::now();
    const auto train_set = generate_dataset(ablation_data(200, 0));
    const auto eval_set = generate_dataset(ablation_data(40, 100000));
    EvalReport reports[2];
    for (int arm = 0; arm < 2; ++arm) {
        const bool full = arm == 0;
        Detector det(ablation_config(full), 1);
        const auto dir = out ? std::optional<fs::path>(*out / (full ? "ablation_full" : "ablation_baseline")) : std::nullopt;
        train(det, train_set, eval_set, dir, [&](const EpochRecord& e) {
            std::printf("  %s epoch %zu loss %.4f (%.0f s)\n", full ? "full" : "baseline", e.epoch, e.loss.total,
                        seconds_since(t0));
            std::fflush(stdout);
        });
        reports[arm] = evaluate(det, eval_set);
        if (dir) std::ofstream(*dir / "report.json") << reports[arm].to_json() << "\n";
    }
    const double secs = seconds_since(t0);
    const auto& full = reports[0];
    const auto& base = reports[1];
    const double margin = 100.0 * (full.occluded.map - base.occluded.map);
    const bool ok = full.all.map > base.all.map && margin >= 5.0 && secs < 45.0 * 60.0;
    return {ok, format("mAP@0.5 full %.4f vs baseline %.4f; occluded split full %.4f vs baseline %.4f "
                       "(margin %+.2f points, target >= +5); clean split %.4f vs %.4f; %.0f s (limit 2700 s)",
                       full.all.map, base.all.map, full.occluded.map, base.occluded.map, margin, full.clean.map,
                       base.clean.map, secs)};
}

// ---------------------------------------------------------------- 9

std::vector<VideoSample> overfit_samples(const RunConfig& cfg) {
    DatasetSpec d;
    d.sequences = 8;
    d.scene.seed = 5;
    const auto seqs = generate_dataset(d);
    Rng rng(3);
    std::vector<VideoSample> samples;
    for (const auto& s : seqs) samples.push_back(sample_training_item(s, 10, cfg.window_half, cfg.num_context, rng));
    return samples;
}

std::string overfit_curve(const RunConfig& cfg, const std::vector<VideoSample>& samples, std::size_t steps) {
    Detector det(cfg, cfg.seed);
    Trainer trainer(det);
    std::vector<StepRecord> records;
    for (std::size_t i = 0; i < steps; ++i) records.push_back(trainer.step(samples, cfg.lr));
    std::ostringstream os;
    for (const auto& r : records) os << format("%zu,%.17g\n", r.step, r.loss.total);
    return os.str();
}

Verdict overfit(const std::optional<fs::path>& out) {
    RunConfig cfg;
    cfg.num_queries = 16;
    cfg.window_half = 2;
    cfg.lr = 1e-3;
    const auto samples = overfit_samples(cfg);
    const auto t0 = Clock::now();
    const auto a = overfit_curve(cfg, samples, 500);
    const auto b = overfit_curve(cfg, samples, 500);
    if (out) std::ofstream(*out / "overfit_curve.csv") << "step,loss\n" << a;

    std::vector<double> losses;
    std::istringstream is(a);
    for (std::string line; std::getline(is, line);) losses.push_back(std::stod(line.substr(line.find(',') + 1)));
    const double first = losses.front();
    std::size_t hit = 0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        if (losses[i] * 10.0 <= first) {
            hit = i + 1;
            break;
        }
    }
    const double best = *std::ranges::min_element(losses);
    return {hit > 0 && a == b,
            format("loss %.4f -> %.4f (%.1fx); 10x reached at step %s of 500; two runs byte-identical: %s; %.0f s",
                   first, best, first / best, hit ? std::to_string(hit).c_str() : "never", a == b ? "yes" : "NO",
                   seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only;
    std::string out_dir;
    app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
    app.add_option("--out", out_dir, "Directory for report artifacts");
    CLI11_PARSE(app, argc, argv);

    std::optional<fs::path> out;
    if (!out_dir.empty()) {
        out = fs::path(out_dir);
        fs::create_directories(*out);
    }

    const std::vector<std::pair<int, std::function<Verdict()>>> criteria{
        {2, [] { return gradient_checks(); }},
        {3, [] { return gated_initialization(); }},
        {4, [&] { return attention_imbalance(out); }},
        {5, [] { return hungarian_oracle(); }},
        {6, [] { return loss_and_metric_oracles(); }},
        {7, [] { return structural_laws(); }},
        {9, [&] { return overfit(out); }},
        {8, [&] { return toy_ablation(out); }},
    };
    auto selected = [&](int n) { return only.empty() || std::ranges::find(only, n) != only.end(); };

    std::map<int, Verdict> results;
    for (const auto& [n, run] : criteria) {
        if (!selected(n)) continue;
        Verdict v;
        try {
            v = run();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        results[n] = v;
        std::printf("criterion %d: %s  %s\n", n, v.pass ? "PASS" : "FAIL", v.detail.c_str());
        std::fflush(stdout);
    }

    // Paper-scale numbers are out of reach; the criterion holds when every
    // substitute ran and passed.
    if (selected(1)) {
        const bool all_ran = results.size() == 8;
        const bool subs = all_ran && std::ranges::all_of(results, [](const auto& kv) { return kv.second.pass; });
        results[1] = {subs, all_ran ? "substituted by criteria 2-9" : "substituted by criteria 2-9 (not all run)"};
        std::printf("criterion 1: %s  %s\n", subs ? "PASS" : "FAIL", results[1].detail.c_str());
    }
    return std::ranges::all_of(results, [](const auto& kv) { return kv.second.pass; }) ? 0 : 1;
}
