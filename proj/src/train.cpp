#include "ptse/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "ptse/errors.hpp"
#include "ptse/ops.hpp"

namespace ptse {

namespace {

struct Forward {
    Tensor loss;
    LossBreakdown terms;
};

Forward forward_loss(Tape& tape, const Detector& detector, const VideoSample& s) {
    const auto& cfg = detector.config();
    const auto preds = detector.forward(tape, s.target, s.context, s.offsets);
    const auto weights = cfg.loss_weights();
    const auto assignment = hungarian(matching_cost(preds, s.target_truth, weights));
    Forward f;
    f.loss = total_loss(tape, preds, s.target_truth, assignment, weights, &f.terms);
    return f;
}

void accumulate(LossBreakdown& into, const LossBreakdown& x, double w) {
    into.classification += w * x.classification;
    into.l1 += w * x.l1;
    into.giou += w * x.giou;
    into.total += w * x.total;
}

// Loss terms when the matching cannot run (non-finite costs): query k takes
// ground truth k, so each term still shows whether it is finite.
LossBreakdown diagnostic_terms(const Detector& detector, const VideoSample& s) {
    Tape tape;
    const auto preds = detector.forward(tape, s.target, s.context, s.offsets);
    Assignment fixed;
    const auto n = std::min(s.target_truth.size(), preds.size());
    for (std::size_t k = 0; k < n; ++k) fixed.pairs.emplace_back(k, k);
    for (std::size_t q = n; q < preds.size(); ++q) fixed.unmatched.push_back(q);
    LossBreakdown b;
    total_loss(tape, preds, s.target_truth, fixed, detector.config().loss_weights(), &b);
    return b;
}

bool finite(const LossBreakdown& b) {
    return std::isfinite(b.classification) && std::isfinite(b.l1) && std::isfinite(b.giou) && std::isfinite(b.total);
}

nlohmann::json terms_json(const LossBreakdown& b) {
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(std::to_string(x)); };
    return {{"classification", num(b.classification)}, {"l1", num(b.l1)}, {"giou", num(b.giou)},
            {"total", num(b.total)}};
}

void write_nan_dump(const std::filesystem::path& dir, std::size_t step, std::span<const VideoSample> batch,
                    std::span<const LossBreakdown> terms, const std::string& reason) {
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        nlohmann::json item{{"sequence_id", batch[i].sequence_id}, {"frame", batch[i].t}, {"offsets", batch[i].offsets}};
        if (i < terms.size()) item["loss"] = terms_json(terms[i]);
        items.push_back(std::move(item));
    }
    const nlohmann::json dump{{"step", step}, {"reason", reason}, {"batch", items}};
    std::filesystem::create_directories(dir);
    const auto path = dir / "nan_dump.json";
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << dump.dump(2) << "\n";
}

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string fmt_map(const std::optional<EvalReport>& r, const SplitReport EvalReport::*split) {
    if (!r) return "";
    const double m = ((*r).*split).map;
    return std::isnan(m) ? "" : fmt(m);
}

}  // namespace

Trainer::Trainer(Detector& detector) : detector_(detector), adam_(detector.parameters()) {}

LossBreakdown sample_loss(const Detector& detector, const VideoSample& sample) {
    Tape tape;
    return forward_loss(tape, detector, sample).terms;
}

StepRecord Trainer::step(std::span<const VideoSample> batch, double lr, std::size_t epoch,
                         const std::optional<std::filesystem::path>& dump_dir) {
    if (batch.empty()) throw ContractError("train step: empty batch");
    auto& params = detector_.parameters();
    params.zero_grad();
    StepRecord rec;
    rec.step = steps_ + 1;
    rec.epoch = epoch;
    rec.lr = lr;
    const double w = 1.0 / static_cast<double>(batch.size());
    std::vector<LossBreakdown> terms;
    for (const auto& s : batch) {
        Tape tape;
        Forward f;
        try {
            f = forward_loss(tape, detector_, s);
        } catch (const NumericError& e) {
            if (dump_dir) {
                try {
                    terms.push_back(diagnostic_terms(detector_, s));
                } catch (const NumericError&) {
                    const double nan = std::numeric_limits<double>::quiet_NaN();
                    terms.push_back({nan, nan, nan, nan});
                }
                write_nan_dump(*dump_dir, rec.step, batch, terms, e.what());
            }
            throw;
        }
        terms.push_back(f.terms);
        if (!finite(f.terms)) {
            if (dump_dir) write_nan_dump(*dump_dir, rec.step, batch, terms, "non-finite loss");
            throw NumericError("non-finite loss at step " + std::to_string(rec.step) + " (sequence " +
                               std::to_string(s.sequence_id) + ", frame " + std::to_string(s.t) + ")");
        }
        tape.backward(scale(tape, f.loss, w));
        accumulate(rec.loss, f.terms, w);
    }

    double sq = 0.0;
    for (const auto& e : params.entries()) {
        if (!e.tensor.has_grad()) continue;
        for (double g : e.tensor.grad()) sq += g * g;
    }
    rec.grad_norm = std::sqrt(sq);
    if (!std::isfinite(rec.grad_norm)) {
        std::string culprit = "?";
        for (const auto& e : params.entries()) {
            if (!e.tensor.has_grad()) continue;
            const auto g = e.tensor.grad();
            if (!std::all_of(g.begin(), g.end(), [](double x) { return std::isfinite(x); })) {
                culprit = e.name;
                break;
            }
        }
        if (dump_dir) write_nan_dump(*dump_dir, rec.step, batch, terms, "non-finite gradient in " + culprit);
        throw NumericError("non-finite gradient in parameter " + culprit + " at step " + std::to_string(rec.step));
    }
    const double clip = detector_.config().grad_clip;
    if (clip > 0.0 && rec.grad_norm > clip) {
        const double f = clip / rec.grad_norm;
        for (const auto& e : params.entries()) {
            if (!e.tensor.has_grad()) continue;
            for (double& g : e.tensor.grad_accumulator()) g *= f;
        }
    }
    try {
        adam_.step(params, lr);
    } catch (const NumericError& e) {
        if (dump_dir) write_nan_dump(*dump_dir, rec.step, batch, terms, e.what());
        throw;
    }
    ++steps_;
    return rec;
}

void write_loss_curve(const std::filesystem::path& path, std::span<const StepRecord> steps) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "step,epoch,lr,loss,cls,l1,giou\n";
    for (const auto& s : steps) {
        os << s.step << ',' << s.epoch << ',' << fmt(s.lr) << ',' << fmt(s.loss.total) << ','
           << fmt(s.loss.classification) << ',' << fmt(s.loss.l1) << ',' << fmt(s.loss.giou) << '\n';
    }
    if (!os) throw IoError("failed writing " + path.string());
}

TrainResult train(Detector& detector, std::span<const Sequence> train_set, std::span<const Sequence> eval_set,
                  const std::optional<std::filesystem::path>& out_dir,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
    const auto& cfg = detector.config();
    std::vector<std::pair<std::size_t, std::size_t>> items;
    for (std::size_t s = 0; s < train_set.size(); ++s) {
        for (std::size_t t = 0; t < train_set[s].size(); ++t) items.emplace_back(s, t);
    }
    if (items.empty()) throw ContractError("train: empty training set");
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        save_run_config(*out_dir / "config.json", cfg);
    }
    std::ofstream log;
    if (out_dir) {
        log.open(*out_dir / "train_log.csv", std::ios::binary);
        if (!log) throw IoError("cannot write " + (*out_dir / "train_log.csv").string());
        log << "epoch,lr,steps,loss,cls,l1,giou,map,map_occluded,map_clean\n";
    }

    Rng rng(cfg.seed ^ 0x7472616e00000000ULL);
    Trainer trainer(detector);
    TrainResult result;
    const std::size_t per_epoch = cfg.samples_per_epoch > 0 ? cfg.samples_per_epoch : items.size();
    const std::size_t count = cfg.uses_context() ? cfg.num_context : 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lr = cfg.learning_rate(epoch - 1);
        std::vector<std::size_t> order;
        while (order.size() < per_epoch) {
            std::vector<std::size_t> perm(items.size());
            std::iota(perm.begin(), perm.end(), 0);
            for (std::size_t i = perm.size(); i > 1; --i) {
                std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
            }
            order.insert(order.end(), perm.begin(), perm.end());
        }
        order.resize(per_epoch);

        EpochRecord er;
        er.epoch = epoch;
        er.lr = lr;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            std::vector<VideoSample> batch;
            for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) {
                const auto [s, t] = items[order[i]];
                batch.push_back(sample_training_item(train_set[s], t, cfg.window_half, count, rng));
            }
            auto rec = trainer.step(batch, lr, epoch, out_dir);
            accumulate(er.loss, rec.loss, 1.0);
            ++er.steps;
            result.steps.push_back(rec);
        }
        const LossBreakdown sum = er.loss;
        er.loss = {};
        accumulate(er.loss, sum, 1.0 / static_cast<double>(er.steps));

        const bool eval_now = !eval_set.empty() && cfg.eval_every > 0 &&
                              (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        if (eval_now) er.eval = evaluate(detector, eval_set);
        if (log) {
            log << epoch << ',' << fmt(lr) << ',' << er.steps << ',' << fmt(er.loss.total) << ','
                << fmt(er.loss.classification) << ',' << fmt(er.loss.l1) << ',' << fmt(er.loss.giou) << ','
                << fmt_map(er.eval, &EvalReport::all) << ','
                << fmt_map(er.eval, &EvalReport::occluded) << ','
                << fmt_map(er.eval, &EvalReport::clean) << '\n';
            log.flush();
        }
        if (on_epoch) on_epoch(er);
        result.epochs.push_back(std::move(er));
    }

    if (out_dir) {
        write_loss_curve(*out_dir / "loss_curve.csv", result.steps);
        detector.save(*out_dir / "checkpoint.ptse");
    }
    return result;
}

}  // namespace ptse
