// ptse: dataset generation, training, evaluation and diagnostics.
//
// Exit codes: 0 ok, 1 usage or configuration error, 2 I/O error, 3 numeric failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "ptse/errors.hpp"
#include "ptse/eval.hpp"
#include "ptse/gradcheck_suite.hpp"
#include "ptse/train.hpp"

namespace fs = std::filesystem;
using namespace ptse;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

// The checkpoint holds parameters only; the architecture comes from the
// config saved next to it by `train` unless --config names another file.
std::unique_ptr<Detector> load_detector(const fs::path& checkpoint, const std::string& config_path) {
    if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint.string());
    const fs::path cfg = config_path.empty() ? checkpoint.parent_path() / "config.json" : fs::path(config_path);
    auto det = std::make_unique<Detector>(load_run_config(cfg), 0);
    det->load(checkpoint);
    return det;
}

std::vector<Sequence> load_data(const std::string& dir, const std::string& key) {
    if (dir.empty()) throw ConfigError("config key '" + key + "': no dataset directory given");
    return read_dataset(dir);
}

int gen_data(const std::string& spec_path, const fs::path& out) {
    const auto spec = dataset_spec_from_json(slurp(spec_path));
    const auto seqs = generate_dataset(spec);
    write_dataset(out, spec, seqs);
    std::size_t frames = 0, occluded = 0;
    for (const auto& s : seqs) {
        frames += s.size();
        for (const auto& a : s.annotations) occluded += a.occluded() ? 1 : 0;
    }
    std::printf("wrote %zu sequences, %zu frames (%zu occluded) to %s\n", seqs.size(), frames, occluded,
                out.string().c_str());
    return 0;
}

int train_cmd(const std::string& config_path, const fs::path& out) {
    const auto cfg = load_run_config(config_path);
    const auto train_set = load_data(cfg.train_data, "train_data");
    const auto eval_set = cfg.eval_data.empty() ? std::vector<Sequence>{} : read_dataset(cfg.eval_data);
    Detector det(cfg, cfg.seed);
    std::printf("training %zu parameters on %zu sequences, %zu epochs\n", det.parameters().element_count(),
                train_set.size(), cfg.epochs);
    train(det, train_set, eval_set, out, [](const EpochRecord& e) {
        std::printf("epoch %zu lr %.3g loss %.5f (cls %.5f l1 %.5f giou %.5f)", e.epoch, e.lr, e.loss.total,
                    e.loss.classification, e.loss.l1, e.loss.giou);
        if (e.eval) std::printf(" map %.4f occluded %.4f", e.eval->all.map, e.eval->occluded.map);
        std::printf("\n");
        std::fflush(stdout);
    });
    std::printf("checkpoint %s\n", (out / "checkpoint.ptse").string().c_str());
    return 0;
}

int eval_cmd(const fs::path& checkpoint, const std::string& config, const std::string& data, const fs::path& report) {
    const auto det = load_detector(checkpoint, config);
    const auto seqs = load_data(data, "data");
    const auto r = evaluate(*det, seqs);
    write_text(report, r.to_json() + "\n");
    std::printf("mAP@0.5 %.4f (occluded %.4f, clean %.4f) over %zu frames\n", r.all.map, r.occluded.map, r.clean.map,
                r.all.frames);
    return 0;
}

int infer_cmd(const fs::path& checkpoint, const std::string& config, const std::string& data, const fs::path& out) {
    const auto det = load_detector(checkpoint, config);
    const auto seqs = load_data(data, "data");
    const auto frames = run_inference(*det, seqs);
    const auto text = detections_jsonl(frames, det->config().score_threshold);
    write_text(out, text);
    std::printf("%zu detections over %zu frames\n", static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')),
                frames.size());
    return 0;
}

int featmap_cmd(const fs::path& checkpoint, const std::string& config, const std::string& data,
                const std::string& sample, const std::string& stage, const fs::path& out) {
    const auto colon = sample.find(':');
    std::size_t seq_id = 0, t = 0;
    try {
        if (colon == std::string::npos) throw std::invalid_argument("no colon");
        std::size_t a = 0, b = 0;
        seq_id = std::stoul(sample.substr(0, colon), &a);
        t = std::stoul(sample.substr(colon + 1), &b);
        if (a != colon || b != sample.size() - colon - 1) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
        throw ConfigError("--sample must be SEQ:T, got '" + sample + "'");
    }
    if (std::ranges::find(kFeatureStages, stage) == kFeatureStages.end()) {
        throw ConfigError("unknown stage '" + stage + "' (expected M_t, h_t, f_i, E_t or R_t)");
    }
    const auto det = load_detector(checkpoint, config);
    const auto seqs = load_data(data, "data");
    const auto it = std::ranges::find_if(seqs, [&](const Sequence& s) { return s.id == seq_id; });
    if (it == seqs.end()) throw ContractError("no sequence " + std::to_string(seq_id) + " in " + data);
    fs::create_directories(out);
    for (const auto& m : feature_maps(*det, *it, t, stage)) {
        const auto path = out / (m.name + ".pgm");
        write_pgm(path, m.pixels, m.height, m.width);
        std::printf("%s (%zux%zu)\n", path.string().c_str(), m.height, m.width);
    }
    return 0;
}

int gradcheck_cmd(std::uint64_t seed) {
    const auto r = run_gradcheck_suite(seed);
    std::printf("%s", r.table().c_str());
    std::printf("%zu ops, %.2f s, %s\n", r.results.size(), r.seconds, r.passed() ? "all passed" : "FAILURES");
    return r.passed() ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PTSE video object detector on synthetic video"};
    app.require_subcommand(1);

    std::string spec, config, out, checkpoint, data, report, sample, stage = "R_t";
    std::uint64_t seed = 1;

    auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
    gen->add_option("--spec", spec, "Dataset spec JSON")->required();
    gen->add_option("--out", out, "Output directory")->required();

    auto* tr = app.add_subcommand("train", "Train a detector");
    tr->add_option("--config", config, "Run config JSON")->required();
    tr->add_option("--out", out, "Output directory")->required();

    auto* ev = app.add_subcommand("eval", "mAP@0.5 report");
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--data", data)->required();
    ev->add_option("--report", report)->required();
    ev->add_option("--config", config, "Run config (default: config.json next to the checkpoint)");

    auto* inf = app.add_subcommand("infer", "Detections as JSON lines");
    inf->add_option("--checkpoint", checkpoint)->required();
    inf->add_option("--data", data)->required();
    inf->add_option("--out", out)->required();
    inf->add_option("--config", config, "Run config (default: config.json next to the checkpoint)");

    auto* fm = app.add_subcommand("featmap", "Feature-norm heatmaps as PGM");
    fm->add_option("--checkpoint", checkpoint)->required();
    fm->add_option("--data", data, "Dataset holding the sample")->required();
    fm->add_option("--sample", sample, "SEQ:T")->required();
    fm->add_option("--stage", stage, "M_t, h_t, f_i, E_t or R_t");
    fm->add_option("--out", out)->required();
    fm->add_option("--config", config, "Run config (default: config.json next to the checkpoint)");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    gc->add_option("--seed", seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) return gen_data(spec, out);
        if (*tr) return train_cmd(config, out);
        if (*ev) return eval_cmd(checkpoint, config, data, report);
        if (*inf) return infer_cmd(checkpoint, config, data, out);
        if (*fm) return featmap_cmd(checkpoint, config, data, sample, stage, out);
        if (*gc) return gradcheck_cmd(seed);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
