#include "ptse/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "ptse/errors.hpp"

namespace ptse {

using nlohmann::json;

namespace {

template <typename Config, typename Visit>
void fields(Config& c, Visit&& v) {
    v("d_model", c.d_model);
    v("heads", c.heads);
    v("encoder_layers", c.encoder_layers);
    v("decoder_layers", c.decoder_layers);
    v("correlation_layers", c.correlation_layers);
    v("num_queries", c.num_queries);
    v("num_context", c.num_context);
    v("window_half", c.window_half);
    v("num_classes", c.num_classes);
    v("stem_channels", c.stem_channels);
    v("enable_tfam", c.enable_tfam);
    v("enable_stam", c.enable_stam);
    v("enable_qam", c.enable_qam);
    v("gated", c.gated);
    v("residual_gated", c.residual_gated);
    v("lambda_cls", c.lambda_cls);
    v("lambda_box", c.lambda_box);
    v("lambda_l1", c.lambda_l1);
    v("lambda_giou", c.lambda_giou);
    v("class_cost", c.class_cost);
    v("focal_alpha", c.focal_alpha);
    v("focal_gamma", c.focal_gamma);
    v("lr", c.lr);
    v("lr_drop_epoch", c.lr_drop_epoch);
    v("lr_drop_factor", c.lr_drop_factor);
    v("epochs", c.epochs);
    v("samples_per_epoch", c.samples_per_epoch);
    v("batch_size", c.batch_size);
    v("grad_clip", c.grad_clip);
    v("train_data", c.train_data);
    v("eval_data", c.eval_data);
    v("seed", c.seed);
    v("eval_every", c.eval_every);
    v("eval_frame_stride", c.eval_frame_stride);
    v("max_detections", c.max_detections);
    v("score_threshold", c.score_threshold);
}

void bad(const std::string& key, const std::string& why) { throw ConfigError("config key '" + key + "': " + why); }

}  // namespace

std::size_t RunConfig::drop_epoch() const {
    if (lr_drop_epoch >= 0) return static_cast<std::size_t>(lr_drop_epoch);
    return static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(epochs)));
}

double RunConfig::learning_rate(std::size_t epoch) const {
    return epoch >= drop_epoch() ? lr * lr_drop_factor : lr;
}

LossWeights RunConfig::loss_weights() const {
    LossWeights w;
    w.cls = lambda_cls;
    w.box = lambda_box;
    w.l1 = lambda_l1;
    w.giou = lambda_giou;
    w.class_cost = class_cost == "focal" ? ClassCost::focal : ClassCost::probability;
    w.focal_alpha = focal_alpha;
    w.focal_gamma = focal_gamma;
    return w;
}

void RunConfig::validate() const {
    if (d_model == 0) bad("d_model", "must be positive");
    if (heads == 0 || d_model % heads != 0) {
        bad("heads", std::to_string(heads) + " does not divide d_model " + std::to_string(d_model));
    }
    if (d_model % 4 != 0) bad("d_model", "must be divisible by 4 for the positional encoding");
    if (correlation_layers == 0) bad("correlation_layers", "must be at least 1");
    if (decoder_layers == 0) bad("decoder_layers", "must be at least 1");
    if (num_queries == 0) bad("num_queries", "must be at least 1");
    if (num_classes == 0) bad("num_classes", "must be at least 1");
    if (uses_context() && num_context == 0) bad("num_context", "context modules need at least one context frame");
    if (uses_context() && 2 * window_half < num_context) bad("window_half", "window holds fewer than num_context frames");
    for (auto c : stem_channels) {
        if (c == 0) bad("stem_channels", "channel counts must be positive");
    }
    for (const auto& [key, value] : {std::pair{"lambda_cls", lambda_cls}, std::pair{"lambda_box", lambda_box},
                                     std::pair{"lambda_l1", lambda_l1}, std::pair{"lambda_giou", lambda_giou}}) {
        if (!(value >= 0.0) || !std::isfinite(value)) bad(key, "must be a finite nonnegative number");
    }
    if (class_cost != "probability" && class_cost != "focal") bad("class_cost", "must be \"probability\" or \"focal\"");
    if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) bad("focal_alpha", "must be in [0, 1]");
    if (!(focal_gamma >= 0.0)) bad("focal_gamma", "must be nonnegative");
    if (!(lr > 0.0) || !std::isfinite(lr)) bad("lr", "must be positive");
    if (lr_drop_epoch < -1) bad("lr_drop_epoch", "must be -1 or a nonnegative epoch");
    if (!(lr_drop_factor > 0.0 && lr_drop_factor <= 1.0)) bad("lr_drop_factor", "must be in (0, 1]");
    if (batch_size == 0) bad("batch_size", "must be at least 1");
    if (!(grad_clip >= 0.0)) bad("grad_clip", "must be nonnegative");
    if (eval_frame_stride == 0) bad("eval_frame_stride", "must be at least 1");
    if (max_detections == 0) bad("max_detections", "must be at least 1");
    if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) bad("score_threshold", "must be in [0, 1]");
}

std::string to_json(const RunConfig& config) {
    json j = json::object();
    fields(config, [&](const char* key, const auto& value) { j[key] = value; });
    return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text, bool apply_env) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    std::size_t used = 0;
    fields(c, [&](const char* key, auto& value) {
        if (!j.contains(key)) return;
        ++used;
        try {
            value = j.at(key).get<std::remove_reference_t<decltype(value)>>();
        } catch (const json::exception& e) {
            bad(key, e.what());
        }
    });
    if (used != j.size()) {
        RunConfig probe;
        for (const auto& [key, value] : j.items()) {
            bool known = false;
            fields(probe, [&](const char* k, auto&) { known = known || key == k; });
            if (!known) bad(key, "unknown key");
        }
    }
    if (apply_env) {
        if (const char* env = std::getenv("PTSE_SEED"); env && *env) {
            try {
                std::size_t pos = 0;
                c.seed = std::stoull(env, &pos);
                if (env[pos] != '\0') throw std::invalid_argument("trailing characters");
            } catch (const std::exception&) {
                throw ConfigError(std::string("PTSE_SEED is not an unsigned integer: ") + env);
            }
        }
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path, bool apply_env) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return run_config_from_json(ss.str(), apply_env);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << to_json(config) << "\n";
    if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace ptse
