#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "ptse/matching_loss.hpp"

namespace ptse {

/// Everything a train/eval run needs. JSON keys are the field names.
struct RunConfig {
    // model
    std::size_t d_model = 48;
    std::size_t heads = 6;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t correlation_layers = 2;
    std::size_t num_queries = 100;
    std::size_t num_context = 2;
    std::size_t window_half = 12;
    std::size_t num_classes = 3;
    std::array<std::size_t, 3> stem_channels{16, 32, 64};

    // ablation switches
    bool enable_tfam = true;
    bool enable_stam = true;
    bool enable_qam = true;
    bool gated = true;
    bool residual_gated = true;

    // loss
    double lambda_cls = 2.0;
    double lambda_box = 1.0;
    double lambda_l1 = 5.0;
    double lambda_giou = 2.0;
    std::string class_cost = "probability";  ///< or "focal"
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;

    // optimizer
    double lr = 1e-4;
    int lr_drop_epoch = -1;  ///< -1: 80% of epochs
    double lr_drop_factor = 0.1;
    std::size_t epochs = 50;
    std::size_t samples_per_epoch = 0;  ///< 0: every frame of every training sequence
    std::size_t batch_size = 1;
    double grad_clip = 0.1;  ///< global gradient norm cap, 0 disables

    // data and evaluation
    std::string train_data;
    std::string eval_data;
    std::uint64_t seed = 1;
    std::size_t eval_every = 0;  ///< epochs between evaluations, 0: never
    std::size_t eval_frame_stride = 1;
    std::size_t max_detections = 100;
    double score_threshold = 0.3;  ///< for written detections only

    /// Any context module active, so context frames must be encoded.
    bool uses_context() const { return enable_tfam || enable_stam || enable_qam; }
    std::size_t drop_epoch() const;
    double learning_rate(std::size_t epoch) const;
    LossWeights loss_weights() const;

    /// Throws ConfigError naming the offending key.
    void validate() const;
};

std::string to_json(const RunConfig& config);
/// Unknown keys are rejected. PTSE_SEED in the environment overrides seed.
RunConfig run_config_from_json(const std::string& text, bool apply_env = true);
RunConfig load_run_config(const std::filesystem::path& path, bool apply_env = true);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace ptse
