#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ptse/encoder.hpp"
#include "ptse/matching_loss.hpp"
#include "ptse/rng.hpp"

namespace ptse {

enum class ShapeClass : int { circle = 0, square = 1, triangle = 2 };
inline constexpr std::size_t kNumShapeClasses = 3;
const char* shape_name(ShapeClass c);

/// Parameters of one synthetic scene. Sizes and speeds are in pixels.
struct SceneSpec {
    std::uint64_t seed = 1;
    std::size_t frames = 24;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t min_objects = 1;
    std::size_t max_objects = 3;
    double min_size = 6.0;  ///< half extent before deformation
    double max_size = 10.0;
    double min_speed = 0.5;
    double max_speed = 2.0;
    double deformation = 0.15;         ///< relative amplitude of the w/h oscillation
    double deformation_period = 16.0;  ///< frames
    std::size_t occluders = 1;         ///< vertical opaque bars
    double occluder_width = 14.0;
    double occluder_speed = 1.0;
    double occlusion_probability = 0.5;  ///< per bar, per frame
    double blur_probability = 0.0;
    std::vector<std::size_t> blur_kernels{3};
    double noise = 0.0;  ///< uniform pixel noise amplitude

    /// Throws ConfigError naming the first offending field.
    void validate() const;
};

/// A scene spec plus how many sequences to draw from it.
struct DatasetSpec {
    SceneSpec scene;
    std::size_t sequences = 200;
    std::size_t first_id = 0;
};

struct ObjectAnnotation {
    int class_id = 0;
    Box box;               ///< amodal, normalized (cx, cy, w, h)
    double visible = 1.0;  ///< fraction of the object's pixels left uncovered
};

struct FrameAnnotation {
    std::size_t frame = 0;
    std::vector<ObjectAnnotation> objects;
    std::size_t blur_kernel = 1;  ///< 1 = not blurred

    GroundTruth ground_truth() const;
    /// Some object has less than half of its pixels visible.
    bool occluded(double threshold = 0.5) const;
};

/// 8-bit RGB frame, row-major interleaved.
struct RgbFrame {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> rgb;

    FrameImage to_image() const;
};

struct Sequence {
    std::size_t id = 0;
    SceneSpec spec;
    std::vector<RgbFrame> frames;
    std::vector<FrameAnnotation> annotations;

    std::size_t size() const { return frames.size(); }
};

/// Renders one sequence. The scene seed is spec.seed ^ sequence_id.
Sequence generate_sequence(const SceneSpec& spec, std::size_t sequence_id = 0);
std::vector<Sequence> generate_dataset(const DatasetSpec& spec);

struct VideoSample {
    std::size_t sequence_id = 0;
    std::size_t t = 0;
    FrameImage target;
    GroundTruth target_truth;
    bool occluded = false;
    std::vector<FrameImage> context;
    std::vector<int> offsets;  ///< context index minus t
};

/// Context frames uniformly drawn without replacement from
/// [t - L, t + L] \ {t}, clamped to the sequence.
VideoSample sample_training_item(const Sequence& seq, std::size_t t, std::size_t half_window, std::size_t count,
                                 Rng& rng);
/// The `count` frames nearest to t (earlier first on ties).
std::vector<std::size_t> nearest_context(std::size_t length, std::size_t t, std::size_t count);
VideoSample make_sample(const Sequence& seq, std::size_t t, const std::vector<std::size_t>& context);

// On-disk layout: DIR/manifest.json (dataset) and DIR/seq_%05d/ with
// frame_%05d.ppm, ann.jsonl and manifest.json (scene spec used).
std::string scene_spec_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const std::string& text);
DatasetSpec dataset_spec_from_json(const std::string& text);
std::string dataset_spec_json(const DatasetSpec& spec);

void write_ppm(const std::filesystem::path& path, const RgbFrame& frame);
RgbFrame read_ppm(const std::filesystem::path& path);
void write_sequence(const std::filesystem::path& dir, const Sequence& seq);
Sequence read_sequence(const std::filesystem::path& dir);
void write_dataset(const std::filesystem::path& root, const DatasetSpec& spec, const std::vector<Sequence>& seqs);
std::vector<Sequence> read_dataset(const std::filesystem::path& root);

}  // namespace ptse
