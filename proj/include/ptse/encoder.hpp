#pragma once

#include <array>
#include <string>
#include <vector>

#include "ptse/nn.hpp"

namespace ptse {

/// RGB frame, channel-major [3 x height x width], values in [0, 1].
struct FrameImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;

    static constexpr std::size_t channels = 3;

    FrameImage() = default;
    FrameImage(std::size_t h, std::size_t w, double fill = 0.0)
        : height(h), width(w), data(channels * h * w, fill) {}

    double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * height + y) * width + x];
    }
    /// Constant (non-differentiable) tensor view of the pixels.
    Tensor to_tensor(bool requires_grad = false) const;
};

/// Encoded token grid of one frame.
struct MemoryMap {
    Tensor tokens;  ///< [(grid_h * grid_w) x d]
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    int frame_offset = 0;  ///< i relative to the target frame; 0 for the target

    std::size_t token_count() const { return grid_h * grid_w; }
};

struct EncoderOptions {
    std::size_t dim = 48;
    std::size_t heads = 6;
    std::size_t layers = 2;
    std::array<std::size_t, 3> stem_channels{16, 32, 64};
};

/// Shared per-frame feature extractor: three stride-2 3x3 conv + relu stages
/// (total stride 8), a 1x1 projection to d, sine positional encoding, then
/// post-norm self-attention encoder layers.
class FrameEncoder {
public:
    static constexpr std::size_t stride = 8;

    FrameEncoder() = default;
    FrameEncoder(ParameterSet& params, const std::string& name, const EncoderOptions& options, Rng& rng);

    /// Stem tokens [(H/8 * W/8) x d] for a [3 x H x W] pixel tensor.
    Tensor backbone_forward(Tape& tape, const Tensor& pixels) const;
    Tensor backbone_forward(Tape& tape, const FrameImage& image) const;

    MemoryMap encode(Tape& tape, const Tensor& pixels, int frame_offset = 0) const;
    MemoryMap encode(Tape& tape, const FrameImage& image, int frame_offset = 0) const;

    const EncoderOptions& options() const { return options_; }
    /// First stem convolution weight; used to assert parameter sharing.
    const Tensor& stem_weight() const { return conv_weights_[0]; }

private:
    struct Layer {
        MultiHeadAttention attention;
        LayerNorm norm;
        FeedForward ffn;
    };

    EncoderOptions options_;
    std::array<Tensor, 3> conv_weights_;
    std::array<Tensor, 3> conv_biases_;
    Linear projection_;
    std::vector<Layer> layers_;
};

}  // namespace ptse
