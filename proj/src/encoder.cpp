#include "ptse/encoder.hpp"

#include <cmath>

#include "ptse/errors.hpp"
#include "ptse/ops.hpp"

namespace ptse {

Tensor FrameImage::to_tensor(bool requires_grad) const {
    return Tensor({channels, height, width}, data, requires_grad);
}

FrameEncoder::FrameEncoder(ParameterSet& params, const std::string& name, const EncoderOptions& options,
                           Rng& rng)
    : options_(options) {
    std::size_t in = FrameImage::channels;
    for (std::size_t s = 0; s < 3; ++s) {
        const auto out = options.stem_channels[s];
        // He-uniform: keeps the activation scale through the relu stages.
        const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));
        Buffer w(out * in * 9);
        for (auto& v : w) v = rng.uniform(-bound, bound);
        const auto prefix = name + ".stem" + std::to_string(s);
        conv_weights_[s] = params.add(prefix + ".weight", Tensor({out, in, 3, 3}, std::move(w)));
        conv_biases_[s] = params.add(prefix + ".bias", Tensor::zeros({out}));
        in = out;
    }
    projection_ = Linear(params, name + ".proj", in, options.dim, rng);
    for (std::size_t i = 0; i < options.layers; ++i) {
        const auto prefix = name + ".layer" + std::to_string(i);
        layers_.push_back({MultiHeadAttention(params, prefix + ".attn", options.dim, options.heads, rng),
                           LayerNorm(params, prefix + ".norm", options.dim),
                           FeedForward(params, prefix + ".ffn", options.dim, 4 * options.dim, rng)});
    }
}

Tensor FrameEncoder::backbone_forward(Tape& tape, const Tensor& pixels) const {
    if (pixels.rank() != 3 || pixels.dim(0) != FrameImage::channels) {
        throw DimensionError("encoder expects [3 x H x W] pixels, got " + shape_str(pixels.shape()));
    }
    const auto h = pixels.dim(1), w = pixels.dim(2);
    if (h == 0 || w == 0 || h % stride != 0 || w % stride != 0) {
        throw ConfigError("image_size: " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by the backbone stride " + std::to_string(stride));
    }
    Tensor x = pixels;
    for (std::size_t s = 0; s < 3; ++s) x = relu(tape, conv2d(tape, x, conv_weights_[s], conv_biases_[s], 2, 1));
    const auto c = x.dim(0), positions = x.dim(1) * x.dim(2);
    const auto tokens = transpose(tape, reshape(tape, x, {c, positions}));
    return projection_.forward(tape, tokens);
}

Tensor FrameEncoder::backbone_forward(Tape& tape, const FrameImage& image) const {
    return backbone_forward(tape, image.to_tensor());
}

MemoryMap FrameEncoder::encode(Tape& tape, const Tensor& pixels, int frame_offset) const {
    const auto gh = pixels.rank() == 3 ? pixels.dim(1) / stride : 0;
    const auto gw = pixels.rank() == 3 ? pixels.dim(2) / stride : 0;
    Tensor x = backbone_forward(tape, pixels);
    x = add(tape, x, sine_positional_encoding(gh, gw, options_.dim));
    for (const auto& layer : layers_) {
        const auto attn = layer.attention.forward(tape, x, x);
        x = layer.ffn.forward(tape, layer.norm.forward(tape, add(tape, attn.output, x)));
    }
    return {x, gh, gw, frame_offset};
}

MemoryMap FrameEncoder::encode(Tape& tape, const FrameImage& image, int frame_offset) const {
    return encode(tape, image.to_tensor(), frame_offset);
}

}  // namespace ptse
