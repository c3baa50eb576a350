#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ptse/rng.hpp"
#include "ptse/tensor.hpp"

namespace ptse {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Ordered registry of trainable tensors, keyed by hierarchical name.
class ParameterSet {
public:
    /// Registers value under name (marking it requires_grad) and returns the handle.
    Tensor add(std::string name, Tensor value);

    std::span<const NamedTensor> entries() const { return entries_; }
    const Tensor& get(std::string_view name) const;
    bool contains(std::string_view name) const;
    std::size_t size() const { return entries_.size(); }
    std::size_t element_count() const;

    void zero_grad();
    /// Copies values from a set with identical names and shapes.
    void copy_values_from(std::span<const NamedTensor> source);

private:
    std::vector<NamedTensor> entries_;
};

enum class LinearInit { xavier, zeros };

/// Xavier-uniform bound sqrt(6 / (fan_in + fan_out)).
double xavier_bound(std::size_t fan_in, std::size_t fan_out);

/// y = x W^T + b with W [out x in].
class Linear {
public:
    Linear() = default;
    Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
           LinearInit init = LinearInit::xavier);

    Tensor forward(Tape& tape, const Tensor& x) const;

    const Tensor& weight() const { return weight_; }
    const Tensor& bias() const { return bias_; }
    std::size_t in_features() const { return weight_.dim(1); }
    std::size_t out_features() const { return weight_.dim(0); }

private:
    Tensor weight_;
    Tensor bias_;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParameterSet& params, const std::string& name, std::size_t dim);

    Tensor forward(Tape& tape, const Tensor& x) const;

private:
    Tensor gain_;
    Tensor bias_;
};

/// Position-wise block: norm(x + W2 relu(W1 x)), hidden width 4d by default.
class FeedForward {
public:
    FeedForward() = default;
    FeedForward(ParameterSet& params, const std::string& name, std::size_t dim, std::size_t hidden,
                Rng& rng);

    Tensor forward(Tape& tape, const Tensor& x) const;

    const Linear& expand() const { return expand_; }
    const Linear& contract() const { return contract_; }

private:
    Linear expand_;
    Linear contract_;
    LayerNorm norm_;
};

struct AttentionResult {
    Tensor output;   ///< [N_Q x d], on the tape
    Tensor weights;  ///< [N_Q x N_V] head-averaged softmax weights, constant
};

/// Scaled dot-product attention split into heads along the feature axis:
/// per head softmax(Q_h K_h^T / sqrt(d_k)) V_h, heads concatenated.
/// One fused tape entry; this is the kernel every attention path uses.
AttentionResult attention_kernel(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                                 std::size_t heads);

class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    /// Learned Q/K/V/output projections.
    MultiHeadAttention(ParameterSet& params, const std::string& name, std::size_t dim,
                       std::size_t heads, Rng& rng);
    /// Raw attention softmax(QK^T/sqrt(d_k))V on the input tokens, no parameters.
    static MultiHeadAttention identity(std::size_t dim, std::size_t heads = 1);

    AttentionResult forward(Tape& tape, const Tensor& q_tokens, const Tensor& kv_tokens) const;

    std::size_t dim() const { return dim_; }
    std::size_t heads() const { return heads_; }
    bool projected() const { return projected_; }

private:
    std::size_t dim_ = 0;
    std::size_t heads_ = 1;
    bool projected_ = false;
    Linear q_proj_, k_proj_, v_proj_, out_proj_;
};

/// 2-D sine encoding of an h x w grid, rows in raster order. The first d/2
/// features encode the row coordinate, the rest the column; each frequency
/// contributes a (sin, cos) pair.
Tensor sine_positional_encoding(std::size_t h, std::size_t w, std::size_t d);

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Parameters that received no gradient in the
/// current step are left untouched.
class Adam {
public:
    explicit Adam(const ParameterSet& params, AdamOptions options = {});

    void step(ParameterSet& params, double lr);
    std::int64_t steps() const { return step_; }

private:
    AdamOptions options_;
    std::int64_t step_ = 0;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
};

/// Single-tensor Adam update at step t (1-based). Throws NumericError naming
/// the parameter on a non-finite gradient.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> first,
                 std::span<double> second, std::int64_t t, double lr, const AdamOptions& options,
                 std::string_view name);

/// Flat little-endian container: "PTSE", u32 version, then per parameter
/// u64 name length, name bytes, u64 rank, u64 dims, raw f64 data.
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);
inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace ptse
