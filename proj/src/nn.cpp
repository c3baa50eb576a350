#include "ptse/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>

#include "eigen_util.hpp"
#include "ptse/errors.hpp"
#include "ptse/ops.hpp"

namespace ptse {

using detail::as_matrix;
using detail::RowMat;

Tensor ParameterSet::add(std::string name, Tensor value) {
    if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    value.set_requires_grad(true);
    entries_.push_back({std::move(name), value});
    return value;
}

const Tensor& ParameterSet::get(std::string_view name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e.tensor;
    }
    throw ContractError("unknown parameter '" + std::string(name) + "'");
}

bool ParameterSet::contains(std::string_view name) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const NamedTensor& e) { return e.name == name; });
}

std::size_t ParameterSet::element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

void ParameterSet::copy_values_from(std::span<const NamedTensor> source) {
    if (source.size() != entries_.size()) {
        throw ContractError("parameter count mismatch: have " + std::to_string(entries_.size()) +
                            ", source has " + std::to_string(source.size()));
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        auto& dst = entries_[i];
        const auto& src = source[i];
        if (dst.name != src.name || dst.tensor.shape() != src.tensor.shape()) {
            throw ContractError("parameter '" + dst.name + "' " + shape_str(dst.tensor.shape()) +
                                " does not match source '" + src.name + "' " +
                                shape_str(src.tensor.shape()));
        }
        std::ranges::copy(src.tensor.data(), dst.tensor.mutable_data().begin());
    }
}

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Linear::Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng, LinearInit init) {
    Buffer w(in * out, 0.0);
    if (init == LinearInit::xavier) {
        const double bound = xavier_bound(in, out);
        for (auto& v : w) v = rng.uniform(-bound, bound);
    }
    weight_ = params.add(name + ".weight", Tensor({out, in}, std::move(w)));
    bias_ = params.add(name + ".bias", Tensor::zeros({out}));
}

Tensor Linear::forward(Tape& tape, const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != in_features()) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight_.shape()));
    }
    return add_bias(tape, matmul_nt(tape, x, weight_), bias_);
}

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, std::size_t dim) {
    gain_ = params.add(name + ".gain", Tensor::full({dim}, 1.0));
    bias_ = params.add(name + ".bias", Tensor::zeros({dim}));
}

Tensor LayerNorm::forward(Tape& tape, const Tensor& x) const {
    return layer_norm(tape, x, gain_, bias_);
}

FeedForward::FeedForward(ParameterSet& params, const std::string& name, std::size_t dim,
                         std::size_t hidden, Rng& rng)
    : expand_(params, name + ".expand", dim, hidden, rng),
      contract_(params, name + ".contract", hidden, dim, rng),
      norm_(params, name + ".norm", dim) {}

Tensor FeedForward::forward(Tape& tape, const Tensor& x) const {
    const auto inner = contract_.forward(tape, relu(tape, expand_.forward(tape, x)));
    return norm_.forward(tape, add(tape, x, inner));
}

AttentionResult attention_kernel(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                                 std::size_t heads) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw DimensionError("attention: expected matrices, got " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const auto nq = q.rows(), nv = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != nv) {
        throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                             ", v " + shape_str(v.shape()) + " are incompatible");
    }
    if (nv == 0) throw DimensionError("attention: empty key set");
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention: feature dim " + std::to_string(d) +
                             " not divisible by head count " + std::to_string(heads));
    }
    const auto dk = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const auto qm = as_matrix(q.data(), nq, d);
    const auto km = as_matrix(k.data(), nv, d);
    const auto vm = as_matrix(v.data(), nv, d);
    if (!qm.allFinite() || !km.allFinite()) throw NumericError("attention: non-finite input");

    auto probs = std::make_shared<std::vector<RowMat>>(heads);
    Buffer out(nq * d);
    auto om = as_matrix(std::span<double>(out), nq, d);
    Buffer averaged(nq * nv, 0.0);
    auto am = as_matrix(std::span<double>(averaged), nq, nv);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * dk);
        const auto cw = static_cast<Eigen::Index>(dk);
        RowMat s = (qm.middleCols(c0, cw) * km.middleCols(c0, cw).transpose()) * inv_scale;
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
            auto row = s.row(r);
            row.array() = (row.array() - row.maxCoeff()).exp();
            row /= row.sum();
        }
        om.middleCols(c0, cw).noalias() = s * vm.middleCols(c0, cw);
        am += s;
        (*probs)[h] = std::move(s);
    }
    am /= static_cast<double>(heads);

    auto output = tape.record(
        {nq, d}, std::move(out), {q, k, v},
        [q, k, v, probs, heads, dk, nq, nv, d, inv_scale](std::span<const double> g,
                                                           std::span<const double>) mutable {
            const auto gm = as_matrix(g, nq, d);
            const auto qv = as_matrix(q.data(), nq, d);
            const auto kv = as_matrix(k.data(), nv, d);
            const auto vv = as_matrix(v.data(), nv, d);
            for (std::size_t h = 0; h < heads; ++h) {
                const auto c0 = static_cast<Eigen::Index>(h * dk);
                const auto cw = static_cast<Eigen::Index>(dk);
                const RowMat& p = (*probs)[h];
                const auto gh = gm.middleCols(c0, cw);
                if (v.requires_grad()) {
                    as_matrix(v.grad_accumulator(), nv, d).middleCols(c0, cw).noalias() +=
                        p.transpose() * gh;
                }
                if (!q.requires_grad() && !k.requires_grad()) continue;
                RowMat dp = gh * vv.middleCols(c0, cw).transpose();
                const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
                RowMat ds = p.array() * (dp.colwise() - row_dot).array();
                ds *= inv_scale;
                if (q.requires_grad()) {
                    as_matrix(q.grad_accumulator(), nq, d).middleCols(c0, cw).noalias() +=
                        ds * kv.middleCols(c0, cw);
                }
                if (k.requires_grad()) {
                    as_matrix(k.grad_accumulator(), nv, d).middleCols(c0, cw).noalias() +=
                        ds.transpose() * qv.middleCols(c0, cw);
                }
            }
        });
    return {output, Tensor({nq, nv}, std::move(averaged))};
}

MultiHeadAttention::MultiHeadAttention(ParameterSet& params, const std::string& name,
                                       std::size_t dim, std::size_t heads, Rng& rng)
    : dim_(dim),
      heads_(heads),
      projected_(true),
      q_proj_(params, name + ".q", dim, dim, rng),
      k_proj_(params, name + ".k", dim, dim, rng),
      v_proj_(params, name + ".v", dim, dim, rng),
      out_proj_(params, name + ".out", dim, dim, rng) {
    if (heads == 0 || dim % heads != 0) {
        throw ConfigError("heads: model dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
}

MultiHeadAttention MultiHeadAttention::identity(std::size_t dim, std::size_t heads) {
    if (heads == 0 || dim % heads != 0) {
        throw ConfigError("heads: model dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    MultiHeadAttention mha;
    mha.dim_ = dim;
    mha.heads_ = heads;
    return mha;
}

AttentionResult MultiHeadAttention::forward(Tape& tape, const Tensor& q_tokens,
                                            const Tensor& kv_tokens) const {
    if (q_tokens.rank() != 2 || kv_tokens.rank() != 2 || q_tokens.cols() != dim_ ||
        kv_tokens.cols() != dim_) {
        throw DimensionError("attention expects feature dim " + std::to_string(dim_) + ", got q " +
                             shape_str(q_tokens.shape()) + " and kv " + shape_str(kv_tokens.shape()));
    }
    if (!projected_) return attention_kernel(tape, q_tokens, kv_tokens, kv_tokens, heads_);
    auto res = attention_kernel(tape, q_proj_.forward(tape, q_tokens), k_proj_.forward(tape, kv_tokens),
                                v_proj_.forward(tape, kv_tokens), heads_);
    res.output = out_proj_.forward(tape, res.output);
    return res;
}

Tensor sine_positional_encoding(std::size_t h, std::size_t w, std::size_t d) {
    if (d == 0 || d % 4 != 0) {
        throw ConfigError("d_model: sine positional encoding needs a multiple of 4, got " +
                          std::to_string(d));
    }
    const std::size_t half = d / 2;
    const double two_pi = 2.0 * std::numbers::pi;
    Buffer out(h * w * d);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double* row = out.data() + (y * w + x) * d;
            const double coords[2] = {static_cast<double>(y + 1) / static_cast<double>(h) * two_pi,
                                      static_cast<double>(x + 1) / static_cast<double>(w) * two_pi};
            for (std::size_t axis = 0; axis < 2; ++axis) {
                for (std::size_t j = 0; j < half; j += 2) {
                    const double freq =
                        std::pow(10000.0, static_cast<double>(j) / static_cast<double>(half));
                    const double arg = coords[axis] / freq;
                    row[axis * half + j] = std::sin(arg);
                    row[axis * half + j + 1] = std::cos(arg);
                }
            }
        }
    }
    return Tensor({h * w, d}, std::move(out));
}

Adam::Adam(const ParameterSet& params, AdamOptions options) : options_(options) {
    for (const auto& e : params.entries()) {
        first_.emplace_back(e.tensor.numel(), 0.0);
        second_.emplace_back(e.tensor.numel(), 0.0);
    }
}

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> first,
                 std::span<double> second, std::int64_t t, double lr, const AdamOptions& o,
                 std::string_view name) {
    if (grad.size() != param.size() || first.size() != param.size() || second.size() != param.size()) {
        throw DimensionError("adam: buffer sizes disagree for parameter '" + std::string(name) + "'");
    }
    for (double g : grad) {
        if (!std::isfinite(g)) {
            throw NumericError("adam: non-finite gradient in parameter '" + std::string(name) + "'");
        }
    }
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        first[i] = o.beta1 * first[i] + (1.0 - o.beta1) * grad[i];
        second[i] = o.beta2 * second[i] + (1.0 - o.beta2) * grad[i] * grad[i];
        const double m_hat = first[i] / c1;
        const double v_hat = second[i] / c2;
        param[i] -= lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
}

void Adam::step(ParameterSet& params, double lr) {
    if (params.size() != first_.size()) {
        throw ContractError("adam: optimizer state built for a different parameter set");
    }
    ++step_;
    std::size_t i = 0;
    for (const auto& e : params.entries()) {
        Tensor t = e.tensor;
        if (t.has_grad()) {
            adam_update(t.mutable_data(), t.grad(), first_[i], second_[i], step_, lr, options_, e.name);
        }
        ++i;
    }
}

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(bytes, 8);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    char bytes[4];
    for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(bytes, 4);
}

bool get_bytes(std::istream& is, unsigned char* dst, std::size_t n) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(is.gcount()) == n;
}

std::uint64_t get_u64(std::istream& is, const std::filesystem::path& path) {
    unsigned char b[8];
    if (!get_bytes(is, b, 8)) throw IoError("truncated checkpoint: " + path.string());
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint: " + path.string());
    os.write("PTSE", 4);
    put_u32(os, kCheckpointVersion);
    for (const auto& p : params) {
        put_u64(os, p.name.size());
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        const auto& shape = p.tensor.shape();
        put_u64(os, shape.size());
        for (auto d : shape) put_u64(os, d);
        for (double v : p.tensor.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path.string());
    unsigned char header[8];
    if (!get_bytes(is, header, 8) || std::string(header, header + 4) != "PTSE") {
        throw IoError("not a PTSE checkpoint: " + path.string());
    }
    const std::uint32_t version = header[4] | (header[5] << 8) | (header[6] << 16) |
                                  (static_cast<std::uint32_t>(header[7]) << 24);
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
    }
    std::vector<NamedTensor> out;
    while (is.peek() != std::char_traits<char>::eof()) {
        const auto name_len = get_u64(is, path);
        if (name_len > (1u << 20)) throw IoError("corrupt checkpoint record: " + path.string());
        std::string name(name_len, '\0');
        if (!get_bytes(is, reinterpret_cast<unsigned char*>(name.data()), name_len)) {
            throw IoError("truncated checkpoint: " + path.string());
        }
        const auto rank = get_u64(is, path);
        if (rank > 8) throw IoError("corrupt checkpoint record: " + path.string());
        Shape shape(rank);
        for (auto& d : shape) d = get_u64(is, path);
        Buffer data(shape_numel(shape));
        for (auto& v : data) v = std::bit_cast<double>(get_u64(is, path));
        out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    return out;
}

}  // namespace ptse
