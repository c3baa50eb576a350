#include "ptse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "eigen_util.hpp"
#include "ptse/errors.hpp"

namespace ptse {

namespace {

using detail::as_matrix;
using detail::RowMat;

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_finite(std::span<const double> d, const char* op) {
    for (double v : d) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

// Elementwise unary op: value f(x), derivative df(x, y).
template <class F, class DF>
Tensor unary(Tape& tape, const Tensor& a, F f, DF df) {
    Buffer out(a.numel());
    const auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return tape.record(a.shape(), std::move(out), {a},
                       [a, df](std::span<const double> g, std::span<const double> y) mutable {
                           auto ga = a.grad_accumulator();
                           const auto x = a.data();
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
                       });
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const auto m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Buffer out(m * n);
    as_matrix(std::span<double>(out), m, n).noalias() =
        as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
    return tape.record({m, n}, std::move(out), {a, b},
                       [a, b, m, k, n](std::span<const double> g, std::span<const double>) mutable {
                           const auto gm = as_matrix(g, m, n);
                           if (a.requires_grad()) {
                               as_matrix(a.grad_accumulator(), m, k).noalias() +=
                                   gm * as_matrix(b.data(), k, n).transpose();
                           }
                           if (b.requires_grad()) {
                               as_matrix(b.grad_accumulator(), k, n).noalias() +=
                                   as_matrix(a.data(), m, k).transpose() * gm;
                           }
                       });
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    const auto m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()) + "^T");
    }
    Buffer out(m * n);
    as_matrix(std::span<double>(out), m, n).noalias() =
        as_matrix(a.data(), m, k) * as_matrix(b.data(), n, k).transpose();
    return tape.record({m, n}, std::move(out), {a, b},
                       [a, b, m, k, n](std::span<const double> g, std::span<const double>) mutable {
                           const auto gm = as_matrix(g, m, n);
                           if (a.requires_grad()) {
                               as_matrix(a.grad_accumulator(), m, k).noalias() +=
                                   gm * as_matrix(b.data(), n, k);
                           }
                           if (b.requires_grad()) {
                               as_matrix(b.grad_accumulator(), n, k).noalias() +=
                                   gm.transpose() * as_matrix(a.data(), m, k);
                           }
                       });
}

Tensor transpose(Tape& tape, const Tensor& a) {
    require_matrix(a, "transpose");
    const auto m = a.rows(), n = a.cols();
    Buffer out(m * n);
    as_matrix(std::span<double>(out), n, m) = as_matrix(a.data(), m, n).transpose();
    return tape.record({n, m}, std::move(out), {a},
                       [a, m, n](std::span<const double> g, std::span<const double>) mutable {
                           as_matrix(a.grad_accumulator(), m, n) += as_matrix(g, n, m).transpose();
                       });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Buffer out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return tape.record(a.shape(), std::move(out), {a, b},
                       [a, b](std::span<const double> g, std::span<const double>) mutable {
                           for (const Tensor* t : {&a, &b}) {
                               if (!t->requires_grad()) continue;
                               auto gt = t->grad_accumulator();
                               for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
                           }
                       });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Buffer out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return tape.record(a.shape(), std::move(out), {a, b},
                       [a, b](std::span<const double> g, std::span<const double>) mutable {
                           if (a.requires_grad()) {
                               auto ga = a.grad_accumulator();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (b.requires_grad()) {
                               auto gb = b.grad_accumulator();
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                       });
}

Tensor hadamard(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Buffer out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return tape.record(a.shape(), std::move(out), {a, b},
                       [a, b](std::span<const double> g, std::span<const double>) mutable {
                           if (a.requires_grad()) {
                               auto ga = a.grad_accumulator();
                               const auto y = b.data();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                           }
                           if (b.requires_grad()) {
                               auto gb = b.grad_accumulator();
                               const auto x = a.data();
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                           }
                       });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) { return affine(tape, a, factor, 0.0); }

Tensor affine(Tape& tape, const Tensor& a, double factor, double offset) {
    return unary(
        tape, a, [factor, offset](double x) { return factor * x + offset; },
        [factor](double, double) { return factor; });
}

Tensor add_bias(Tape& tape, const Tensor& a, const Tensor& bias) {
    require_matrix(a, "add_bias");
    const auto m = a.rows(), n = a.cols();
    if (bias.numel() != n) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                             shape_str(a.shape()));
    }
    Buffer out(a.data().begin(), a.data().end());
    const auto b = bias.data();
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += b[c];
    }
    return tape.record({m, n}, std::move(out), {a, bias},
                       [a, bias, m, n](std::span<const double> g, std::span<const double>) mutable {
                           if (a.requires_grad()) {
                               auto ga = a.grad_accumulator();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (bias.requires_grad()) {
                               auto gb = bias.grad_accumulator();
                               for (std::size_t r = 0; r < m; ++r) {
                                   for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
                               }
                           }
                       });
}

Tensor relu(Tape& tape, const Tensor& a) {
    return unary(
        tape, a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& a) {
    return unary(
        tape, a,
        [](double x) {
            // Branches keep exp() from overflowing for large |x|.
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor softmax_rows(Tape& tape, const Tensor& a) {
    require_matrix(a, "softmax_rows");
    const auto m = a.rows(), n = a.cols();
    if (n == 0) throw DimensionError("softmax_rows: rows must be non-empty");
    const auto x = a.data();
    require_finite(x, "softmax_rows");
    Buffer out(m * n);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = x.data() + r * n;
        double* dst = out.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            dst[c] = std::exp(row[c] - mx);
            total += dst[c];
        }
        for (std::size_t c = 0; c < n; ++c) dst[c] /= total;
    }
    return tape.record({m, n}, std::move(out), {a},
                       [a, m, n](std::span<const double> g, std::span<const double> y) mutable {
                           auto ga = a.grad_accumulator();
                           for (std::size_t r = 0; r < m; ++r) {
                               double dot = 0.0;
                               for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
                               for (std::size_t c = 0; c < n; ++c) {
                                   ga[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
                               }
                           }
                       });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_matrix(x, "layer_norm");
    const auto m = x.rows(), n = x.cols();
    if (gain.numel() != n || bias.numel() != n) {
        throw DimensionError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
    }
    auto normed = std::make_shared<Buffer>(m * n);
    auto inv_std = std::make_shared<Buffer>(m);
    Buffer out(m * n);
    const auto xv = x.data(), gv = gain.data(), bv = bias.data();
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t c = 0; c < n; ++c) mu += row[c];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < n; ++c) {
            const double h = (row[c] - mu) * is;
            (*normed)[r * n + c] = h;
            out[r * n + c] = gv[c] * h + bv[c];
        }
    }
    return tape.record(
        {m, n}, std::move(out), {x, gain, bias},
        [x, gain, bias, normed, inv_std, m, n](std::span<const double> g,
                                               std::span<const double>) mutable {
            const auto& h = *normed;
            if (gain.requires_grad()) {
                auto gg = gain.grad_accumulator();
                for (std::size_t i = 0; i < m * n; ++i) gg[i % n] += g[i] * h[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad_accumulator();
                for (std::size_t i = 0; i < m * n; ++i) gb[i % n] += g[i];
            }
            if (x.requires_grad()) {
                auto gx = x.grad_accumulator();
                const auto gv = gain.data();
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t r = 0; r < m; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                        const double dh = g[r * n + c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * h[r * n + c];
                    }
                    mean_dh *= inv_n;
                    mean_dh_h *= inv_n;
                    for (std::size_t c = 0; c < n; ++c) {
                        const double dh = g[r * n + c] * gv[c];
                        gx[r * n + c] += (*inv_std)[r] * (dh - mean_dh - h[r * n + c] * mean_dh_h);
                    }
                }
            }
        });
}

Tensor sum(Tape& tape, const Tensor& a) {
    const auto d = a.data();
    const double total = std::accumulate(d.begin(), d.end(), 0.0);
    return tape.record({}, {total}, {a}, [a](std::span<const double> g, std::span<const double>) mutable {
        auto ga = a.grad_accumulator();
        for (auto& v : ga) v += g[0];
    });
}

Tensor mean(Tape& tape, const Tensor& a) {
    const auto n = a.numel();
    if (n == 0) throw DimensionError("mean of empty tensor");
    return scale(tape, sum(tape, a), 1.0 / static_cast<double>(n));
}

Tensor weighted_sum(Tape& tape, const Tensor& a, std::span<const double> weights) {
    if (weights.size() != a.numel()) {
        throw DimensionError("weighted_sum: " + std::to_string(weights.size()) +
                             " weights for tensor " + shape_str(a.shape()));
    }
    const auto d = a.data();
    double total = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) total += d[i] * weights[i];
    Buffer w(weights.begin(), weights.end());
    return tape.record({}, {total}, {a},
                       [a, w = std::move(w)](std::span<const double> g, std::span<const double>) mutable {
                           auto ga = a.grad_accumulator();
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * w[i];
                       });
}

Tensor concat(Tape& tape, std::initializer_list<Tensor> parts, std::size_t axis) {
    std::vector<Tensor> v(parts);
    return concat(tape, std::span<const Tensor>(v), axis);
}

Tensor concat(Tape& tape, std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    Shape shape = parts[0].shape();
    if (axis >= shape.size()) {
        throw DimensionError("concat: axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
    }
    std::size_t total = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        bool ok = s.size() == shape.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == shape[i];
        if (!ok) {
            throw DimensionError("concat: incompatible shapes " + shape_str(shape) + " and " +
                                 shape_str(s) + " along axis " + std::to_string(axis));
        }
        total += s[axis];
    }
    shape[axis] = total;
    const auto split = split_at(shape, axis);
    Buffer out(shape_numel(shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t block = p.shape()[axis] * split.inner;
        const auto src = p.data();
        for (std::size_t o = 0; o < split.outer; ++o) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                        out.begin() + static_cast<std::ptrdiff_t>(o * total * split.inner + offset));
        }
        offset += block;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return tape.record(
        shape, std::move(out), inputs,
        [inputs, offsets, split, total, axis](std::span<const double> g, std::span<const double>) mutable {
            for (std::size_t k = 0; k < inputs.size(); ++k) {
                auto& p = inputs[k];
                if (!p.requires_grad()) continue;
                auto gp = p.grad_accumulator();
                const std::size_t block = p.shape()[axis] * split.inner;
                for (std::size_t o = 0; o < split.outer; ++o) {
                    const double* src = g.data() + o * total * split.inner + offsets[k];
                    double* dst = gp.data() + o * block;
                    for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                }
            }
        });
}

Tensor slice(Tape& tape, const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    Shape shape = a.shape();
    if (axis >= shape.size() || begin > end || end > shape[axis]) {
        throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") on axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
    }
    const auto split = split_at(shape, axis);
    const std::size_t full = shape[axis] * split.inner;
    const std::size_t block = (end - begin) * split.inner;
    const std::size_t start = begin * split.inner;
    shape[axis] = end - begin;
    Buffer out(split.outer * block);
    const auto src = a.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * full + start), block,
                    out.begin() + static_cast<std::ptrdiff_t>(o * block));
    }
    return tape.record(shape, std::move(out), {a},
                       [a, split, full, block, start](std::span<const double> g,
                                                      std::span<const double>) mutable {
                           auto ga = a.grad_accumulator();
                           for (std::size_t o = 0; o < split.outer; ++o) {
                               for (std::size_t i = 0; i < block; ++i) {
                                   ga[o * full + start + i] += g[o * block + i];
                               }
                           }
                       });
}

Tensor gather_rows(Tape& tape, const Tensor& a, std::span<const std::size_t> rows) {
    require_matrix(a, "gather_rows");
    const auto n = a.cols();
    Buffer out(rows.size() * n);
    const auto src = a.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= a.rows()) {
            throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                                 shape_str(a.shape()));
        }
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                    out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return tape.record({rows.size(), n}, std::move(out), {a},
                       [a, idx, n](std::span<const double> g, std::span<const double>) mutable {
                           auto ga = a.grad_accumulator();
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                               for (std::size_t c = 0; c < n; ++c) ga[idx[i] * n + c] += g[i * n + c];
                           }
                       });
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Buffer out(a.data().begin(), a.data().end());
    return tape.record(std::move(shape), std::move(out), {a},
                       [a](std::span<const double> g, std::span<const double>) mutable {
                           auto ga = a.grad_accumulator();
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       });
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
    if (input.rank() != 3 || weight.rank() != 4) {
        throw DimensionError("conv2d: expected [C x H x W] input and [O x C x k x k] weight, got " +
                             shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    }
    const auto channels = input.dim(0), height = input.dim(1), width = input.dim(2);
    const auto out_ch = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != channels || weight.dim(3) != k || bias.numel() != out_ch) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " / bias " +
                             shape_str(bias.shape()) + " incompatible with input " +
                             shape_str(input.shape()));
    }
    if (stride == 0 || height + 2 * padding < k || width + 2 * padding < k) {
        throw DimensionError("conv2d: kernel larger than padded input");
    }
    const auto oh = (height + 2 * padding - k) / stride + 1;
    const auto ow = (width + 2 * padding - k) / stride + 1;
    const auto patch = channels * k * k;
    const auto positions = oh * ow;

    // im2col: one column per output position.
    auto cols = std::make_shared<Buffer>(patch * positions, 0.0);
    const auto src = input.data();
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = cols->data() + ((c * k + ky) * k + kx) * positions;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
                        row[oy * ow + ox] = src[(c * height + static_cast<std::size_t>(iy)) * width +
                                                static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
    Buffer out(out_ch * positions);
    auto om = as_matrix(std::span<double>(out), out_ch, positions);
    om.noalias() = as_matrix(weight.data(), out_ch, patch) *
                   as_matrix(std::span<const double>(*cols), patch, positions);
    const auto bv = bias.data();
    for (std::size_t o = 0; o < out_ch; ++o) om.row(static_cast<Eigen::Index>(o)).array() += bv[o];

    return tape.record(
        {out_ch, oh, ow}, std::move(out), {input, weight, bias},
        [=](std::span<const double> g, std::span<const double>) mutable {
            const auto gm = as_matrix(g, out_ch, positions);
            const auto cm = as_matrix(std::span<const double>(*cols), patch, positions);
            if (weight.requires_grad()) {
                as_matrix(weight.grad_accumulator(), out_ch, patch).noalias() += gm * cm.transpose();
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad_accumulator();
                for (std::size_t o = 0; o < out_ch; ++o) gb[o] += gm.row(static_cast<Eigen::Index>(o)).sum();
            }
            if (input.requires_grad()) {
                RowMat dcols = as_matrix(weight.data(), out_ch, patch).transpose() * gm;
                auto gi = input.grad_accumulator();
                for (std::size_t c = 0; c < channels; ++c) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const double* row = dcols.data() + ((c * k + ky) * k + kx) * positions;
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                    static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
                                    gi[(c * height + static_cast<std::size_t>(iy)) * width +
                                       static_cast<std::size_t>(ix)] += row[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace ptse
