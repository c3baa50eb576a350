#include "ptse/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "ptse/errors.hpp"

namespace ptse {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, std::initializer_list<double> data, bool requires_grad)
    : Tensor(std::move(shape), Buffer(data), requires_grad) {}

Tensor::Tensor(Shape shape, const std::vector<double>& data, bool requires_grad)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad) {}

Tensor::Tensor(Shape shape, Buffer data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Buffer data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    return s[axis];
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape()));
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape()));
    return node_->shape[1];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    return node_->data.at(row * cols() + col);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    if (!node_) throw ContractError("use of undefined tensor");
    node_->requires_grad = value;
    if (!value) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->grad;
}

std::span<double> Tensor::grad_accumulator() const {
    if (!requires_grad()) throw ContractError("gradient requested on a tensor without requires_grad");
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() const {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

std::int64_t Tensor::node_id() const { return node_ ? node_->node_id : -1; }

Tensor Tensor::clone() const {
    return Tensor(shape(), node_->data, node_->requires_grad);
}

Tensor Tape::record(Shape shape, Buffer data, std::initializer_list<Tensor> inputs,
                    BackwardRule rule) {
    return record(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(rule));
}

Tensor Tape::record(Shape shape, Buffer data, std::vector<Tensor> inputs,
                    BackwardRule rule) {
    const bool needs_grad =
        std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    Tensor out(std::move(shape), std::move(data), needs_grad);
    if (!needs_grad) return out;
    out.node_->node_id = static_cast<std::int64_t>(entries_.size());
    entries_.push_back(Entry{std::move(inputs), out, std::move(rule)});
    return out;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    const auto id = loss.node_id();
    if (id < 0 || static_cast<std::size_t>(id) >= entries_.size() ||
        !entries_[static_cast<std::size_t>(id)].output.same_node(loss)) {
        throw ContractError("backward() on a loss that was not recorded on this tape");
    }
    const auto last = static_cast<std::size_t>(id);
    // Intermediate gradients restart from zero on every call; only leaves accumulate.
    for (std::size_t i = 0; i <= last; ++i) {
        auto& g = entries_[i].output.node_->grad;
        g.assign(entries_[i].output.node_->data.size(), 0.0);
    }
    entries_[last].output.node_->grad[0] = 1.0;
    for (std::size_t i = last + 1; i-- > 0;) {
        auto& entry = entries_[i];
        entry.rule(entry.output.node_->grad, entry.output.node_->data);
    }
}

}  // namespace ptse
