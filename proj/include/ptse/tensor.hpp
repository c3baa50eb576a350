#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace ptse {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorized kernels peel loops according to the
/// address of the data, so buffers with the same alignment give results that
/// do not depend on where the heap placed them.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float64 array that can take part in a gradient tape.
///
/// A Tensor is a shared handle: copies refer to the same storage, so a layer
/// holding a parameter and the optimizer updating it see the same values.
/// Use clone() for an independent deep copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, Buffer data, bool requires_grad = false);
    Tensor(Shape shape, std::initializer_list<double> data, bool requires_grad = false);
    Tensor(Shape shape, const std::vector<double>& data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t rows() const;
    std::size_t cols() const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool value);

    bool has_grad() const;
    std::span<const double> grad() const;
    /// Gradient buffer for accumulation, zero-filled on first access.
    std::span<double> grad_accumulator() const;
    void zero_grad() const;

    /// Index of the tape entry that produced this tensor, -1 for leaves.
    std::int64_t node_id() const;

    Tensor clone() const;
    Tensor detach() const { return clone(); }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    friend class Tape;

    struct Node {
        Shape shape;
        Buffer data;
        Buffer grad;
        bool requires_grad = false;
        std::int64_t node_id = -1;
    };

    std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Entries are appended in execution order, so the list is already
/// topologically sorted. backward() replays it in reverse.
class Tape {
public:
    /// Receives d(loss)/d(output) and the output value; accumulates into the
    /// gradients of whichever captured inputs require them.
    using BackwardRule =
        std::function<void(std::span<const double> grad_out, std::span<const double> out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Wraps a freshly computed value. The entry is only recorded when some
    /// input requires a gradient; otherwise a constant tensor is returned.
    Tensor record(Shape shape, Buffer data, std::initializer_list<Tensor> inputs,
                  BackwardRule rule);
    Tensor record(Shape shape, Buffer data, std::vector<Tensor> inputs,
                  BackwardRule rule);

    /// Populates d(loss)/d(leaf) on every requires_grad leaf reachable from
    /// loss. Leaf gradients accumulate across calls until zero_grad().
    void backward(const Tensor& loss);

    void clear() { entries_.clear(); }
    std::size_t size() const { return entries_.size(); }
    std::span<const Tensor> inputs_of(std::size_t entry) const { return entries_.at(entry).inputs; }

private:
    struct Entry {
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardRule rule;
    };

    std::vector<Entry> entries_;
};

}  // namespace ptse
