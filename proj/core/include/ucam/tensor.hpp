#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ucam {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node;

template <typename T>
using BackwardFn = std::function<void(Node<T>& out)>;

// One vertex of the reverse-mode graph. Leaves own parameters and inputs;
// interior nodes remember their inputs and how to push a gradient back to
// them. Custom operations are written against this struct through make_op().
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient reaches the node
    bool requires_grad = false;
    bool leaf = true;
    bool backward_done = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn<T> backward_fn;

    // Gradient accumulator, zero-initialised on first use.
    std::vector<T>& grad_buffer();

    bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

/// Dense row-major array with an optional gradient slot. Copies are shallow:
/// two Tensor handles copied from each other refer to the same storage and
/// the same graph node. Use clone() for an independent copy.
template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const T> data() const;
    std::span<T> data_mut();
    T operator[](std::size_t i) const { return data()[i]; }
    T item() const;

    bool requires_grad() const;
    // Only leaves may change their tracking flag.
    void set_requires_grad(bool on);
    bool is_leaf() const;
    const char* op_name() const;

    bool has_grad() const;
    std::span<const T> grad() const;
    void zero_grad();

    // Independent leaf with the same values; tracking flag is kept.
    Tensor clone() const;
    // Leaf with the same values that is never tracked.
    Tensor detach() const;

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(numel());
        auto in = data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(in[i]);
        return Tensor<U>::from(shape(), std::move(out), requires_grad());
    }

    Node<T>& node() const;
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  private:
    std::shared_ptr<Node<T>> node_;
};

/// Records an operation result. The result is tracked (and keeps fn plus
/// its inputs alive) only if gradients are enabled and some input is tracked.
template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                  BackwardFn<T> fn);

/// Reverse sweep from a scalar loss. Every tracked leaf reachable from the
/// loss ends up with a populated gradient. A leaf that still carries a
/// gradient from an earlier sweep is a ContractError: call zero_grad() first.
/// The graph behind the loss is released afterwards.
template <typename T>
void backward(const Tensor<T>& loss);

// Disables graph recording on this thread while alive.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_enabled();

// While alive, every recorded operation checks its output for NaN/Inf and
// throws NumericError naming the operation.
class FiniteCheckGuard {
  public:
    FiniteCheckGuard();
    ~FiniteCheckGuard();
    FiniteCheckGuard(const FiniteCheckGuard&) = delete;
    FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

  private:
    bool previous_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace ucam
