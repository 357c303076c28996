#include "ucam/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "ucam/error.hpp"

namespace ucam {

namespace {
thread_local bool t_grad_enabled = true;
thread_local bool t_finite_check = false;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
std::vector<T>& Node<T>::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    std::vector<T> v(shape_numel(shape), value);
    return from(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
    return from(Shape{}, std::vector<T>{value});
}

template <typename T>
Node<T>& Tensor<T>::node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
    return node().shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
    return node().value.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
    return node().value;
}

template <typename T>
std::span<T> Tensor<T>::data_mut() {
    return node().value;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node().value[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
    return node().requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
    if (!node().leaf) throw ContractError("set_requires_grad on non-leaf tensor produced by " + std::string(node().op));
    node().requires_grad = on;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
    return node().leaf;
}

template <typename T>
const char* Tensor<T>::op_name() const {
    return node().op;
}

template <typename T>
bool Tensor<T>::has_grad() const {
    return !node().grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    return node().grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    node().grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return from(shape(), node().value, requires_grad());
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from(shape(), node().value, false);
}

template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                  BackwardFn<T> fn) {
    if (shape_numel(shape) != value.size()) {
        throw ShapeError(std::string(name) + ": output shape " + shape_str(shape) + " does not match " +
                         std::to_string(value.size()) + " values");
    }
    if (t_finite_check) {
        for (const T& v : value) {
            if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by op '") + name + "'");
        }
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = name;
    bool tracked = false;
    if (t_grad_enabled) {
        for (const auto& in : inputs) tracked = tracked || (in.defined() && in.requires_grad());
    }
    if (tracked) {
        node->requires_grad = true;
        node->leaf = false;
        node->inputs.reserve(inputs.size());
        for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
        node->backward_fn = std::move(fn);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
void backward(const Tensor<T>& loss) {
    Node<T>& root = loss.node();
    if (root.value.size() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_str(root.shape));
    if (root.backward_done) throw ContractError("backward called twice on the same loss");
    if (!root.requires_grad) throw ContractError("loss does not depend on any tracked tensor");

    // Iterative post-order DFS gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root, 0}};
    seen.insert(&root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node<T>* n : order) {
        if (n->leaf && !n->grad.empty()) {
            throw ContractError("tracked leaf of shape " + shape_str(n->shape) +
                                " already holds a gradient; call zero_grad() before the next backward");
        }
    }

    for (Node<T>* n : order) {
        if (!n->leaf) n->grad.clear();
    }
    root.grad_buffer()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->leaf) continue;
        n->grad_buffer();
        if (n->backward_fn) n->backward_fn(*n);
        for (auto& in : n->inputs) {
            if (in && in->requires_grad) in->grad_buffer();
        }
    }

    // Release the graph; leaves keep their gradients.
    for (Node<T>* n : order) {
        if (n->leaf) continue;
        n->backward_fn = nullptr;
        n->inputs.clear();
    }
    root.backward_done = true;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

FiniteCheckGuard::FiniteCheckGuard() : previous_(t_finite_check) { t_finite_check = true; }
FiniteCheckGuard::~FiniteCheckGuard() { t_finite_check = previous_; }

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_op(const char*, Shape, std::vector<float>, const std::vector<Tensor<float>>&,
                               BackwardFn<float>);
template Tensor<double> make_op(const char*, Shape, std::vector<double>, const std::vector<Tensor<double>>&,
                                BackwardFn<double>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace ucam
