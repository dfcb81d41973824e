#pragma once

// Minimal tape-free reverse-mode differentiation over dense tensors.
//
// Every op returns a Var whose node keeps shared ownership of its inputs and a
// closure that pushes the node's gradient into them. Nodes whose inputs carry
// no gradient skip the closure entirely, so frozen sub-graphs cost a forward
// pass only.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "uda/tensor.hpp"

namespace uda::ad {

template <class T>
struct Node {
    Tensor<T> value;
    Buffer<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    Buffer<T>& ensure_grad() {
        if (grad.empty()) grad.assign(value.numel(), T(0));
        return grad;
    }
    [[nodiscard]] bool has_grad() const { return !grad.empty(); }
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    [[nodiscard]] const Tensor<T>& value() const { return node_->value; }
    [[nodiscard]] const Shape& shape() const { return node_->value.shape; }
    [[nodiscard]] std::size_t numel() const { return node_->value.numel(); }
    [[nodiscard]] int dim(int i) const { return node_->value.dim(i); }
    [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
    [[nodiscard]] const Buffer<T>& grad() const { return node_->grad; }
    [[nodiscard]] T item() const;
    [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
    [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value);

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true);

// Same value, cut from the graph.
template <class T>
Var<T> detach(const Var<T>& x);

// Creates an op result. `backward` runs only when at least one input requires
// grad; it reads `self.grad` and accumulates into `self.inputs[i]->ensure_grad()`
// for inputs with requires_grad set.
template <class T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs, std::function<void(Node<T>&)> backward);

template <class T>
bool any_requires_grad(const std::vector<Var<T>>& inputs);

// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
// Intermediate gradients are released once consumed; leaf gradients accumulate.
template <class T>
void backward(const Var<T>& root);

/// Trainable tensor owned by a network component.
template <class T>
class Parameter {
public:
    Parameter() = default;
    Parameter(std::string name, Tensor<T> init);

    [[nodiscard]] const std::string& name() const { return name_; }
    // Graph handle. Frozen use yields a constant copy so that gradients still
    // flow through the activations but never accumulate here.
    [[nodiscard]] Var<T> var(bool trainable) const;

    Tensor<T>& value() { return node_->value; }
    [[nodiscard]] const Tensor<T>& value() const { return node_->value; }
    Buffer<T>& grad() { return node_->ensure_grad(); }
    [[nodiscard]] bool has_grad() const { return node_->has_grad(); }
    void zero_grad() { node_->grad.clear(); }
    [[nodiscard]] std::size_t numel() const { return node_->value.numel(); }

private:
    std::string name_;
    std::shared_ptr<Node<T>> node_;
};

// ---- elementwise -------------------------------------------------------------
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> add_scalar(const Var<T>& a, T s);
template <class T>
Var<T> mul_scalar(const Var<T>& a, T s);
template <class T>
Var<T> exp(const Var<T>& x);
template <class T>
Var<T> log(const Var<T>& x);
template <class T>
Var<T> abs(const Var<T>& x);
template <class T>
Var<T> square(const Var<T>& x);
template <class T>
Var<T> sigmoid(const Var<T>& x);
template <class T>
Var<T> relu(const Var<T>& x);
template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope);
// Gradient is zero where the input lies outside [lo, hi].
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi);

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
    return add(a, b);
}
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
    return sub(a, b);
}
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
    return mul(a, b);
}
template <class T>
Var<T> operator*(T s, const Var<T>& a) {
    return mul_scalar(a, s);
}

// ---- reductions / reshaping --------------------------------------------------
template <class T>
Var<T> sum(const Var<T>& x);
template <class T>
Var<T> mean(const Var<T>& x);
template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);
// Weighted sum of scalar Vars; the weights are constants.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights);

// ---- image ops (NCHW) --------------------------------------------------------
struct ConvSpec {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
};

// w: (C_out, C_in, k, k); bias may be undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, ConvSpec spec);

// w: (C_in, C_out, k, k). Output size (H-1)*stride - 2*pad + k.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad);

// Per-sample, per-channel normalization with per-channel affine (gamma, beta of shape (C)).
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// Bilinear, half-pixel centers.
template <class T>
Var<T> upsample_bilinear(const Var<T>& x, int factor);

// Softmax over the channel axis of an NCHW tensor.
template <class T>
Var<T> softmax_channels(const Var<T>& x);

// (N, C, H, W) -> (N, C)
template <class T>
Var<T> global_avg_pool(const Var<T>& x);

// x: (N, in), w: (out, in), bias: (out) -> (N, out)
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

}  // namespace uda::ad
