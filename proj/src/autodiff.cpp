#include "uda/autodiff.hpp"

#include <cmath>
#include <unordered_set>

namespace uda::ad {

template <class T>
T Var<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->value.data[0];
}

template <class T>
Var<T> constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var<T>(std::move(n));
}

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var<T>(std::move(n));
}

template <class T>
Var<T> detach(const Var<T>& x) {
    return constant(x.value());
}

template <class T>
bool any_requires_grad(const std::vector<Var<T>>& inputs) {
    for (const auto& v : inputs) {
        if (v.requires_grad()) return true;
    }
    return false;
}

template <class T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs, std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->is_leaf = false;
    if (any_requires_grad(inputs)) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (const auto& v : inputs) n->inputs.push_back(v.node());
        n->backward_fn = std::move(backward);
    }
    return Var<T>(std::move(n));
}

template <class T>
void backward(const Var<T>& root) {
    if (root.numel() != 1) throw ShapeError("backward() requires a scalar root");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->is_leaf || !n->has_grad()) continue;
        if (n->backward_fn) n->backward_fn(*n);
        if (n != root.node().get()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

template <class T>
Parameter<T>::Parameter(std::string name, Tensor<T> init) : name_(std::move(name)), node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(init);
    node_->requires_grad = true;
}

template <class T>
Var<T> Parameter<T>::var(bool trainable) const {
    if (trainable) return Var<T>(node_);
    return constant(node_->value);
}

namespace {

template <class T, class F, class DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
    const auto& xv = x.value();
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i) out.data[i] = f(xv.data[i]);
    return make_result<T>(std::move(out), {x}, [df](Node<T>& self) {
        auto& in = *self.inputs[0];
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * df(in.value.data[i], self.value.data[i]);
        }
    });
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (self.inputs[0]->requires_grad) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
            auto& g = self.inputs[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        if (na.requires_grad) {
            auto& g = na.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value.data[i];
        }
        if (nb.requires_grad) {
            auto& g = nb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value.data[i];
        }
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
    return unary(a, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, T s) {
    return unary(a, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> exp(const Var<T>& x) {
    return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& x) {
    return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Var<T> abs(const Var<T>& x) {
    return unary(
        x, [](T v) { return std::abs(v); }, [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Var<T> square(const Var<T>& x) {
    return unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    return unary(
        x,
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    return unary(
        x, [slope](T v) { return v > T(0) ? v : slope * v; }, [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
    return unary(
        x, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](T v, T) { return (v < lo || v > hi) ? T(0) : T(1); });
}

template <class T>
Var<T> sum(const Var<T>& x) {
    T s = T(0);
    for (T v : x.value().data) s += v;
    return make_result<T>(Tensor<T>({1}, s), {x}, [](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const T d = self.grad[0];
        for (auto& gi : g) gi += d;
    });
}

template <class T>
Var<T> mean(const Var<T>& x) {
    return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    Tensor<T> out(std::move(shape), x.value().data);
    return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
    if (terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights length mismatch");
    T s = T(0);
    for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].item();
    return make_result<T>(Tensor<T>({1}, s), terms, [weights](Node<T>& self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
            if (!self.inputs[i]->requires_grad) continue;
            self.inputs[i]->ensure_grad()[0] += weights[i] * self.grad[0];
        }
    });
}

#define UDA_INSTANTIATE_AD(T)                                                                             \
    template class Var<T>;                                                                                \
    template class Parameter<T>;                                                                          \
    template Var<T> constant<T>(Tensor<T>);                                                               \
    template Var<T> leaf<T>(Tensor<T>, bool);                                                             \
    template Var<T> detach<T>(const Var<T>&);                                                             \
    template bool any_requires_grad<T>(const std::vector<Var<T>>&);                                       \
    template Var<T> make_result<T>(Tensor<T>, const std::vector<Var<T>>&, std::function<void(Node<T>&)>); \
    template void backward<T>(const Var<T>&);                                                             \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                 \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                 \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                 \
    template Var<T> add_scalar<T>(const Var<T>&, T);                                                      \
    template Var<T> mul_scalar<T>(const Var<T>&, T);                                                      \
    template Var<T> exp<T>(const Var<T>&);                                                                \
    template Var<T> log<T>(const Var<T>&);                                                                \
    template Var<T> abs<T>(const Var<T>&);                                                                \
    template Var<T> square<T>(const Var<T>&);                                                             \
    template Var<T> sigmoid<T>(const Var<T>&);                                                            \
    template Var<T> relu<T>(const Var<T>&);                                                               \
    template Var<T> leaky_relu<T>(const Var<T>&, T);                                                      \
    template Var<T> clamp<T>(const Var<T>&, T, T);                                                        \
    template Var<T> sum<T>(const Var<T>&);                                                                \
    template Var<T> mean<T>(const Var<T>&);                                                               \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                                     \
    template Var<T> weighted_sum<T>(const std::vector<Var<T>>&, const std::vector<T>&);

UDA_INSTANTIATE_AD(float)
UDA_INSTANTIATE_AD(double)

}  // namespace uda::ad
