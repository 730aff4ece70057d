#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssem/kernels.hpp"
#include "ssem/tensor.hpp"

// Minimal reverse-mode differentiation over BasicTensor. A Graph records
// nodes in creation order, which is also a topological order, so backward()
// is a single reverse sweep.
namespace ssem::nd {

using kernels::Padding;

template <class T>
class Graph;

template <class T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph<T>& graph() const { return *graph_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return graph_ != nullptr; }
    const BasicTensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

template <class T>
class VjpContext {
public:
    const BasicTensor<T>& upstream() const { return *upstream_; }
    const BasicTensor<T>& input(std::size_t i) const;
    const BasicTensor<T>& output() const;
    bool needs(std::size_t i) const;
    void accumulate(std::size_t i, BasicTensor<T> contribution);

private:
    friend class Graph<T>;
    VjpContext(Graph<T>& graph, std::size_t node, const BasicTensor<T>& upstream,
               std::vector<std::optional<BasicTensor<T>>>& grads)
        : graph_(graph), node_(node), upstream_(&upstream), grads_(grads) {}

    Graph<T>& graph_;
    std::size_t node_;
    const BasicTensor<T>* upstream_;
    std::vector<std::optional<BasicTensor<T>>>& grads_;
};

template <class T>
class Graph {
public:
    using TensorT = BasicTensor<T>;
    using VjpFn = std::function<void(VjpContext<T>&)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // A differentiable input.
    Var<T> leaf(TensorT value);
    // A fixed input; no gradient flows into it.
    Var<T> constant(TensorT value);
    // Adds an op node. The output must be finite. vjp may be empty for ops
    // that are constant in all inputs.
    Var<T> record(std::string kind, std::vector<Var<T>> inputs, TensorT output, VjpFn vjp);

    const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
    const std::string& kind(std::size_t id) const { return nodes_.at(id).kind; }
    bool requires_grad(const Var<T>& v) const { return nodes_.at(v.id()).requires_grad; }
    std::size_t node_count() const noexcept { return nodes_.size(); }

    // Gradients of a scalar loss w.r.t. each leaf, in the order given. A leaf
    // the loss does not depend on receives zeros.
    std::vector<TensorT> backward(const Var<T>& loss, std::span<const Var<T>> wrt);

private:
    friend class VjpContext<T>;

    struct Node {
        std::string kind;
        std::vector<std::size_t> inputs;
        TensorT value;
        bool requires_grad = false;
        bool is_leaf = false;
        VjpFn vjp;
    };

    void check_owned(const Var<T>& v, const char* what) const;

    std::vector<Node> nodes_;
};

template <class T>
const BasicTensor<T>& Var<T>::value() const {
    return graph_->value(id_);
}

// Constant from a float32 tensor, converted to the graph's scalar type.
template <class T>
Var<T> lift(Graph<T>& g, const Tensor& t) {
    if constexpr (std::is_same_v<T, float>) return g.constant(t);
    else return g.constant(t.template cast<T>());
}

// ---- primitives -----------------------------------------------------------

template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernels, std::int64_t stride, Padding padding);

// Linear adjoint of conv2d with the same kernels/stride/padding. The output
// extents default to input*stride for "same" and (input-1)*stride+k for "valid".
template <class T>
Var<T> transposed_conv2d(const Var<T>& input, const Var<T>& kernels, std::int64_t stride, Padding padding,
                         std::optional<std::pair<std::int64_t, std::int64_t>> output_extents = std::nullopt);

template <class T>
Var<T> relu(const Var<T>& x);

template <class T>
Var<T> grid_sample(const Var<T>& image, const Var<T>& coords);

template <class T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t out_h, std::int64_t out_w);

// (row differences, column differences) of a [H,W] field.
template <class T>
std::pair<Var<T>, Var<T>> spatial_gradient(const Var<T>& field);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& a, T factor);
template <class T>
Var<T> add_scalar(const Var<T>& a, T offset);
// Σ x², accumulated in 64-bit; returns a rank-0 scalar.
template <class T>
Var<T> sum_sq(const Var<T>& a);
template <class T>
Var<T> sum(const Var<T>& a);
// Reduce one axis by summation.
template <class T>
Var<T> sum_axis(const Var<T>& a, std::size_t axis);

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape);
template <class T>
Var<T> permute(const Var<T>& a, std::vector<std::size_t> order);
// Index along the leading axis.
template <class T>
Var<T> take(const Var<T>& a, std::int64_t index);
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

// Raw tensor permutation, shared with non-graph code.
template <class T>
BasicTensor<T> permuted(const BasicTensor<T>& t, const std::vector<std::size_t>& order);

} // namespace ssem::nd
