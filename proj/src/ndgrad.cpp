#include "ssem/ndgrad.hpp"

#include <algorithm>

namespace ssem::nd {

// ---- VjpContext -----------------------------------------------------------

template <class T>
const BasicTensor<T>& VjpContext<T>::input(std::size_t i) const {
    return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].value;
}

template <class T>
const BasicTensor<T>& VjpContext<T>::output() const {
    return graph_.nodes_[node_].value;
}

template <class T>
bool VjpContext<T>::needs(std::size_t i) const {
    return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].requires_grad;
}

template <class T>
void VjpContext<T>::accumulate(std::size_t i, BasicTensor<T> contribution) {
    const std::size_t target = graph_.nodes_[node_].inputs.at(i);
    const auto& expected = graph_.nodes_[target].value.shape();
    if (contribution.shape() != expected) {
        throw ShapeError("vjp of '" + graph_.nodes_[node_].kind + "' produced gradient " +
                         shape_string(contribution.shape()) + " for input of shape " + shape_string(expected));
    }
    auto& slot = grads_[target];
    if (!slot) {
        slot = std::move(contribution);
        return;
    }
    auto dst = slot->data();
    auto src = contribution.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
}

// ---- Graph ----------------------------------------------------------------

template <class T>
Var<T> Graph<T>::leaf(TensorT value) {
    if (!value.all_finite()) throw NonFiniteError("leaf tensor contains non-finite values");
    nodes_.push_back(Node{"leaf", {}, std::move(value), true, true, {}});
    return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Graph<T>::constant(TensorT value) {
    if (!value.all_finite()) throw NonFiniteError("constant tensor contains non-finite values");
    nodes_.push_back(Node{"constant", {}, std::move(value), false, true, {}});
    return Var<T>(this, nodes_.size() - 1);
}

template <class T>
void Graph<T>::check_owned(const Var<T>& v, const char* what) const {
    if (!v.valid() || &v.graph() != this || v.id() >= nodes_.size()) {
        throw Error(std::string(what) + ": variable does not belong to this graph");
    }
}

template <class T>
Var<T> Graph<T>::record(std::string kind, std::vector<Var<T>> inputs, TensorT output, VjpFn vjp) {
    if (!output.all_finite()) throw NonFiniteError("op '" + kind + "' produced non-finite values");
    Node node;
    node.kind = std::move(kind);
    for (const auto& in : inputs) {
        check_owned(in, node.kind.c_str());
        node.inputs.push_back(in.id());
        node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    node.value = std::move(output);
    node.vjp = std::move(vjp);
    if (!node.vjp) node.requires_grad = false;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <class T>
std::vector<BasicTensor<T>> Graph<T>::backward(const Var<T>& loss, std::span<const Var<T>> wrt) {
    check_owned(loss, "backward");
    const auto& loss_value = nodes_[loss.id()].value;
    if (loss_value.size() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + shape_string(loss_value.shape()));
    }
    for (const auto& w : wrt) {
        check_owned(w, "backward");
        if (!nodes_[w.id()].is_leaf || !nodes_[w.id()].requires_grad) {
            throw Error("backward: requested gradient for node " + std::to_string(w.id()) +
                        " which is not a differentiable leaf");
        }
    }

    std::vector<std::optional<TensorT>> grads(nodes_.size());
    grads[loss.id()] = TensorT(loss_value.shape(), T{1});
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node& node = nodes_[id];
        if (!grads[id] || !node.requires_grad || node.is_leaf || !node.vjp) continue;
        VjpContext<T> ctx(*this, id, *grads[id], grads);
        node.vjp(ctx);
        // Intermediate gradients are not needed once propagated.
        grads[id].reset();
    }

    std::vector<TensorT> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        if (grads[w.id()]) out.push_back(*grads[w.id()]);
        else out.emplace_back(nodes_[w.id()].value.shape());
    }
    return out;
}

// ---- helpers --------------------------------------------------------------

namespace {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

template <class T>
BasicTensor<T> elementwise(const BasicTensor<T>& a, const BasicTensor<T>& b, auto fn) {
    BasicTensor<T> out(a.shape());
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fn(x[i], y[i]);
    return out;
}

template <class T>
BasicTensor<T> mapped(const BasicTensor<T>& a, auto fn) {
    BasicTensor<T> out(a.shape());
    auto o = out.data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fn(x[i]);
    return out;
}

} // namespace

// ---- primitives -----------------------------------------------------------

template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernels, std::int64_t stride, Padding padding) {
    auto out = kernels::conv2d_forward(input.value(), kernels.value(), stride, padding);
    return input.graph().record(
        "conv2d", {input, kernels}, std::move(out), [stride, padding](VjpContext<T>& ctx) {
            const auto& x = ctx.input(0);
            const auto& k = ctx.input(1);
            if (ctx.needs(0)) {
                ctx.accumulate(0, kernels::conv2d_input_grad(ctx.upstream(), k, stride, padding, x.dim(2),
                                                             x.dim(3)));
            }
            if (ctx.needs(1)) {
                ctx.accumulate(1, kernels::conv2d_kernel_grad(x, ctx.upstream(), k.dim(2), k.dim(3), stride,
                                                              padding));
            }
        });
}

template <class T>
Var<T> transposed_conv2d(const Var<T>& input, const Var<T>& kernels, std::int64_t stride, Padding padding,
                         std::optional<std::pair<std::int64_t, std::int64_t>> output_extents) {
    const auto& x = input.value();
    const auto& k = kernels.value();
    if (x.rank() != 4 || k.rank() != 4) throw ShapeError("transposed_conv2d expects rank-4 input and kernels");
    std::int64_t out_h = 0, out_w = 0;
    if (output_extents) {
        std::tie(out_h, out_w) = *output_extents;
    } else if (padding == Padding::same) {
        out_h = x.dim(2) * stride;
        out_w = x.dim(3) * stride;
    } else {
        out_h = (x.dim(2) - 1) * stride + k.dim(2);
        out_w = (x.dim(3) - 1) * stride + k.dim(3);
    }
    auto out = kernels::conv2d_input_grad(x, k, stride, padding, out_h, out_w);
    return input.graph().record(
        "transposed_conv2d", {input, kernels}, std::move(out), [stride, padding](VjpContext<T>& ctx) {
            const auto& x = ctx.input(0);
            const auto& k = ctx.input(1);
            if (ctx.needs(0)) ctx.accumulate(0, kernels::conv2d_forward(ctx.upstream(), k, stride, padding));
            if (ctx.needs(1)) {
                // The transposed op's output plays the role of conv2d's input.
                ctx.accumulate(1, kernels::conv2d_kernel_grad(ctx.upstream(), x, k.dim(2), k.dim(3), stride,
                                                              padding));
            }
        });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    auto out = mapped(x.value(), [](T v) { return v > T{0} ? v : T{0}; });
    return x.graph().record("relu", {x}, std::move(out), [](VjpContext<T>& ctx) {
        ctx.accumulate(0, elementwise(ctx.upstream(), ctx.input(0),
                                      [](T g, T v) { return v > T{0} ? g : T{0}; }));
    });
}

template <class T>
Var<T> grid_sample(const Var<T>& image, const Var<T>& coords) {
    auto out = kernels::grid_sample_forward(image.value(), coords.value());
    return image.graph().record("grid_sample", {image, coords}, std::move(out), [](VjpContext<T>& ctx) {
        BasicTensor<T> gi, gc;
        kernels::grid_sample_backward(ctx.input(0), ctx.input(1), ctx.upstream(), ctx.needs(0) ? &gi : nullptr,
                                      ctx.needs(1) ? &gc : nullptr);
        if (ctx.needs(0)) ctx.accumulate(0, std::move(gi));
        if (ctx.needs(1)) ctx.accumulate(1, std::move(gc));
    });
}

template <class T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t out_h, std::int64_t out_w) {
    auto out = kernels::resize_forward(x.value(), out_h, out_w);
    return x.graph().record("bilinear_resize", {x}, std::move(out), [](VjpContext<T>& ctx) {
        const auto& in = ctx.input(0);
        ctx.accumulate(0, kernels::resize_backward(ctx.upstream(), in.dim(1), in.dim(2)));
    });
}

template <class T>
std::pair<Var<T>, Var<T>> spatial_gradient(const Var<T>& field) {
    auto [d_rows, d_cols] = kernels::spatial_gradient_forward(field.value());
    auto& g = field.graph();
    auto rows = g.record("spatial_gradient_rows", {field}, std::move(d_rows), [](VjpContext<T>& ctx) {
        ctx.accumulate(0, kernels::spatial_gradient_backward(ctx.upstream(), BasicTensor<T>(ctx.upstream().shape())));
    });
    auto cols = g.record("spatial_gradient_cols", {field}, std::move(d_cols), [](VjpContext<T>& ctx) {
        ctx.accumulate(0, kernels::spatial_gradient_backward(BasicTensor<T>(ctx.upstream().shape()), ctx.upstream()));
    });
    return {rows, cols};
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "add");
    auto out = elementwise(a.value(), b.value(), [](T x, T y) { return x + y; });
    return a.graph().record("add", {a, b}, std::move(out), [](VjpContext<T>& ctx) {
        if (ctx.needs(0)) ctx.accumulate(0, ctx.upstream());
        if (ctx.needs(1)) ctx.accumulate(1, ctx.upstream());
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "sub");
    auto out = elementwise(a.value(), b.value(), [](T x, T y) { return x - y; });
    return a.graph().record("sub", {a, b}, std::move(out), [](VjpContext<T>& ctx) {
        if (ctx.needs(0)) ctx.accumulate(0, ctx.upstream());
        if (ctx.needs(1)) ctx.accumulate(1, mapped(ctx.upstream(), [](T g) { return -g; }));
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mul");
    auto out = elementwise(a.value(), b.value(), [](T x, T y) { return x * y; });
    return a.graph().record("mul", {a, b}, std::move(out), [](VjpContext<T>& ctx) {
        if (ctx.needs(0)) ctx.accumulate(0, elementwise(ctx.upstream(), ctx.input(1), [](T g, T y) { return g * y; }));
        if (ctx.needs(1)) ctx.accumulate(1, elementwise(ctx.upstream(), ctx.input(0), [](T g, T x) { return g * x; }));
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
    auto out = mapped(a.value(), [factor](T x) { return factor * x; });
    return a.graph().record("scale", {a}, std::move(out), [factor](VjpContext<T>& ctx) {
        ctx.accumulate(0, mapped(ctx.upstream(), [factor](T g) { return factor * g; }));
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T offset) {
    auto out = mapped(a.value(), [offset](T x) { return x + offset; });
    return a.graph().record("add_scalar", {a}, std::move(out),
                            [](VjpContext<T>& ctx) { ctx.accumulate(0, ctx.upstream()); });
}

template <class T>
Var<T> sum_sq(const Var<T>& a) {
    auto out = BasicTensor<T>::scalar(static_cast<T>(sum_squares(a.value())));
    return a.graph().record("sum_sq", {a}, std::move(out), [](VjpContext<T>& ctx) {
        const T g = ctx.upstream().item();
        ctx.accumulate(0, mapped(ctx.input(0), [g](T x) { return T{2} * g * x; }));
    });
}

template <class T>
Var<T> sum(const Var<T>& a) {
    double acc = 0.0;
    for (T v : a.value().data()) acc += static_cast<double>(v);
    auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
    return a.graph().record("sum", {a}, std::move(out), [](VjpContext<T>& ctx) {
        ctx.accumulate(0, BasicTensor<T>(ctx.input(0).shape(), ctx.upstream().item()));
    });
}

template <class T>
Var<T> sum_axis(const Var<T>& a, std::size_t axis) {
    const auto& in = a.value();
    if (axis >= in.rank()) throw ShapeError("sum_axis: axis out of range for " + shape_string(in.shape()));
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in.dim(i);
    for (std::size_t i = axis + 1; i < in.rank(); ++i) inner *= in.dim(i);
    const std::int64_t n = in.dim(axis);
    Shape out_shape = in.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));

    BasicTensor<T> out(out_shape);
    std::vector<double> acc(static_cast<std::size_t>(inner));
    for (std::int64_t o = 0; o < outer; ++o) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::int64_t k = 0; k < n; ++k) {
            const T* src = in.raw() + (o * n + k) * inner;
            for (std::int64_t i = 0; i < inner; ++i) acc[static_cast<std::size_t>(i)] += src[i];
        }
        for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] = static_cast<T>(acc[static_cast<std::size_t>(i)]);
    }
    return a.graph().record("sum_axis", {a}, std::move(out), [outer, inner, n](VjpContext<T>& ctx) {
        BasicTensor<T> g(ctx.input(0).shape());
        const auto& up = ctx.upstream();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t k = 0; k < n; ++k)
                for (std::int64_t i = 0; i < inner; ++i) g[(o * n + k) * inner + i] = up[o * inner + i];
        ctx.accumulate(0, std::move(g));
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    auto out = a.value().reshaped(std::move(shape));
    return a.graph().record("reshape", {a}, std::move(out), [](VjpContext<T>& ctx) {
        ctx.accumulate(0, ctx.upstream().reshaped(ctx.input(0).shape()));
    });
}

template <class T>
BasicTensor<T> permuted(const BasicTensor<T>& t, const std::vector<std::size_t>& order) {
    const std::size_t rank = t.rank();
    if (order.size() != rank) throw ShapeError("permute: order length does not match rank");
    std::vector<bool> seen(rank, false);
    for (auto o : order) {
        if (o >= rank || seen[o]) throw ShapeError("permute: invalid axis order");
        seen[o] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = t.dim(order[i]);
    std::vector<std::int64_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * t.dim(i);

    BasicTensor<T> out(out_shape);
    std::vector<std::int64_t> idx(rank, 0);
    for (std::int64_t flat = 0; flat < out.size(); ++flat) {
        std::int64_t src = 0;
        for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[order[i]];
        out[flat] = t[src];
        for (std::size_t i = rank; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

template <class T>
Var<T> permute(const Var<T>& a, std::vector<std::size_t> order) {
    auto out = permuted(a.value(), order);
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
    return a.graph().record("permute", {a}, std::move(out), [inverse](VjpContext<T>& ctx) {
        ctx.accumulate(0, permuted(ctx.upstream(), inverse));
    });
}

template <class T>
Var<T> take(const Var<T>& a, std::int64_t index) {
    const auto& in = a.value();
    if (in.rank() < 1 || index < 0 || index >= in.dim(0)) {
        throw ShapeError("take: index " + std::to_string(index) + " out of range for " + shape_string(in.shape()));
    }
    Shape out_shape(in.shape().begin() + 1, in.shape().end());
    const std::int64_t block = shape_size(out_shape);
    std::vector<T> data(in.raw() + index * block, in.raw() + (index + 1) * block);
    BasicTensor<T> out(out_shape, std::move(data));
    return a.graph().record("take", {a}, std::move(out), [index, block](VjpContext<T>& ctx) {
        BasicTensor<T> g(ctx.input(0).shape());
        std::copy(ctx.upstream().raw(), ctx.upstream().raw() + block, g.raw() + index * block);
        ctx.accumulate(0, std::move(g));
    });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    auto out = kernels::matmul(a.value(), b.value());
    return a.graph().record("matmul", {a, b}, std::move(out), [](VjpContext<T>& ctx) {
        if (ctx.needs(0)) ctx.accumulate(0, kernels::matmul(ctx.upstream(), ctx.input(1), false, true));
        if (ctx.needs(1)) ctx.accumulate(1, kernels::matmul(ctx.input(0), ctx.upstream(), true, false));
    });
}

#define SSEM_INSTANTIATE_GRAPH(T)                                                                        \
    template class VjpContext<T>;                                                                        \
    template class Graph<T>;                                                                             \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, std::int64_t, Padding);                         \
    template Var<T> transposed_conv2d(const Var<T>&, const Var<T>&, std::int64_t, Padding,               \
                                      std::optional<std::pair<std::int64_t, std::int64_t>>);             \
    template Var<T> relu(const Var<T>&);                                                                 \
    template Var<T> grid_sample(const Var<T>&, const Var<T>&);                                           \
    template Var<T> bilinear_resize(const Var<T>&, std::int64_t, std::int64_t);                          \
    template std::pair<Var<T>, Var<T>> spatial_gradient(const Var<T>&);                                  \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> scale(const Var<T>&, T);                                                             \
    template Var<T> add_scalar(const Var<T>&, T);                                                        \
    template Var<T> sum_sq(const Var<T>&);                                                               \
    template Var<T> sum(const Var<T>&);                                                                  \
    template Var<T> sum_axis(const Var<T>&, std::size_t);                                                \
    template Var<T> reshape(const Var<T>&, Shape);                                                       \
    template BasicTensor<T> permuted(const BasicTensor<T>&, const std::vector<std::size_t>&);            \
    template Var<T> permute(const Var<T>&, std::vector<std::size_t>);                                    \
    template Var<T> take(const Var<T>&, std::int64_t);                                                   \
    template Var<T> matmul(const Var<T>&, const Var<T>&);

SSEM_INSTANTIATE_GRAPH(float)
SSEM_INSTANTIATE_GRAPH(double)

#undef SSEM_INSTANTIATE_GRAPH

} // namespace ssem::nd
