#include "ssem/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

namespace ssem::nd::kernels {
namespace {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
    if (shape.size() != rank) {
        throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_string(shape));
    }
}

// Unfold one [C,H,W] image into a [C*kh*kw, out_h*out_w] column matrix.
template <class T>
void im2col(const T* image, std::int64_t channels, const ConvGeometry& g, T* col) {
    const std::int64_t out_area = g.out_h * g.out_w;
    for (std::int64_t c = 0; c < channels; ++c) {
        const T* plane = image + c * g.in_h * g.in_w;
        for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
                T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * out_area;
                for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad_top + ki;
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(dst, dst + g.out_w, T{0});
                        continue;
                    }
                    const T* src = plane + iy * g.in_w;
                    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad_left + kj;
                        dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : T{0};
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* col, std::int64_t channels, const ConvGeometry& g, T* image) {
    const std::int64_t out_area = g.out_h * g.out_w;
    for (std::int64_t c = 0; c < channels; ++c) {
        T* plane = image + c * g.in_h * g.in_w;
        for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
            for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
                const T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * out_area;
                for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad_top + ki;
                    if (iy < 0 || iy >= g.in_h) continue;
                    const T* src = row + oy * g.out_w;
                    T* dst = plane + iy * g.in_w;
                    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad_left + kj;
                        if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

std::int64_t lower_index(double pos, std::int64_t extent) {
    if (extent < 2) return 0;
    return std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(pos)), extent - 2);
}

} // namespace

ConvGeometry conv_geometry(std::int64_t in_h, std::int64_t in_w, std::int64_t kernel_h,
                           std::int64_t kernel_w, std::int64_t stride, Padding padding) {
    if (stride < 1) throw ShapeError("convolution stride must be positive");
    if (kernel_h < 1 || kernel_w < 1) throw ShapeError("convolution kernel extents must be positive");
    ConvGeometry g;
    g.in_h = in_h;
    g.in_w = in_w;
    g.kernel_h = kernel_h;
    g.kernel_w = kernel_w;
    g.stride = stride;
    if (padding == Padding::same) {
        g.out_h = (in_h + stride - 1) / stride;
        g.out_w = (in_w + stride - 1) / stride;
        const std::int64_t total_h = std::max<std::int64_t>((g.out_h - 1) * stride + kernel_h - in_h, 0);
        const std::int64_t total_w = std::max<std::int64_t>((g.out_w - 1) * stride + kernel_w - in_w, 0);
        g.pad_top = total_h / 2;
        g.pad_left = total_w / 2;
        if (kernel_h > in_h + total_h || kernel_w > in_w + total_w || in_h < 1 || in_w < 1) {
            throw ShapeError("kernel larger than padded input");
        }
    } else {
        if (kernel_h > in_h || kernel_w > in_w) {
            throw ShapeError("kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
                             " larger than input " + std::to_string(in_h) + "x" + std::to_string(in_w));
        }
        g.out_h = (in_h - kernel_h) / stride + 1;
        g.out_w = (in_w - kernel_w) / stride + 1;
    }
    return g;
}

template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& kernels,
                              std::int64_t stride, Padding padding) {
    require_rank(input.shape(), 4, "conv2d input");
    require_rank(kernels.shape(), 4, "conv2d kernels");
    const auto batch = input.dim(0), channels = input.dim(1);
    const auto out_channels = kernels.dim(0);
    if (kernels.dim(1) != channels) {
        throw ShapeError("conv2d channel mismatch: input " + shape_string(input.shape()) + ", kernels " +
                         shape_string(kernels.shape()));
    }
    const auto g = conv_geometry(input.dim(2), input.dim(3), kernels.dim(2), kernels.dim(3), stride, padding);
    const std::int64_t patch = channels * g.kernel_h * g.kernel_w;
    const std::int64_t out_area = g.out_h * g.out_w;

    BasicTensor<T> out({batch, out_channels, g.out_h, g.out_w});
    std::vector<T> col(static_cast<std::size_t>(patch * out_area));
    ConstMatrixMap<T> weights(kernels.raw(), out_channels, patch);
    for (std::int64_t b = 0; b < batch; ++b) {
        im2col(input.raw() + b * channels * g.in_h * g.in_w, channels, g, col.data());
        ConstMatrixMap<T> cols(col.data(), patch, out_area);
        MatrixMap<T> result(out.raw() + b * out_channels * out_area, out_channels, out_area);
        result.noalias() = weights * cols;
    }
    return out;
}

template <class T>
BasicTensor<T> conv2d_input_grad(const BasicTensor<T>& grad_out, const BasicTensor<T>& kernels,
                                 std::int64_t stride, Padding padding, std::int64_t in_h,
                                 std::int64_t in_w) {
    require_rank(grad_out.shape(), 4, "transposed conv input");
    require_rank(kernels.shape(), 4, "transposed conv kernels");
    const auto batch = grad_out.dim(0);
    const auto out_channels = kernels.dim(0), channels = kernels.dim(1);
    if (grad_out.dim(1) != out_channels) {
        throw ShapeError("transposed conv channel mismatch: input " + shape_string(grad_out.shape()) +
                         ", kernels " + shape_string(kernels.shape()));
    }
    const auto g = conv_geometry(in_h, in_w, kernels.dim(2), kernels.dim(3), stride, padding);
    if (g.out_h != grad_out.dim(2) || g.out_w != grad_out.dim(3)) {
        throw ShapeError("transposed conv: input extents " + shape_string(grad_out.shape()) +
                         " inconsistent with output extents " + std::to_string(in_h) + "x" +
                         std::to_string(in_w));
    }
    const std::int64_t patch = channels * g.kernel_h * g.kernel_w;
    const std::int64_t out_area = g.out_h * g.out_w;

    BasicTensor<T> result({batch, channels, in_h, in_w});
    std::vector<T> col(static_cast<std::size_t>(patch * out_area));
    ConstMatrixMap<T> weights(kernels.raw(), out_channels, patch);
    for (std::int64_t b = 0; b < batch; ++b) {
        ConstMatrixMap<T> upstream(grad_out.raw() + b * out_channels * out_area, out_channels, out_area);
        MatrixMap<T> cols(col.data(), patch, out_area);
        cols.noalias() = weights.transpose() * upstream;
        col2im(col.data(), channels, g, result.raw() + b * channels * in_h * in_w);
    }
    return result;
}

template <class T>
BasicTensor<T> conv2d_kernel_grad(const BasicTensor<T>& input, const BasicTensor<T>& grad_out,
                                  std::int64_t kernel_h, std::int64_t kernel_w, std::int64_t stride,
                                  Padding padding) {
    require_rank(input.shape(), 4, "conv2d input");
    require_rank(grad_out.shape(), 4, "conv2d output gradient");
    const auto batch = input.dim(0), channels = input.dim(1);
    const auto out_channels = grad_out.dim(1);
    const auto g = conv_geometry(input.dim(2), input.dim(3), kernel_h, kernel_w, stride, padding);
    if (grad_out.dim(0) != batch || g.out_h != grad_out.dim(2) || g.out_w != grad_out.dim(3)) {
        throw ShapeError("conv2d kernel gradient: output gradient " + shape_string(grad_out.shape()) +
                         " inconsistent with input " + shape_string(input.shape()));
    }
    const std::int64_t patch = channels * kernel_h * kernel_w;
    const std::int64_t out_area = g.out_h * g.out_w;

    BasicTensor<T> result({out_channels, channels, kernel_h, kernel_w});
    MatrixMap<T> dweights(result.raw(), out_channels, patch);
    std::vector<T> col(static_cast<std::size_t>(patch * out_area));
    for (std::int64_t b = 0; b < batch; ++b) {
        im2col(input.raw() + b * channels * g.in_h * g.in_w, channels, g, col.data());
        ConstMatrixMap<T> cols(col.data(), patch, out_area);
        ConstMatrixMap<T> upstream(grad_out.raw() + b * out_channels * out_area, out_channels, out_area);
        dweights.noalias() += upstream * cols.transpose();
    }
    return result;
}

template <class T>
BasicTensor<T> grid_sample_forward(const BasicTensor<T>& image, const BasicTensor<T>& coords) {
    require_rank(image.shape(), 3, "grid_sample image");
    require_rank(coords.shape(), 3, "grid_sample coords");
    if (coords.dim(2) != 2) throw ShapeError("grid_sample coords must be [H,W,2]");
    if (!coords.all_finite()) throw NonFiniteError("grid_sample: non-finite sample coordinates");
    const auto channels = image.dim(0), h = image.dim(1), w = image.dim(2);
    const auto out_h = coords.dim(0), out_w = coords.dim(1);
    BasicTensor<T> out({channels, out_h, out_w});
    for (std::int64_t i = 0; i < out_h; ++i) {
        for (std::int64_t j = 0; j < out_w; ++j) {
            const T r = coords.at(i, j, 0), c = coords.at(i, j, 1);
            if (r < T{0} || r > T(h - 1) || c < T{0} || c > T(w - 1)) continue;
            const std::int64_t r0 = lower_index(r, h), c0 = lower_index(c, w);
            const std::int64_t r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
            const T fr = r - T(r0), fc = c - T(c0);
            for (std::int64_t ch = 0; ch < channels; ++ch) {
                const T a00 = image.at(ch, r0, c0), a01 = image.at(ch, r0, c1);
                const T a10 = image.at(ch, r1, c0), a11 = image.at(ch, r1, c1);
                out.at(ch, i, j) = (T{1} - fr) * (T{1} - fc) * a00 + (T{1} - fr) * fc * a01 +
                                   fr * (T{1} - fc) * a10 + fr * fc * a11;
            }
        }
    }
    return out;
}

template <class T>
void grid_sample_backward(const BasicTensor<T>& image, const BasicTensor<T>& coords,
                          const BasicTensor<T>& grad_out, BasicTensor<T>* grad_image,
                          BasicTensor<T>* grad_coords) {
    const auto channels = image.dim(0), h = image.dim(1), w = image.dim(2);
    const auto out_h = coords.dim(0), out_w = coords.dim(1);
    if (grad_image) *grad_image = BasicTensor<T>(image.shape());
    if (grad_coords) *grad_coords = BasicTensor<T>(coords.shape());
    for (std::int64_t i = 0; i < out_h; ++i) {
        for (std::int64_t j = 0; j < out_w; ++j) {
            const T r = coords.at(i, j, 0), c = coords.at(i, j, 1);
            if (r < T{0} || r > T(h - 1) || c < T{0} || c > T(w - 1)) continue;
            const std::int64_t r0 = lower_index(r, h), c0 = lower_index(c, w);
            const std::int64_t r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
            const T fr = r - T(r0), fc = c - T(c0);
            T dr{0}, dc{0};
            for (std::int64_t ch = 0; ch < channels; ++ch) {
                const T g = grad_out.at(ch, i, j);
                if (grad_image) {
                    grad_image->at(ch, r0, c0) += g * (T{1} - fr) * (T{1} - fc);
                    grad_image->at(ch, r0, c1) += g * (T{1} - fr) * fc;
                    grad_image->at(ch, r1, c0) += g * fr * (T{1} - fc);
                    grad_image->at(ch, r1, c1) += g * fr * fc;
                }
                if (grad_coords) {
                    const T a00 = image.at(ch, r0, c0), a01 = image.at(ch, r0, c1);
                    const T a10 = image.at(ch, r1, c0), a11 = image.at(ch, r1, c1);
                    dr += g * ((T{1} - fc) * (a10 - a00) + fc * (a11 - a01));
                    dc += g * ((T{1} - fr) * (a01 - a00) + fr * (a11 - a10));
                }
            }
            if (grad_coords) {
                grad_coords->at(i, j, 0) = dr;
                grad_coords->at(i, j, 1) = dc;
            }
        }
    }
}

namespace {

struct Tap {
    std::int64_t lo = 0, hi = 0;
    double frac = 0.0;
};

std::vector<Tap> resize_taps(std::int64_t in, std::int64_t out) {
    std::vector<Tap> taps(static_cast<std::size_t>(out));
    for (std::int64_t i = 0; i < out; ++i) {
        const double src = out > 1 ? static_cast<double>(i * (in - 1)) / static_cast<double>(out - 1) : 0.0;
        Tap t;
        t.lo = lower_index(src, in);
        t.hi = std::min(t.lo + 1, in - 1);
        t.frac = src - static_cast<double>(t.lo);
        taps[static_cast<std::size_t>(i)] = t;
    }
    return taps;
}

} // namespace

template <class T>
BasicTensor<T> resize_forward(const BasicTensor<T>& input, std::int64_t out_h, std::int64_t out_w) {
    require_rank(input.shape(), 3, "bilinear_resize input");
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: zero target extent");
    const auto channels = input.dim(0), h = input.dim(1), w = input.dim(2);
    const auto rows = resize_taps(h, out_h), cols = resize_taps(w, out_w);
    BasicTensor<T> out({channels, out_h, out_w});
    for (std::int64_t ch = 0; ch < channels; ++ch) {
        for (std::int64_t i = 0; i < out_h; ++i) {
            const Tap& tr = rows[static_cast<std::size_t>(i)];
            const T fr = static_cast<T>(tr.frac);
            for (std::int64_t j = 0; j < out_w; ++j) {
                const Tap& tc = cols[static_cast<std::size_t>(j)];
                const T fc = static_cast<T>(tc.frac);
                out.at(ch, i, j) = (T{1} - fr) * (T{1} - fc) * input.at(ch, tr.lo, tc.lo) +
                                   (T{1} - fr) * fc * input.at(ch, tr.lo, tc.hi) +
                                   fr * (T{1} - fc) * input.at(ch, tr.hi, tc.lo) +
                                   fr * fc * input.at(ch, tr.hi, tc.hi);
            }
        }
    }
    return out;
}

template <class T>
BasicTensor<T> resize_backward(const BasicTensor<T>& grad_out, std::int64_t in_h, std::int64_t in_w) {
    const auto channels = grad_out.dim(0), out_h = grad_out.dim(1), out_w = grad_out.dim(2);
    const auto rows = resize_taps(in_h, out_h), cols = resize_taps(in_w, out_w);
    BasicTensor<T> result({channels, in_h, in_w});
    for (std::int64_t ch = 0; ch < channels; ++ch) {
        for (std::int64_t i = 0; i < out_h; ++i) {
            const Tap& tr = rows[static_cast<std::size_t>(i)];
            const T fr = static_cast<T>(tr.frac);
            for (std::int64_t j = 0; j < out_w; ++j) {
                const Tap& tc = cols[static_cast<std::size_t>(j)];
                const T fc = static_cast<T>(tc.frac);
                const T g = grad_out.at(ch, i, j);
                result.at(ch, tr.lo, tc.lo) += g * (T{1} - fr) * (T{1} - fc);
                result.at(ch, tr.lo, tc.hi) += g * (T{1} - fr) * fc;
                result.at(ch, tr.hi, tc.lo) += g * fr * (T{1} - fc);
                result.at(ch, tr.hi, tc.hi) += g * fr * fc;
            }
        }
    }
    return result;
}

template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> spatial_gradient_forward(const BasicTensor<T>& field) {
    require_rank(field.shape(), 2, "spatial_gradient field");
    const auto h = field.dim(0), w = field.dim(1);
    if (h < 2 || w < 2) {
        throw ShapeError("spatial_gradient: degenerate grid " + shape_string(field.shape()));
    }
    BasicTensor<T> d_rows(field.shape()), d_cols(field.shape());
    for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) {
            if (r + 1 < h) d_rows.at(r, c) = field.at(r + 1, c) - field.at(r, c);
            if (c + 1 < w) d_cols.at(r, c) = field.at(r, c + 1) - field.at(r, c);
        }
    }
    return {std::move(d_rows), std::move(d_cols)};
}

template <class T>
BasicTensor<T> spatial_gradient_backward(const BasicTensor<T>& grad_rows, const BasicTensor<T>& grad_cols) {
    const auto h = grad_rows.dim(0), w = grad_rows.dim(1);
    BasicTensor<T> result(grad_rows.shape());
    for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) {
            T acc{0};
            if (r + 1 < h) acc -= grad_rows.at(r, c);
            if (r > 0) acc += grad_rows.at(r - 1, c);
            if (c + 1 < w) acc -= grad_cols.at(r, c);
            if (c > 0) acc += grad_cols.at(r, c - 1);
            result.at(r, c) = acc;
        }
    }
    return result;
}

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_a, bool transpose_b) {
    require_rank(a.shape(), 2, "matmul lhs");
    require_rank(b.shape(), 2, "matmul rhs");
    ConstMatrixMap<T> ma(a.raw(), a.dim(0), a.dim(1));
    ConstMatrixMap<T> mb(b.raw(), b.dim(0), b.dim(1));
    const auto m = transpose_a ? a.dim(1) : a.dim(0);
    const auto k = transpose_a ? a.dim(0) : a.dim(1);
    const auto kb = transpose_b ? b.dim(1) : b.dim(0);
    const auto n = transpose_b ? b.dim(0) : b.dim(1);
    if (k != kb) {
        throw ShapeError("matmul inner extent mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    BasicTensor<T> out({m, n});
    MatrixMap<T> mo(out.raw(), m, n);
    if (!transpose_a && !transpose_b) mo.noalias() = ma * mb;
    else if (transpose_a && !transpose_b) mo.noalias() = ma.transpose() * mb;
    else if (!transpose_a) mo.noalias() = ma * mb.transpose();
    else mo.noalias() = ma.transpose() * mb.transpose();
    return out;
}

#define SSEM_INSTANTIATE_KERNELS(T)                                                                  \
    template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&, std::int64_t, \
                                           Padding);                                                 \
    template BasicTensor<T> conv2d_input_grad(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                              std::int64_t, Padding, std::int64_t, std::int64_t);     \
    template BasicTensor<T> conv2d_kernel_grad(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                               std::int64_t, std::int64_t, std::int64_t, Padding);    \
    template BasicTensor<T> grid_sample_forward(const BasicTensor<T>&, const BasicTensor<T>&);        \
    template void grid_sample_backward(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                       const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*);      \
    template BasicTensor<T> resize_forward(const BasicTensor<T>&, std::int64_t, std::int64_t);        \
    template BasicTensor<T> resize_backward(const BasicTensor<T>&, std::int64_t, std::int64_t);       \
    template std::pair<BasicTensor<T>, BasicTensor<T>> spatial_gradient_forward(const BasicTensor<T>&); \
    template BasicTensor<T> spatial_gradient_backward(const BasicTensor<T>&, const BasicTensor<T>&);  \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&, bool, bool);

SSEM_INSTANTIATE_KERNELS(float)
SSEM_INSTANTIATE_KERNELS(double)

#undef SSEM_INSTANTIATE_KERNELS

} // namespace ssem::nd::kernels
