#include "chandiv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace chandiv {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void check_finite(const char* op, const Array<T>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericError(std::string("non-finite value produced by ") + op + " at flat index " +
                               std::to_string(i));
        }
    }
}

// Wraps a forward result into a graph node. The backward rule is attached only
// when some input requires grad, so inference builds no graph.
template <typename T, typename Rule>
Tensor<T> record(const char* op, Array<T> value, std::vector<NodePtr<T>> inputs, Rule&& rule) {
    check_finite(op, value);
    auto node = std::make_shared<detail::Node<T>>();
    node->value = std::move(value);
    node->op = op;
    bool needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const auto& p) { return p->requires_grad; });
    if (needs_grad) {
        node->requires_grad = true;
        node->parents = std::move(inputs);
        node->backward = std::forward<Rule>(rule);
    }
    return Tensor<T>::from_node(std::move(node));
}

template <typename T>
Array<T>* grad_of(const NodePtr<T>& p) {
    return p->requires_grad ? &p->ensure_grad() : nullptr;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Output columns [lo, hi) whose input column ow*stride + offset - pad is in range.
inline void valid_span(std::size_t out, std::size_t stride, std::size_t offset, std::size_t pad, std::size_t extent,
                       std::size_t& lo, std::size_t& hi) {
    lo = offset >= pad ? 0 : (pad - offset + stride - 1) / stride;
    std::size_t limit = extent + pad - offset;  // ow*stride < limit
    hi = offset > extent + pad ? 0 : std::min(out, (limit + stride - 1) / stride);
    if (hi < lo) hi = lo;
}

// Column block of an im2col matrix for one sample. `ld` is the row stride of
// the full matrix and `col0` the first column owned by this sample.
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width, std::size_t kh, std::size_t kw,
            Pair stride, Pair pad, std::size_t out_h, std::size_t out_w, T* cols, std::size_t ld, std::size_t col0) {
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        const T* plane = x + c * height * width;
        for (std::size_t i = 0; i < kh; ++i) {
            std::size_t oh_lo, oh_hi;
            valid_span(out_h, stride.h, i, pad.h, height, oh_lo, oh_hi);
            for (std::size_t j = 0; j < kw; ++j, ++row) {
                std::size_t ow_lo, ow_hi;
                valid_span(out_w, stride.w, j, pad.w, width, ow_lo, ow_hi);
                T* dst = cols + row * ld + col0;
                std::fill(dst, dst + oh_lo * out_w, T(0));
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                    const T* src = plane + (oh * stride.h + i - pad.h) * width;
                    T* out = dst + oh * out_w;
                    std::fill(out, out + ow_lo, T(0));
                    if (stride.w == 1) {
                        std::copy(src + ow_lo + j - pad.w, src + ow_hi + j - pad.w, out + ow_lo);
                    } else {
                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) out[ow] = src[ow * stride.w + j - pad.w];
                    }
                    std::fill(out + ow_hi, out + out_w, T(0));
                }
                std::fill(dst + oh_hi * out_w, dst + out_h * out_w, T(0));
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, std::size_t ld, std::size_t col0, std::size_t channels, std::size_t height,
            std::size_t width, std::size_t kh, std::size_t kw, Pair stride, Pair pad, std::size_t out_h,
            std::size_t out_w, T* dx) {
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = dx + c * height * width;
        for (std::size_t i = 0; i < kh; ++i) {
            std::size_t oh_lo, oh_hi;
            valid_span(out_h, stride.h, i, pad.h, height, oh_lo, oh_hi);
            for (std::size_t j = 0; j < kw; ++j, ++row) {
                std::size_t ow_lo, ow_hi;
                valid_span(out_w, stride.w, j, pad.w, width, ow_lo, ow_hi);
                const T* src = cols + row * ld + col0;
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                    T* dst = plane + (oh * stride.h + i - pad.h) * width;
                    const T* in = src + oh * out_w;
                    for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow * stride.w + j - pad.w] += in[ow];
                }
            }
        }
    }
}

constexpr std::size_t kIm2colBudget = std::size_t{1} << 24;

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("add", a, b);
    Array<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    auto pa = a.node(), pb = b.node();
    return record<T>("add", std::move(out), {pa, pb}, [pa, pb](const Array<T>& g) {
        if (auto* ga = grad_of(pa)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        }
        if (auto* gb = grad_of(pb)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("sub", a, b);
    Array<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto pa = a.node(), pb = b.node();
    return record<T>("sub", std::move(out), {pa, pb}, [pa, pb](const Array<T>& g) {
        if (auto* ga = grad_of(pa)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        }
        if (auto* gb = grad_of(pb)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("mul", a, b);
    Array<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto pa = a.node(), pb = b.node();
    return record<T>("mul", std::move(out), {pa, pb}, [pa, pb](const Array<T>& g) {
        if (auto* ga = grad_of(pa)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * pb->value[i];
        }
        if (auto* gb = grad_of(pb)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * pa->value[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    Array<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
    auto pa = a.node();
    return record<T>("scale", std::move(out), {pa}, [pa, factor](const Array<T>& g) {
        auto* ga = grad_of(pa);
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * factor;
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T shift) {
    Array<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + shift;
    auto pa = a.node();
    return record<T>("add_scalar", std::move(out), {pa}, [pa](const Array<T>& g) { pa->accumulate(g); });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    require(shape_numel(shape) == a.size(),
            "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto pa = a.node();
    return record<T>("reshape", a.value().reshaped(std::move(shape)), {pa}, [pa](const Array<T>& g) {
        auto* ga = grad_of(pa);
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require(a.rank() == 2 || a.rank() == 3, "transpose: expected rank 2 or 3, got " + shape_str(a.shape()));
    std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
    std::size_t rows = a.dim(a.rank() - 2), cols = a.dim(a.rank() - 1);
    Shape out_shape = a.shape();
    std::swap(out_shape[a.rank() - 2], out_shape[a.rank() - 1]);
    Array<T> out(out_shape);
    const auto& in = a.value();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) out[b * rows * cols + c * rows + r] = in[b * rows * cols + r * cols + c];
        }
    }
    auto pa = a.node();
    return record<T>("transpose", std::move(out), {pa}, [pa, batch, rows, cols](const Array<T>& g) {
        auto* ga = grad_of(pa);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    (*ga)[b * rows * cols + r * cols + c] += g[b * rows * cols + c * rows + r];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const std::string shapes = shape_str(a.shape()) + " and " + shape_str(b.shape());
    require(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 3), "matmul: unsupported ranks " + shapes);
    bool batched = a.rank() == 3;
    std::size_t batch = batched ? a.dim(0) : 1;
    require(!batched || b.dim(0) == batch, "matmul: batch extents differ " + shapes);
    std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    require(k == kb, "matmul: inner extents differ " + shapes);

    Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
    Array<T> out(out_shape);
    for (std::size_t i = 0; i < batch; ++i) {
        MatMap<T>(out.data() + i * m * n, m, n).noalias() =
            ConstMatMap<T>(a.value().data() + i * m * k, m, k) * ConstMatMap<T>(b.value().data() + i * k * n, k, n);
    }
    auto pa = a.node(), pb = b.node();
    return record<T>("matmul", std::move(out), {pa, pb}, [pa, pb, batch, m, k, n](const Array<T>& g) {
        auto* ga = grad_of(pa);
        auto* gb = grad_of(pb);
        for (std::size_t i = 0; i < batch; ++i) {
            ConstMatMap<T> go(g.data() + i * m * n, m, n);
            if (ga) {
                MatMap<T>(ga->data() + i * m * k, m, k).noalias() +=
                    go * ConstMatMap<T>(pb->value.data() + i * k * n, k, n).transpose();
            }
            if (gb) {
                MatMap<T>(gb->data() + i * k * n, k, n).noalias() +=
                    ConstMatMap<T>(pa->value.data() + i * m * k, m, k).transpose() * go;
            }
        }
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, Pair stride, Pair pad) {
    if (input.rank() == 3) {
        Shape s = input.shape();
        auto batched = conv2d(reshape(input, {1, s[0], s[1], s[2]}), kernel, stride, pad);
        Shape o = batched.shape();
        return reshape(batched, {o[1], o[2], o[3]});
    }
    const std::string shapes = shape_str(input.shape()) + " with kernel " + shape_str(kernel.shape());
    require(input.rank() == 4 && kernel.rank() == 4, "conv2d: expected [N,C,H,W] input and 4-d kernel, got " + shapes);
    require(stride.h > 0 && stride.w > 0, "conv2d: stride must be positive");
    std::size_t n_batch = input.dim(0), cin = input.dim(1), height = input.dim(2), width = input.dim(3);
    std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    require(kernel.dim(1) == cin, "conv2d: channel mismatch " + shapes);
    require(kh <= height + 2 * pad.h && kw <= width + 2 * pad.w, "conv2d: non-positive output extent for " + shapes);
    std::size_t out_h = (height + 2 * pad.h - kh) / stride.h + 1;
    std::size_t out_w = (width + 2 * pad.w - kw) / stride.w + 1;
    std::size_t plane = out_h * out_w, patch = cin * kh * kw, in_size = cin * height * width;
    std::size_t chunk = std::clamp<std::size_t>(kIm2colBudget / std::max<std::size_t>(patch * plane, 1), 1, n_batch);

    Array<T> out({n_batch, cout, out_h, out_w});
    ConstMatMap<T> weights(kernel.value().data(), cout, patch);
    RowMat<T> cols, result;
    for (std::size_t n0 = 0; n0 < n_batch; n0 += chunk) {
        std::size_t nc = std::min(chunk, n_batch - n0);
        cols.resize(patch, nc * plane);
        for (std::size_t s = 0; s < nc; ++s) {
            im2col(input.value().data() + (n0 + s) * in_size, cin, height, width, kh, kw, stride, pad, out_h, out_w,
                   cols.data(), nc * plane, s * plane);
        }
        result.noalias() = weights * cols;
        for (std::size_t s = 0; s < nc; ++s) {
            for (std::size_t co = 0; co < cout; ++co) {
                std::copy_n(result.data() + co * nc * plane + s * plane, plane,
                            out.data() + ((n0 + s) * cout + co) * plane);
            }
        }
    }

    auto px = input.node(), pk = kernel.node();
    return record<T>("conv2d", std::move(out), {px, pk}, [=](const Array<T>& g) {
        auto* gx = grad_of(px);
        auto* gk = grad_of(pk);
        ConstMatMap<T> w(pk->value.data(), cout, patch);
        RowMat<T> grad_out, cols_buf, dcols;
        for (std::size_t n0 = 0; n0 < n_batch; n0 += chunk) {
            std::size_t nc = std::min(chunk, n_batch - n0);
            grad_out.resize(cout, nc * plane);
            for (std::size_t s = 0; s < nc; ++s) {
                for (std::size_t co = 0; co < cout; ++co) {
                    std::copy_n(g.data() + ((n0 + s) * cout + co) * plane, plane,
                                grad_out.data() + co * nc * plane + s * plane);
                }
            }
            if (gk) {
                cols_buf.resize(patch, nc * plane);
                for (std::size_t s = 0; s < nc; ++s) {
                    im2col(px->value.data() + (n0 + s) * in_size, cin, height, width, kh, kw, stride, pad, out_h,
                           out_w, cols_buf.data(), nc * plane, s * plane);
                }
                MatMap<T>(gk->data(), cout, patch).noalias() += grad_out * cols_buf.transpose();
            }
            if (gx) {
                dcols.noalias() = w.transpose() * grad_out;
                for (std::size_t s = 0; s < nc; ++s) {
                    col2im(dcols.data(), nc * plane, s * plane, cin, height, width, kh, kw, stride, pad, out_h, out_w,
                           gx->data() + (n0 + s) * in_size);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& y, const Tensor<T>& bias) {
    require(y.rank() >= 2, "add_channel_bias: expected rank >= 2, got " + shape_str(y.shape()));
    std::size_t n_batch = y.dim(0), channels = y.dim(1), inner = y.size() / (n_batch * channels);
    require(bias.size() == channels,
            "add_channel_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(y.shape()));
    Array<T> out(y.shape());
    for (std::size_t n = 0; n < n_batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            std::size_t base = (n * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = y.value()[base + i] + bias.value()[c];
        }
    }
    auto py = y.node(), pb = bias.node();
    return record<T>("add_channel_bias", std::move(out), {py, pb}, [=](const Array<T>& g) {
        if (auto* gy = grad_of(py)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gy)[i] += g[i];
        }
        if (auto* gb = grad_of(pb)) {
            for (std::size_t n = 0; n < n_batch; ++n) {
                for (std::size_t c = 0; c < channels; ++c) {
                    std::size_t base = (n * channels + c) * inner;
                    T acc = 0;
                    for (std::size_t i = 0; i < inner; ++i) acc += g[base + i];
                    (*gb)[c] += acc;
                }
            }
        }
    });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& t, std::size_t axis) {
    require(axis < t.rank(), "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(t.shape()));
    std::size_t outer = 1, inner = 1, n = t.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= t.dim(i);
    for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);

    Array<T> out(t.shape());
    const auto& in = t.value();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
            std::size_t base = o * n * inner + j;
            T peak = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < n; ++i) peak = std::max(peak, in[base + i * inner]);
            T total = 0;
            for (std::size_t i = 0; i < n; ++i) {
                T e = std::exp(in[base + i * inner] - peak);
                out[base + i * inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= total;
        }
    }
    auto pt = t.node();
    auto holder = std::make_shared<Array<T>>(out);
    return record<T>("softmax", std::move(out), {pt}, [pt, holder, outer, inner, n](const Array<T>& g) {
        auto* gt = grad_of(pt);
        const auto& y = *holder;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < inner; ++j) {
                std::size_t base = o * n * inner + j;
                T dot = 0;
                for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                for (std::size_t i = 0; i < n; ++i) {
                    (*gt)[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require(x.rank() == 3 || x.rank() == 4, "global_avg_pool: expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
    bool batched = x.rank() == 4;
    std::size_t n_batch = batched ? x.dim(0) : 1;
    std::size_t channels = x.dim(batched ? 1 : 0);
    std::size_t plane = x.size() / (n_batch * channels);
    Array<T> out(batched ? Shape{n_batch, channels} : Shape{channels, 1});
    for (std::size_t g = 0; g < n_batch * channels; ++g) {
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += x.value()[g * plane + i];
        out[g] = acc / static_cast<T>(plane);
    }
    auto px = x.node();
    return record<T>("global_avg_pool", std::move(out), {px}, [px, plane](const Array<T>& g) {
        auto* gx = grad_of(px);
        T inv = T(1) / static_cast<T>(plane);
        for (std::size_t k = 0; k < g.size(); ++k) {
            for (std::size_t i = 0; i < plane; ++i) (*gx)[k * plane + i] += g[k] * inv;
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Array<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
    auto px = x.node();
    return record<T>("relu", std::move(out), {px}, [px](const Array<T>& g) {
        auto* gx = grad_of(px);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (px->value[i] > T(0)) (*gx)[i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Array<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        T v = x.value()[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    auto px = x.node();
    auto holder = std::make_shared<Array<T>>(out);
    return record<T>("sigmoid", std::move(out), {px}, [px, holder](const Array<T>& g) {
        auto* gx = grad_of(px);
        const auto& y = *holder;
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i] * (T(1) - y[i]);
    });
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    const std::string shapes = shape_str(a.shape()) + " and " + shape_str(b.shape());
    require(a.rank() == b.rank() && a.rank() >= 1, "concat_last: rank mismatch " + shapes);
    for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
        require(a.dim(i) == b.dim(i), "concat_last: leading extents differ " + shapes);
    }
    std::size_t wa = a.dim(a.rank() - 1), wb = b.dim(b.rank() - 1), rows = a.size() / wa;
    Shape out_shape = a.shape();
    out_shape.back() = wa + wb;
    Array<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.value().data() + r * wa, wa, out.data() + r * (wa + wb));
        std::copy_n(b.value().data() + r * wb, wb, out.data() + r * (wa + wb) + wa);
    }
    auto pa = a.node(), pb = b.node();
    return record<T>("concat_last", std::move(out), {pa, pb}, [=](const Array<T>& g) {
        auto* ga = grad_of(pa);
        auto* gb = grad_of(pb);
        for (std::size_t r = 0; r < rows; ++r) {
            if (ga) {
                for (std::size_t k = 0; k < wa; ++k) (*ga)[r * wa + k] += g[r * (wa + wb) + k];
            }
            if (gb) {
                for (std::size_t k = 0; k < wb; ++k) (*gb)[r * wb + k] += g[r * (wa + wb) + wa + k];
            }
        }
    });
}

template <typename T>
Tensor<T> add_column_broadcast(const Tensor<T>& m, const Tensor<T>& v) {
    Shape expect = m.shape();
    require(!expect.empty(), "add_column_broadcast: empty matrix");
    expect.back() = 1;
    require(v.shape() == expect, "add_column_broadcast: vector " + shape_str(v.shape()) + " does not broadcast over " +
                                     shape_str(m.shape()));
    std::size_t cols = m.dim(m.rank() - 1), rows = m.size() / cols;
    Array<T> out(m.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < cols; ++k) out[r * cols + k] = m.value()[r * cols + k] + v.value()[r];
    }
    auto pm = m.node(), pv = v.node();
    return record<T>("add_column_broadcast", std::move(out), {pm, pv}, [=](const Array<T>& g) {
        if (auto* gm = grad_of(pm)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gm)[i] += g[i];
        }
        if (auto* gv = grad_of(pv)) {
            for (std::size_t r = 0; r < rows; ++r) {
                T acc = 0;
                for (std::size_t k = 0; k < cols; ++k) acc += g[r * cols + k];
                (*gv)[r] += acc;
            }
        }
    });
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
    require(x.rank() == 3 || x.rank() == 4, "scale_channels: expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
    std::size_t groups = x.rank() == 4 ? x.dim(0) * x.dim(1) : x.dim(0);
    require(s.size() == groups,
            "scale_channels: scale " + shape_str(s.shape()) + " does not match channels of " + shape_str(x.shape()));
    std::size_t inner = x.size() / groups;
    Array<T> out(x.shape());
    for (std::size_t c = 0; c < groups; ++c) {
        T f = s.value()[c];
        for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] = x.value()[c * inner + i] * f;
    }
    auto px = x.node(), ps = s.node();
    return record<T>("scale_channels", std::move(out), {px, ps}, [=](const Array<T>& g) {
        auto* gx = grad_of(px);
        auto* gs = grad_of(ps);
        for (std::size_t c = 0; c < groups; ++c) {
            T f = ps->value[c];
            T acc = 0;
            for (std::size_t i = 0; i < inner; ++i) {
                if (gx) (*gx)[c * inner + i] += g[c * inner + i] * f;
                acc += g[c * inner + i] * px->value[c * inner + i];
            }
            if (gs) (*gs)[c] += acc;
        }
    });
}

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& a, const Tensor<T>& w, const Tensor<T>& b) {
    require(a.rank() >= 2 && a.dim(a.rank() - 1) == 1, "channel_affine: expected [...,C,1], got " + shape_str(a.shape()));
    std::size_t channels = a.dim(a.rank() - 2), rows = a.size() / channels;
    require(w.size() == channels, "channel_affine: weight " + shape_str(w.shape()) + " does not match " +
                                      shape_str(a.shape()));
    require(b.size() == 1, "channel_affine: bias must be a scalar, got " + shape_str(b.shape()));
    Array<T> out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < channels; ++c) {
            out[r * channels + c] = a.value()[r * channels + c] * w.value()[c] + b.value()[0];
        }
    }
    auto pa = a.node(), pw = w.node(), pb = b.node();
    return record<T>("channel_affine", std::move(out), {pa, pw, pb}, [=](const Array<T>& g) {
        auto* ga = grad_of(pa);
        auto* gw = grad_of(pw);
        auto* gb = grad_of(pb);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < channels; ++c) {
                T gi = g[r * channels + c];
                if (ga) (*ga)[r * channels + c] += gi * pw->value[c];
                if (gw) (*gw)[c] += gi * pa->value[r * channels + c];
                if (gb) (*gb)[0] += gi;
            }
        }
    });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const std::string shapes = shape_str(x.shape()) + " with weight " + shape_str(w.shape());
    require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1), "linear: shape mismatch " + shapes);
    require(b.size() == w.dim(0), "linear: bias " + shape_str(b.shape()) + " does not match " + shapes);
    std::size_t rows = x.dim(0), in = x.dim(1), outs = w.dim(0);
    Array<T> out({rows, outs});
    MatMap<T> y(out.data(), rows, outs);
    y.noalias() = ConstMatMap<T>(x.value().data(), rows, in) * ConstMatMap<T>(w.value().data(), outs, in).transpose();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < outs; ++o) y(r, o) += b.value()[o];
    }
    auto px = x.node(), pw = w.node(), pb = b.node();
    return record<T>("linear", std::move(out), {px, pw, pb}, [=](const Array<T>& g) {
        ConstMatMap<T> go(g.data(), rows, outs);
        if (auto* gx = grad_of(px)) {
            MatMap<T>(gx->data(), rows, in).noalias() += go * ConstMatMap<T>(pw->value.data(), outs, in);
        }
        if (auto* gw = grad_of(pw)) {
            MatMap<T>(gw->data(), outs, in).noalias() += go.transpose() * ConstMatMap<T>(px->value.data(), rows, in);
        }
        if (auto* gb = grad_of(pb)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t o = 0; o < outs; ++o) (*gb)[o] += go(r, o);
            }
        }
    });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Array<T>& running_mean,
                     Array<T>& running_var, bool training, T momentum, T eps) {
    require(x.rank() == 2 || x.rank() == 4, "batch_norm: expected [N,C] or [N,C,H,W], got " + shape_str(x.shape()));
    std::size_t n_batch = x.dim(0), channels = x.dim(1), inner = x.size() / (n_batch * channels);
    require(gamma.size() == channels && beta.size() == channels && running_mean.size() == channels &&
                running_var.size() == channels,
            "batch_norm: parameter extents do not match " + shape_str(x.shape()));
    std::size_t count = n_batch * inner;
    require(!training || count > 1, "batch_norm: training mode needs more than one value per channel");

    const auto& in = x.value();
    std::vector<T> mu(channels), inv_std(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        if (training) {
            double acc = 0;
            for (std::size_t n = 0; n < n_batch; ++n) {
                const T* p = in.data() + (n * channels + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) acc += p[i];
            }
            double m = acc / static_cast<double>(count);
            double sq = 0;
            for (std::size_t n = 0; n < n_batch; ++n) {
                const T* p = in.data() + (n * channels + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) sq += (p[i] - m) * (p[i] - m);
            }
            double var = sq / static_cast<double>(count);
            mu[c] = static_cast<T>(m);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            double unbiased = sq / static_cast<double>(count - 1);
            running_mean[c] = momentum * running_mean[c] + (T(1) - momentum) * static_cast<T>(m);
            running_var[c] = momentum * running_var[c] + (T(1) - momentum) * static_cast<T>(unbiased);
        } else {
            mu[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }

    auto xhat = std::make_shared<Array<T>>(x.shape());
    Array<T> out(x.shape());
    for (std::size_t n = 0; n < n_batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            std::size_t base = (n * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                T h = (in[base + i] - mu[c]) * inv_std[c];
                (*xhat)[base + i] = h;
                out[base + i] = gamma.value()[c] * h + beta.value()[c];
            }
        }
    }

    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return record<T>("batch_norm", std::move(out), {px, pg, pb},
                     [=, inv_std = std::move(inv_std)](const Array<T>& g) {
                         const auto& h = *xhat;
                         auto* gx = grad_of(px);
                         auto* gg = grad_of(pg);
                         auto* gb = grad_of(pb);
                         for (std::size_t c = 0; c < channels; ++c) {
                             T sum_g = 0, sum_gh = 0;
                             for (std::size_t n = 0; n < n_batch; ++n) {
                                 std::size_t base = (n * channels + c) * inner;
                                 for (std::size_t i = 0; i < inner; ++i) {
                                     sum_g += g[base + i];
                                     sum_gh += g[base + i] * h[base + i];
                                 }
                             }
                             if (gg) (*gg)[c] += sum_gh;
                             if (gb) (*gb)[c] += sum_g;
                             if (!gx) continue;
                             T scale_c = pg->value[c] * inv_std[c];
                             T inv_count = T(1) / static_cast<T>(count);
                             for (std::size_t n = 0; n < n_batch; ++n) {
                                 std::size_t base = (n * channels + c) * inner;
                                 for (std::size_t i = 0; i < inner; ++i) {
                                     T d = training ? g[base + i] - inv_count * (sum_g + h[base + i] * sum_gh)
                                                    : g[base + i];
                                     (*gx)[base + i] += scale_c * d;
                                 }
                             }
                         }
                     });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (auto v : x.value().values()) acc += v;
    auto px = x.node();
    return record<T>("sum", Array<T>({1}, acc), {px}, [px](const Array<T>& g) {
        auto* gx = grad_of(px);
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    require(logits.rank() == 2, "cross_entropy: expected [N,K] logits, got " + shape_str(logits.shape()));
    std::size_t rows = logits.dim(0), classes = logits.dim(1);
    require(labels.size() == rows, "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                       shape_str(logits.shape()));
    auto probs = std::make_shared<Array<T>>(logits.shape());
    std::vector<int> targets(labels.begin(), labels.end());
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        int label = targets[r];
        require(label >= 0 && static_cast<std::size_t>(label) < classes,
                "cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(classes) + ")");
        const T* z = logits.value().data() + r * classes;
        T peak = *std::max_element(z, z + classes);
        T acc = 0;
        for (std::size_t k = 0; k < classes; ++k) acc += std::exp(z[k] - peak);
        T log_norm = peak + std::log(acc);
        for (std::size_t k = 0; k < classes; ++k) (*probs)[r * classes + k] = std::exp(z[k] - log_norm);
        total += log_norm - z[label];
    }
    auto pl = logits.node();
    return record<T>("cross_entropy", Array<T>({1}, total / static_cast<T>(rows)), {pl},
                     [pl, probs, targets = std::move(targets), rows, classes](const Array<T>& g) {
                         auto* gl = grad_of(pl);
                         T f = g[0] / static_cast<T>(rows);
                         for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t k = 0; k < classes; ++k) {
                                 T target = static_cast<int>(k) == targets[r] ? T(1) : T(0);
                                 (*gl)[r * classes + k] += f * ((*probs)[r * classes + k] - target);
                             }
                         }
                     });
}

#define CHANDIV_INSTANTIATE_OPS(T)                                                                               \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> scale(const Tensor<T>&, T);                                                               \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                          \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                         \
    template Tensor<T> transpose(const Tensor<T>&);                                                              \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, Pair, Pair);                                   \
    template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                   \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                                        \
    template Tensor<T> relu(const Tensor<T>&);                                                                   \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                                \
    template Tensor<T> concat_last(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> add_column_broadcast(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                                       \
    template Tensor<T> channel_affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Array<T>&, Array<T>&, bool, \
                                  T, T);                                                                         \
    template Tensor<T> sum(const Tensor<T>&);                                                                    \
    template Tensor<T> mean(const Tensor<T>&);                                                                   \
    template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

CHANDIV_INSTANTIATE_OPS(float)
CHANDIV_INSTANTIATE_OPS(double)

}  // namespace chandiv
