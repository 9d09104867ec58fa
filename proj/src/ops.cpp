#include "padkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

namespace padkit {

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

Tensor make_output(Shape shape, std::vector<double> data, bool requires_grad, const char* op) {
    for (double v : data) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite result");
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return wrap(std::move(impl));
}

void record(const char* name, std::initializer_list<const Tensor*> inputs, const Tensor& out,
            std::function<void()> fn) {
    Tape::Node node;
    node.name = name;
    for (const Tensor* t : inputs) {
        if (t->defined()) node.inputs.push_back(t->impl());
    }
    node.output = out.impl();
    node.backward = std::move(fn);
    Tape::active()->record(std::move(node));
}

std::size_t norm_axis(const Tensor& x, int axis) {
    const int r = static_cast<int>(x.rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
    }
    return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
    std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.length = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) out.push_back(shape[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

bool is_suffix(const Shape& full, const Shape& suffix) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

// Unary map with a derivative expressed through input and output values.
template <typename Fwd, typename Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    const bool rec = should_record({&x});
    Tensor y = make_output(x.shape(), std::move(out), rec, name);
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record(name, {&x}, y, [X, Y, deriv] {
            auto gx = X->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += Y->grad[i] * deriv(X->data[i], Y->data[i]);
        });
    }
    return y;
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul: operands must be at least 2-D");
    const std::size_t m = a.dim(-2), k = a.dim(-1);
    const std::size_t kb = b.dim(-2), n = b.dim(-1);
    if (k != kb) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const bool shared = b.rank() == 2;
    const std::size_t batch = a.numel() / (m * k);
    if (!shared) {
        if (b.rank() != a.rank() ||
            !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
            throw DimensionError("matmul: batch dimensions differ " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
        }
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);

    const double* A = a.data().data();
    const double* B = b.data().data();
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
        const double* As = A + s * m * k;
        const double* Bs = shared ? B : B + s * k * n;
        double* Cs = out.data() + s * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double av = As[i * k + p];
                const double* brow = Bs + p * n;
                double* crow = Cs + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    const bool rec = should_record({&a, &b});
    Tensor c = make_output(std::move(out_shape), std::move(out), rec, "matmul");
    if (rec) {
        TensorImpl* Ai = a.impl().get();
        TensorImpl* Bi = b.impl().get();
        TensorImpl* Ci = c.impl().get();
        record("matmul", {&a, &b}, c, [=] {
            const double* G = Ci->grad.data();
            if (Ai->requires_grad) {
                double* GA = Ai->grad_buffer().data();
                for (std::size_t s = 0; s < batch; ++s) {
                    const double* Bs = shared ? Bi->data.data() : Bi->data.data() + s * k * n;
                    const double* Gs = G + s * m * n;
                    double* GAs = GA + s * m * k;
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t p = 0; p < k; ++p) {
                            double acc = 0.0;
                            const double* brow = Bs + p * n;
                            const double* grow = Gs + i * n;
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            GAs[i * k + p] += acc;
                        }
                    }
                }
            }
            if (Bi->requires_grad) {
                double* GB = Bi->grad_buffer().data();
                for (std::size_t s = 0; s < batch; ++s) {
                    const double* As = Ai->data.data() + s * m * k;
                    const double* Gs = G + s * m * n;
                    double* GBs = shared ? GB : GB + s * k * n;
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t p = 0; p < k; ++p) {
                            const double av = As[i * k + p];
                            const double* grow = Gs + i * n;
                            double* gbrow = GBs + p * n;
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
    }
    return c;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() < 2) throw DimensionError("transpose: rank must be at least 2");
    std::vector<std::size_t> order(x.rank());
    std::iota(order.begin(), order.end(), 0);
    std::swap(order[order.size() - 1], order[order.size() - 2]);
    return permute(x, order);
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    const std::size_t r = x.rank();
    if (order.size() != r) throw DimensionError("permute: order length differs from rank");
    std::vector<bool> seen(r, false);
    for (auto o : order) {
        if (o >= r || seen[o]) throw DimensionError("permute: invalid axis order");
        seen[o] = true;
    }
    const Shape& in_shape = x.shape();
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
    Shape out_shape(r);
    std::vector<std::size_t> src_strides(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in_shape[order[i]];
        src_strides[i] = in_strides[order[i]];
    }
    const std::size_t n = x.numel();
    auto src = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        (*src)[flat] = offset;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            offset += src_strides[d];
            if (idx[d] < out_shape[d]) break;
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    const auto in = x.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = in[(*src)[i]];
    const bool rec = should_record({&x});
    Tensor y = make_output(std::move(out_shape), std::move(out), rec, "permute");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("permute", {&x}, y, [X, Y, src] {
            auto gx = X->grad_buffer();
            for (std::size_t i = 0; i < Y->grad.size(); ++i) gx[(*src)[i]] += Y->grad[i];
        });
    }
    return y;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (numel_of(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    const bool rec = should_record({&x});
    Tensor y = make_output(shape, std::vector<double>(x.data().begin(), x.data().end()), rec, "reshape");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("reshape", {&x}, y, [X, Y] {
            auto gx = X->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += Y->grad[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor& b, double factor) {
    switch (kind) {
        case ElementwiseKind::add:
            return add(a, b);
        case ElementwiseKind::sub:
            return sub(a, b);
        case ElementwiseKind::mul:
            return mul(a, b);
        case ElementwiseKind::scale:
            return scale(a, factor);
        case ElementwiseKind::relu:
            return relu(a);
    }
    throw std::invalid_argument("elementwise: unknown kind");
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!is_suffix(a.shape(), b.shape()) && b.numel() != 1) {
        throw DimensionError("add: " + shape_str(b.shape()) + " does not broadcast to " + shape_str(a.shape()));
    }
    const auto ad = a.data();
    const auto bd = b.data();
    const std::size_t bn = bd.size();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i % bn];
    const bool rec = should_record({&a, &b});
    Tensor y = make_output(a.shape(), std::move(out), rec, "add");
    if (rec) {
        TensorImpl* A = a.impl().get();
        TensorImpl* B = b.impl().get();
        TensorImpl* Y = y.impl().get();
        record("add", {&a, &b}, y, [A, B, Y, bn] {
            if (A->requires_grad) {
                auto ga = A->grad_buffer();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += Y->grad[i];
            }
            if (B->requires_grad) {
                auto gb = B->grad_buffer();
                for (std::size_t i = 0; i < Y->grad.size(); ++i) gb[i % bn] += Y->grad[i];
            }
        });
    }
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i];
    const bool rec = should_record({&a, &b});
    Tensor y = make_output(a.shape(), std::move(out), rec, "sub");
    if (rec) {
        TensorImpl* A = a.impl().get();
        TensorImpl* B = b.impl().get();
        TensorImpl* Y = y.impl().get();
        record("sub", {&a, &b}, y, [A, B, Y] {
            if (A->requires_grad) {
                auto ga = A->grad_buffer();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += Y->grad[i];
            }
            if (B->requires_grad) {
                auto gb = B->grad_buffer();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= Y->grad[i];
            }
        });
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
    const bool rec = should_record({&a, &b});
    Tensor y = make_output(a.shape(), std::move(out), rec, "mul");
    if (rec) {
        TensorImpl* A = a.impl().get();
        TensorImpl* B = b.impl().get();
        TensorImpl* Y = y.impl().get();
        record("mul", {&a, &b}, y, [A, B, Y] {
            if (A->requires_grad) {
                auto ga = A->grad_buffer();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += Y->grad[i] * B->data[i];
            }
            if (B->requires_grad) {
                auto gb = B->grad_buffer();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += Y->grad[i] * A->data[i];
            }
        });
    }
    return y;
}

Tensor scale(const Tensor& x, double factor) {
    return unary("scale", x, [factor](double v) { return v * factor; },
                 [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& x) {
    return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                 [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary(
        "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [inv_sqrt_2pi](double in, double) {
            const double cdf = 0.5 * (1.0 + std::erf(in * inv_sqrt2));
            return cdf + in * inv_sqrt_2pi * std::exp(-0.5 * in * in);
        });
}

Tensor square(const Tensor& x) {
    return unary("square", x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Tensor sqrt(const Tensor& x) {
    for (double v : x.data()) {
        if (v < 0.0) throw NumericError("sqrt: negative input");
    }
    return unary("sqrt", x, [](double v) { return std::sqrt(v); },
                 [](double, double out) { return out > 0.0 ? 0.5 / out : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce_sum(const Tensor& x, int axis) {
    const std::size_t ax = norm_axis(x, axis);
    const AxisSplit s = split_at(x.shape(), ax);
    const auto in = x.data();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.length; ++l) {
            const double* row = in.data() + (o * s.length + l) * s.inner;
            double* dst = out.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
        }
    }
    const bool rec = should_record({&x});
    Tensor y = make_output(drop_axis(x.shape(), ax), std::move(out), rec, "reduce_sum");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("reduce_sum", {&x}, y, [X, Y, s] {
            auto gx = X->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t l = 0; l < s.length; ++l) {
                    for (std::size_t i = 0; i < s.inner; ++i) {
                        gx[(o * s.length + l) * s.inner + i] += Y->grad[o * s.inner + i];
                    }
                }
            }
        });
    }
    return y;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const bool rec = should_record({&x});
    Tensor y = make_output({1}, {acc}, rec, "sum");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("sum", {&x}, y, [X, Y] {
            auto gx = X->grad_buffer();
            const double g = Y->grad[0];
            for (auto& v : gx) v += g;
        });
    }
    return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Normalization

Tensor softmax(const Tensor& x, int axis) {
    const std::size_t ax = norm_axis(x, axis);
    const AxisSplit s = split_at(x.shape(), ax);
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.length * s.inner + i;
            double mx = in[base];
            for (std::size_t l = 1; l < s.length; ++l) mx = std::max(mx, in[base + l * s.inner]);
            double total = 0.0;
            for (std::size_t l = 0; l < s.length; ++l) {
                const double e = std::exp(in[base + l * s.inner] - mx);
                out[base + l * s.inner] = e;
                total += e;
            }
            for (std::size_t l = 0; l < s.length; ++l) out[base + l * s.inner] /= total;
        }
    }
    const bool rec = should_record({&x});
    Tensor y = make_output(x.shape(), std::move(out), rec, "softmax");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("softmax", {&x}, y, [X, Y, s] {
            auto gx = X->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const std::size_t base = o * s.length * s.inner + i;
                    double dot = 0.0;
                    for (std::size_t l = 0; l < s.length; ++l) {
                        const std::size_t j = base + l * s.inner;
                        dot += Y->grad[j] * Y->data[j];
                    }
                    for (std::size_t l = 0; l < s.length; ++l) {
                        const std::size_t j = base + l * s.inner;
                        gx[j] += Y->data[j] * (Y->grad[j] - dot);
                    }
                }
            }
        });
    }
    return y;
}

Tensor log_softmax(const Tensor& x, int axis) {
    const std::size_t ax = norm_axis(x, axis);
    const AxisSplit s = split_at(x.shape(), ax);
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.length * s.inner + i;
            double mx = in[base];
            for (std::size_t l = 1; l < s.length; ++l) mx = std::max(mx, in[base + l * s.inner]);
            double total = 0.0;
            for (std::size_t l = 0; l < s.length; ++l) total += std::exp(in[base + l * s.inner] - mx);
            const double lse = mx + std::log(total);
            for (std::size_t l = 0; l < s.length; ++l) out[base + l * s.inner] = in[base + l * s.inner] - lse;
        }
    }
    const bool rec = should_record({&x});
    Tensor y = make_output(x.shape(), std::move(out), rec, "log_softmax");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("log_softmax", {&x}, y, [X, Y, s] {
            auto gx = X->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const std::size_t base = o * s.length * s.inner + i;
                    double gsum = 0.0;
                    for (std::size_t l = 0; l < s.length; ++l) gsum += Y->grad[base + l * s.inner];
                    for (std::size_t l = 0; l < s.length; ++l) {
                        const std::size_t j = base + l * s.inner;
                        gx[j] += Y->grad[j] - std::exp(Y->data[j]) * gsum;
                    }
                }
            }
        });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = x.dim(-1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / d;
    const auto in = x.data();
    const auto g = gamma.data();
    const auto b = beta.data();
    auto xhat = std::make_shared<std::vector<double>>(in.size());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * rs;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = g[j] * h + b[j];
        }
    }
    const bool rec = should_record({&x, &gamma, &beta});
    Tensor y = make_output(x.shape(), std::move(out), rec, "layer_norm");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* G = gamma.impl().get();
        TensorImpl* B = beta.impl().get();
        TensorImpl* Y = y.impl().get();
        record("layer_norm", {&x, &gamma, &beta}, y, [=] {
            const double* gy = Y->grad.data();
            if (G->requires_grad || B->requires_grad) {
                auto gg = G->requires_grad ? G->grad_buffer() : std::span<double>{};
                auto gb = B->requires_grad ? B->grad_buffer() : std::span<double>{};
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                        if (!gg.empty()) gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
                        if (!gb.empty()) gb[j] += gy[r * d + j];
                    }
                }
            }
            if (X->requires_grad) {
                auto gx = X->grad_buffer();
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gy[r * d + j] * G->data[j];
                        mean_dh += dh;
                        mean_dh_h += dh * (*xhat)[r * d + j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gy[r * d + j] * G->data[j];
                        gx[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
                    }
                }
            }
        });
    }
    return y;
}

Tensor l2_normalize(const Tensor& x, double eps) {
    const std::size_t d = x.dim(-1);
    const std::size_t rows = x.numel() / d;
    const auto in = x.data();
    auto norms = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += in[r * d + j] * in[r * d + j];
        const double n = std::sqrt(ss);
        (*norms)[r] = n;
        const double denom = std::max(n, eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[r * d + j] / denom;
    }
    const bool rec = should_record({&x});
    Tensor y = make_output(x.shape(), std::move(out), rec, "l2_normalize");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("l2_normalize", {&x}, y, [=] {
            auto gx = X->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                const double n = (*norms)[r];
                if (n > eps) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += Y->grad[r * d + j] * Y->data[r * d + j];
                    for (std::size_t j = 0; j < d; ++j) {
                        gx[r * d + j] += (Y->grad[r * d + j] - Y->data[r * d + j] * dot) / n;
                    }
                } else {
                    for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += Y->grad[r * d + j] / eps;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
    std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
    std::size_t patch() const { return cin * kh * kw; }
    std::size_t pixels() const { return oh * ow; }
};

// cols[(c*kh + ky)*kw + kx][oy*ow + ox] for one image.
void im2col(const ConvGeometry& g, const double* img, double* cols) {
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* dst = cols + ((c * g.kh + ky) * g.kw + kx) * g.pixels();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                            ix < static_cast<long>(g.w);
                        dst[oy * g.ow + ox] =
                            inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)]
                                   : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* img) {
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* src = cols + ((c * g.kh + ky) * g.kw + kx) * g.pixels();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                        img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                            src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t padding) {
    if (x.rank() != 3 && x.rank() != 4) throw DimensionError("conv2d: input must be [C,H,W] or [B,C,H,W]");
    if (w.rank() != 4) throw DimensionError("conv2d: weight must be [O,C,kh,kw]");
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    const bool batched = x.rank() == 4;
    ConvGeometry g{};
    g.batch = batched ? x.dim(0) : 1;
    g.cin = x.dim(-3);
    g.h = x.dim(-2);
    g.w = x.dim(-1);
    g.cout = w.dim(0);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.stride = stride;
    g.pad = padding;
    if (w.dim(1) != g.cin) {
        throw DimensionError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                             std::to_string(g.cin));
    }
    if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
        throw DimensionError("conv2d: kernel larger than padded input");
    }
    if (bias.defined() && bias.shape() != Shape{g.cout}) throw DimensionError("conv2d: bias must be [O]");
    g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
    g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

    const std::size_t P = g.patch(), S = g.pixels();
    auto cols = std::make_shared<std::vector<double>>(g.batch * P * S);
    const double* X = x.data().data();
    const double* W = w.data().data();
    std::vector<double> out(g.batch * g.cout * S, 0.0);
    for (std::size_t b = 0; b < g.batch; ++b) {
        double* cb = cols->data() + b * P * S;
        im2col(g, X + b * g.cin * g.h * g.w, cb);
        double* ob = out.data() + b * g.cout * S;
        for (std::size_t o = 0; o < g.cout; ++o) {
            double* orow = ob + o * S;
            if (bias.defined()) std::fill(orow, orow + S, bias[o]);
            for (std::size_t p = 0; p < P; ++p) {
                const double wv = W[o * P + p];
                const double* crow = cb + p * S;
                for (std::size_t s = 0; s < S; ++s) orow[s] += wv * crow[s];
            }
        }
    }
    Shape out_shape = batched ? Shape{g.batch, g.cout, g.oh, g.ow} : Shape{g.cout, g.oh, g.ow};
    const bool rec = should_record({&x, &w, &bias});
    Tensor y = make_output(std::move(out_shape), std::move(out), rec, "conv2d");
    if (rec) {
        TensorImpl* Xi = x.impl().get();
        TensorImpl* Wi = w.impl().get();
        TensorImpl* Bi = bias.defined() ? bias.impl().get() : nullptr;
        TensorImpl* Yi = y.impl().get();
        record("conv2d", {&x, &w, &bias}, y, [=] {
            const double* G = Yi->grad.data();
            if (Wi->requires_grad) {
                double* GW = Wi->grad_buffer().data();
                for (std::size_t b = 0; b < g.batch; ++b) {
                    const double* cb = cols->data() + b * P * S;
                    const double* gb = G + b * g.cout * S;
                    for (std::size_t o = 0; o < g.cout; ++o) {
                        for (std::size_t p = 0; p < P; ++p) {
                            double acc = 0.0;
                            for (std::size_t s = 0; s < S; ++s) acc += gb[o * S + s] * cb[p * S + s];
                            GW[o * P + p] += acc;
                        }
                    }
                }
            }
            if (Bi != nullptr && Bi->requires_grad) {
                auto gbias = Bi->grad_buffer();
                for (std::size_t b = 0; b < g.batch; ++b) {
                    for (std::size_t o = 0; o < g.cout; ++o) {
                        double acc = 0.0;
                        for (std::size_t s = 0; s < S; ++s) acc += G[(b * g.cout + o) * S + s];
                        gbias[o] += acc;
                    }
                }
            }
            if (Xi->requires_grad) {
                double* GX = Xi->grad_buffer().data();
                std::vector<double> dcols(P * S);
                for (std::size_t b = 0; b < g.batch; ++b) {
                    std::fill(dcols.begin(), dcols.end(), 0.0);
                    const double* gb = G + b * g.cout * S;
                    for (std::size_t o = 0; o < g.cout; ++o) {
                        for (std::size_t p = 0; p < P; ++p) {
                            const double wv = Wi->data[o * P + p];
                            double* drow = dcols.data() + p * S;
                            for (std::size_t s = 0; s < S; ++s) drow[s] += wv * gb[o * S + s];
                        }
                    }
                    col2im_add(g, dcols.data(), GX + b * g.cin * g.h * g.w);
                }
            }
        });
    }
    return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
    return conv2d(x, w, Tensor{}, stride, padding);
}

// ---------------------------------------------------------------------------
// Indexing

Tensor select(const Tensor& x, int axis, std::size_t index) {
    const std::size_t ax = norm_axis(x, axis);
    const AxisSplit s = split_at(x.shape(), ax);
    if (index >= s.length) throw DimensionError("select: index out of range");
    const auto in = x.data();
    std::vector<double> out(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(in.data() + (o * s.length + index) * s.inner, s.inner, out.data() + o * s.inner);
    }
    const bool rec = should_record({&x});
    Tensor y = make_output(drop_axis(x.shape(), ax), std::move(out), rec, "select");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("select", {&x}, y, [X, Y, s, index] {
            auto gx = X->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    gx[(o * s.length + index) * s.inner + i] += Y->grad[o * s.inner + i];
                }
            }
        });
    }
    return y;
}

Tensor narrow(const Tensor& x, int axis, std::size_t start, std::size_t length) {
    const std::size_t ax = norm_axis(x, axis);
    const AxisSplit s = split_at(x.shape(), ax);
    if (length == 0 || start + length > s.length) throw DimensionError("narrow: range out of bounds");
    const auto in = x.data();
    std::vector<double> out(s.outer * length * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(in.data() + (o * s.length + start) * s.inner, length * s.inner,
                    out.data() + o * length * s.inner);
    }
    Shape shape = x.shape();
    shape[ax] = length;
    const bool rec = should_record({&x});
    Tensor y = make_output(std::move(shape), std::move(out), rec, "narrow");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("narrow", {&x}, y, [X, Y, s, start, length] {
            auto gx = X->grad_buffer();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < length * s.inner; ++i) {
                    gx[(o * s.length + start) * s.inner + i] += Y->grad[o * length * s.inner + i];
                }
            }
        });
    }
    return y;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const std::size_t ax = norm_axis(parts[0], axis);
    Shape shape = parts[0].shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != shape.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i != ax && p.shape()[i] != shape[i]) throw DimensionError("concat: shape mismatch");
        }
        total += p.shape()[ax];
    }
    shape[ax] = total;
    const AxisSplit s = split_at(shape, ax);
    std::vector<double> out(numel_of(shape));
    std::size_t offset = 0;
    bool rec = false;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[ax];
        const auto in = p.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(in.data() + o * len * s.inner, len * s.inner, out.data() + (o * total + offset) * s.inner);
        }
        offset += len;
        rec = rec || should_record({&p});
    }
    Tensor y = make_output(std::move(shape), std::move(out), rec, "concat");
    if (rec) {
        std::vector<TensorImpl*> inputs;
        for (const auto& p : parts) inputs.push_back(p.impl().get());
        TensorImpl* Y = y.impl().get();
        Tape::Node node;
        node.name = "concat";
        for (const auto& p : parts) node.inputs.push_back(p.impl());
        node.output = y.impl();
        node.backward = [inputs, Y, s, ax, total] {
            std::size_t off = 0;
            for (TensorImpl* in : inputs) {
                const std::size_t len = in->shape[ax];
                if (in->requires_grad) {
                    auto gi = in->grad_buffer();
                    for (std::size_t o = 0; o < s.outer; ++o) {
                        for (std::size_t i = 0; i < len * s.inner; ++i) {
                            gi[o * len * s.inner + i] += Y->grad[(o * total + off) * s.inner + i];
                        }
                    }
                }
                off += len;
            }
        };
        Tape::active()->record(std::move(node));
    }
    return y;
}

Tensor expand(const Tensor& x, std::size_t count) {
    if (count == 0) throw DimensionError("expand: count must be positive");
    Shape shape{count};
    shape.insert(shape.end(), x.shape().begin(), x.shape().end());
    const auto in = x.data();
    std::vector<double> out;
    out.reserve(count * in.size());
    for (std::size_t c = 0; c < count; ++c) out.insert(out.end(), in.begin(), in.end());
    const bool rec = should_record({&x});
    Tensor y = make_output(std::move(shape), std::move(out), rec, "expand");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("expand", {&x}, y, [X, Y, count] {
            auto gx = X->grad_buffer();
            const std::size_t n = gx.size();
            for (std::size_t c = 0; c < count; ++c) {
                for (std::size_t i = 0; i < n; ++i) gx[i] += Y->grad[c * n + i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Losses

Tensor nll_loss(const Tensor& log_probs, std::span<const std::size_t> labels) {
    if (log_probs.rank() != 2) throw DimensionError("nll_loss: expects [B, C] log-probabilities");
    const std::size_t rows = log_probs.dim(0), classes = log_probs.dim(1);
    if (labels.size() != rows) throw DimensionError("nll_loss: label count differs from batch size");
    auto lab = std::make_shared<std::vector<std::size_t>>(labels.begin(), labels.end());
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if ((*lab)[r] >= classes) {
            throw std::out_of_range("nll_loss: label " + std::to_string((*lab)[r]) + " outside [0, " +
                                    std::to_string(classes) + ")");
        }
        acc -= log_probs[r * classes + (*lab)[r]];
    }
    const bool rec = should_record({&log_probs});
    Tensor y = make_output({1}, {acc / static_cast<double>(rows)}, rec, "nll_loss");
    if (rec) {
        TensorImpl* X = log_probs.impl().get();
        TensorImpl* Y = y.impl().get();
        record("nll_loss", {&log_probs}, y, [X, Y, lab, rows, classes] {
            auto gx = X->grad_buffer();
            const double g = Y->grad[0] / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) gx[r * classes + (*lab)[r]] -= g;
        });
    }
    return y;
}

Tensor dropout(const Tensor& x, double p, Prng& prng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
    if (p == 0.0) return x;
    const double keep = 1.0 / (1.0 - p);
    auto mask = std::make_shared<std::vector<double>>(x.numel());
    for (auto& m : *mask) m = prng.bernoulli(p) ? 0.0 : keep;
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * (*mask)[i];
    const bool rec = should_record({&x});
    Tensor y = make_output(x.shape(), std::move(out), rec, "dropout");
    if (rec) {
        TensorImpl* X = x.impl().get();
        TensorImpl* Y = y.impl().get();
        record("dropout", {&x}, y, [X, Y, mask] {
            auto gx = X->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += Y->grad[i] * (*mask)[i];
        });
    }
    return y;
}

}  // namespace padkit
