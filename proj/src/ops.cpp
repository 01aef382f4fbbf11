#include "tinyvlm/ops.hpp"

#include <cmath>
#include <thread>

namespace tinyvlm::ops {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require_rank(const Tensor& t, size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(what) + " must be rank-" +
                                    std::to_string(rank) + ", got shape " +
                                    shape_str(t.shape()));
    }
}

// out[r][o] = dot(w[o], x[r]) + b[o], row-block tiled so the weight matrix is
// streamed once per block instead of once per row. Large calls split the
// output channels across two threads; each output element stays a fixed-order
// reduction computed by exactly one thread, so results are bitwise
// deterministic regardless of the split.
void affine_rows(const double* __restrict x, size_t rows, size_t in_dim,
                 const double* __restrict w, const double* __restrict b, size_t out_dim,
                 double* __restrict out) {
    constexpr size_t kRowBlock = 24;
    auto run = [=](size_t o0, size_t o1) {
        for (size_t rb = 0; rb < rows; rb += kRowBlock) {
            size_t re = rb + kRowBlock < rows ? rb + kRowBlock : rows;
            for (size_t o = o0; o < o1; ++o) {
                const double* wr = w + o * in_dim;
                for (size_t r = rb; r < re; ++r) {
                    const double* xr = x + r * in_dim;
                    double a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0;
                    size_t i = 0;
                    for (; i + 8 <= in_dim; i += 8) {
                        a0 += wr[i] * xr[i];
                        a1 += wr[i + 1] * xr[i + 1];
                        a2 += wr[i + 2] * xr[i + 2];
                        a3 += wr[i + 3] * xr[i + 3];
                        a4 += wr[i + 4] * xr[i + 4];
                        a5 += wr[i + 5] * xr[i + 5];
                        a6 += wr[i + 6] * xr[i + 6];
                        a7 += wr[i + 7] * xr[i + 7];
                    }
                    for (; i < in_dim; ++i) a0 += wr[i] * xr[i];
                    out[r * out_dim + o] = (((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7))) + b[o];
                }
            }
        }
    };
    constexpr size_t kParallelThreshold = 16u << 20;  // MACs
    if (out_dim >= 2 && rows * in_dim * out_dim >= kParallelThreshold) {
        const size_t mid = out_dim / 2;
        std::thread worker(run, 0, mid);
        run(mid, out_dim);
        worker.join();
    } else {
        run(0, out_dim);
    }
}

}  // namespace

Tensor conv2d_pointwise(const Tensor& x, const Tensor& w, const Tensor& b, VJPRecord* rec) {
    require_rank(x, 3, "conv2d_pointwise input");
    require_rank(w, 2, "conv2d_pointwise weight");
    require_rank(b, 1, "conv2d_pointwise bias");
    const size_t h = x.extent(0), wd = x.extent(1), cin = x.extent(2);
    const size_t cout = w.extent(0);
    if (w.extent(1) != cin) {
        throw std::invalid_argument("conv2d_pointwise: weight shape " + shape_str(w.shape()) +
                                    " does not match input shape " + shape_str(x.shape()));
    }
    if (b.extent(0) != cout) {
        throw std::invalid_argument("conv2d_pointwise: bias shape " + shape_str(b.shape()) +
                                    " does not match weight shape " + shape_str(w.shape()));
    }
    Tensor out({h, wd, cout});
    affine_rows(x.data(), h * wd, cin, w.data(), b.data(), cout, out.data());
    if (rec) {
        *rec = VJPRecord{OpKind::PointwiseConv, {x, w, b}, 1, 0, 1, {}, out.shape()};
    }
    return out;
}

Tensor conv2d_depthwise(const Tensor& x, const Tensor& w, const Tensor& b,
                        size_t stride, size_t zero_pad, VJPRecord* rec) {
    require_rank(x, 3, "conv2d_depthwise input");
    require_rank(w, 3, "conv2d_depthwise weight");
    require_rank(b, 1, "conv2d_depthwise bias");
    const size_t h = x.extent(0), wd = x.extent(1), c = x.extent(2);
    const size_t k = w.extent(1);
    if (w.extent(0) != c || w.extent(2) != k) {
        throw std::invalid_argument("conv2d_depthwise: weight shape " + shape_str(w.shape()) +
                                    " does not match input shape " + shape_str(x.shape()));
    }
    if (b.extent(0) != c) {
        throw std::invalid_argument("conv2d_depthwise: bias shape " + shape_str(b.shape()) +
                                    " does not match channel count " + std::to_string(c));
    }
    if (stride == 0) throw std::invalid_argument("conv2d_depthwise: stride must be positive");
    if (k > h + 2 * zero_pad || k > wd + 2 * zero_pad) {
        throw std::invalid_argument("conv2d_depthwise: kernel shape " + shape_str(w.shape()) +
                                    " larger than padded input " + shape_str(x.shape()) +
                                    " (zero_pad " + std::to_string(zero_pad) + ")");
    }
    const size_t oh = (h + 2 * zero_pad - k) / stride + 1;
    const size_t ow = (wd + 2 * zero_pad - k) / stride + 1;
    Tensor out({oh, ow, c});
    const double* xp = x.data();
    const double* wp = w.data();
    double* op = out.data();
    for (size_t r = 0; r < oh; ++r) {
        for (size_t s = 0; s < ow; ++s) {
            double* orow = op + (r * ow + s) * c;
            for (size_t ch = 0; ch < c; ++ch) orow[ch] = b[ch];
            for (size_t i = 0; i < k; ++i) {
                const long hi = static_cast<long>(r * stride + i) - static_cast<long>(zero_pad);
                if (hi < 0 || hi >= static_cast<long>(h)) continue;
                for (size_t j = 0; j < k; ++j) {
                    const long wj = static_cast<long>(s * stride + j) - static_cast<long>(zero_pad);
                    if (wj < 0 || wj >= static_cast<long>(wd)) continue;
                    const double* xrow = xp + (static_cast<size_t>(hi) * wd + static_cast<size_t>(wj)) * c;
                    for (size_t ch = 0; ch < c; ++ch) {
                        orow[ch] += wp[(ch * k + i) * k + j] * xrow[ch];
                    }
                }
            }
        }
    }
    if (rec) {
        *rec = VJPRecord{OpKind::DepthwiseConv, {x, w, b}, stride, zero_pad, 1, {}, out.shape()};
    }
    return out;
}

double gelu_scalar(double x) {
    return x * 0.5 * (1.0 + std::erf(x * kInvSqrt2));
}

double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

Tensor gelu(const Tensor& x, VJPRecord* rec) {
    Tensor out(x.shape());
    const double* xp = x.data();
    double* op = out.data();
    for (size_t i = 0; i < x.numel(); ++i) op[i] = gelu_scalar(xp[i]);
    if (rec) *rec = VJPRecord{OpKind::Gelu, {x}, 1, 0, 1, {}, out.shape()};
    return out;
}

Tensor avgpool2d(const Tensor& x, size_t rho, VJPRecord* rec) {
    require_rank(x, 3, "avgpool2d input");
    if (rho == 0) throw std::invalid_argument("avgpool2d: rho must be positive");
    const size_t h = x.extent(0), wd = x.extent(1), c = x.extent(2);
    if (h % rho != 0 || wd % rho != 0) {
        throw std::invalid_argument("avgpool2d: rho " + std::to_string(rho) +
                                    " does not divide input shape " + shape_str(x.shape()));
    }
    const size_t oh = h / rho, ow = wd / rho;
    const double inv = 1.0 / static_cast<double>(rho * rho);
    Tensor out({oh, ow, c});
    for (size_t r = 0; r < oh; ++r) {
        for (size_t s = 0; s < ow; ++s) {
            double* orow = out.data() + (r * ow + s) * c;
            for (size_t i = 0; i < rho; ++i) {
                const double* xrow = x.data() + ((r * rho + i) * wd + s * rho) * c;
                for (size_t j = 0; j < rho; ++j) {
                    for (size_t ch = 0; ch < c; ++ch) orow[ch] += xrow[j * c + ch];
                }
            }
            for (size_t ch = 0; ch < c; ++ch) orow[ch] *= inv;
        }
    }
    if (rec) *rec = VJPRecord{OpKind::AvgPool, {x}, 1, 0, rho, {}, out.shape()};
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, VJPRecord* rec) {
    require_rank(x, 2, "linear input");
    require_rank(w, 2, "linear weight");
    require_rank(b, 1, "linear bias");
    const size_t n = x.extent(0), din = x.extent(1), dout = w.extent(0);
    if (w.extent(1) != din) {
        throw std::invalid_argument("linear: weight shape " + shape_str(w.shape()) +
                                    " does not match input shape " + shape_str(x.shape()));
    }
    if (b.extent(0) != dout) {
        throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()) +
                                    " does not match weight shape " + shape_str(w.shape()));
    }
    Tensor out({n, dout});
    affine_rows(x.data(), n, din, w.data(), b.data(), dout, out.data());
    if (rec) *rec = VJPRecord{OpKind::Linear, {x, w, b}, 1, 0, 1, {}, out.shape()};
    return out;
}

Tensor softmax_rows(const Tensor& logits) {
    require_rank(logits, 2, "softmax_rows input");
    const size_t n = logits.extent(0), v = logits.extent(1);
    Tensor out({n, v});
    for (size_t r = 0; r < n; ++r) {
        const double* row = logits.data() + r * v;
        double* orow = out.data() + r * v;
        double m = row[0];
        for (size_t i = 1; i < v; ++i) m = std::max(m, row[i]);
        double sum = 0;
        for (size_t i = 0; i < v; ++i) {
            orow[i] = std::exp(row[i] - m);
            sum += orow[i];
        }
        const double inv = 1.0 / sum;
        for (size_t i = 0; i < v; ++i) orow[i] *= inv;
    }
    return out;
}

double cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                     VJPRecord* rec) {
    require_rank(logits, 2, "cross_entropy logits");
    const size_t n = logits.extent(0), v = logits.extent(1);
    if (targets.size() != n) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for logits shape " + shape_str(logits.shape()));
    }
    double total = 0;
    for (size_t r = 0; r < n; ++r) {
        const int64_t t = targets[r];
        if (t < 0 || static_cast<size_t>(t) >= v) {
            throw std::invalid_argument("cross_entropy: target id " + std::to_string(t) +
                                        " out of range for vocab " + std::to_string(v));
        }
        const double* row = logits.data() + r * v;
        double m = row[0];
        for (size_t i = 1; i < v; ++i) m = std::max(m, row[i]);
        double sum = 0;
        for (size_t i = 0; i < v; ++i) sum += std::exp(row[i] - m);
        total += m + std::log(sum) - row[static_cast<size_t>(t)];
    }
    if (rec) {
        *rec = VJPRecord{OpKind::SoftmaxCrossEntropy, {logits}, 1, 0, 1, targets, {}};
    }
    return total / static_cast<double>(n);
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("add: shape " + shape_str(a.shape()) +
                                    " does not match shape " + shape_str(b.shape()));
    }
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

static void check_upstream(const Tensor& upstream, const std::vector<size_t>& want,
                           const char* op) {
    if (upstream.shape() != want) {
        throw std::invalid_argument(std::string(op) + ": upstream shape " +
                                    shape_str(upstream.shape()) + " does not match output shape " +
                                    shape_str(want));
    }
}

ConvGrads conv2d_pointwise_vjp(const Tensor& x, const Tensor& w, const Tensor& upstream) {
    const size_t h = x.extent(0), wd = x.extent(1), cin = x.extent(2);
    const size_t cout = w.extent(0);
    check_upstream(upstream, {h, wd, cout}, "conv2d_pointwise_vjp");
    ConvGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({cout})};
    const size_t pixels = h * wd;
    for (size_t p = 0; p < pixels; ++p) {
        const double* urow = upstream.data() + p * cout;
        const double* xrow = x.data() + p * cin;
        double* dxrow = g.dx.data() + p * cin;
        for (size_t co = 0; co < cout; ++co) {
            const double u = urow[co];
            const double* wrow = w.data() + co * cin;
            double* dwrow = g.dw.data() + co * cin;
            for (size_t ci = 0; ci < cin; ++ci) {
                dxrow[ci] += u * wrow[ci];
                dwrow[ci] += u * xrow[ci];
            }
            g.db[co] += u;
        }
    }
    return g;
}

ConvGrads conv2d_depthwise_vjp(const Tensor& x, const Tensor& w, const Tensor& upstream,
                               size_t stride, size_t zero_pad) {
    const size_t h = x.extent(0), wd = x.extent(1), c = x.extent(2);
    const size_t k = w.extent(1);
    const size_t oh = (h + 2 * zero_pad - k) / stride + 1;
    const size_t ow = (wd + 2 * zero_pad - k) / stride + 1;
    check_upstream(upstream, {oh, ow, c}, "conv2d_depthwise_vjp");
    ConvGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({c})};
    for (size_t r = 0; r < oh; ++r) {
        for (size_t s = 0; s < ow; ++s) {
            const double* urow = upstream.data() + (r * ow + s) * c;
            for (size_t ch = 0; ch < c; ++ch) g.db[ch] += urow[ch];
            for (size_t i = 0; i < k; ++i) {
                const long hi = static_cast<long>(r * stride + i) - static_cast<long>(zero_pad);
                if (hi < 0 || hi >= static_cast<long>(h)) continue;
                for (size_t j = 0; j < k; ++j) {
                    const long wj = static_cast<long>(s * stride + j) - static_cast<long>(zero_pad);
                    if (wj < 0 || wj >= static_cast<long>(wd)) continue;
                    const size_t xoff = (static_cast<size_t>(hi) * wd + static_cast<size_t>(wj)) * c;
                    for (size_t ch = 0; ch < c; ++ch) {
                        g.dx[xoff + ch] += urow[ch] * w[(ch * k + i) * k + j];
                        g.dw[(ch * k + i) * k + j] += urow[ch] * x[xoff + ch];
                    }
                }
            }
        }
    }
    return g;
}

Tensor gelu_vjp(const Tensor& x, const Tensor& upstream) {
    check_upstream(upstream, x.shape(), "gelu_vjp");
    Tensor dx(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) dx[i] = upstream[i] * gelu_grad_scalar(x[i]);
    return dx;
}

Tensor avgpool2d_vjp(const std::vector<size_t>& input_shape, size_t rho,
                     const Tensor& upstream) {
    if (input_shape.size() != 3) {
        throw std::invalid_argument("avgpool2d_vjp: input shape " + shape_str(input_shape) +
                                    " must be rank-3");
    }
    const size_t h = input_shape[0], wd = input_shape[1], c = input_shape[2];
    check_upstream(upstream, {h / rho, wd / rho, c}, "avgpool2d_vjp");
    const double inv = 1.0 / static_cast<double>(rho * rho);
    Tensor dx(input_shape);
    const size_t ow = wd / rho;
    for (size_t r = 0; r < h; ++r) {
        for (size_t s = 0; s < wd; ++s) {
            const double* urow = upstream.data() + ((r / rho) * ow + s / rho) * c;
            double* dxrow = dx.data() + (r * wd + s) * c;
            for (size_t ch = 0; ch < c; ++ch) dxrow[ch] = urow[ch] * inv;
        }
    }
    return dx;
}

LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& upstream) {
    const size_t n = x.extent(0), din = x.extent(1), dout = w.extent(0);
    check_upstream(upstream, {n, dout}, "linear_vjp");
    LinearGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({dout})};
    for (size_t r = 0; r < n; ++r) {
        const double* urow = upstream.data() + r * dout;
        const double* xrow = x.data() + r * din;
        double* dxrow = g.dx.data() + r * din;
        for (size_t o = 0; o < dout; ++o) {
            const double u = urow[o];
            const double* wrow = w.data() + o * din;
            double* dwrow = g.dw.data() + o * din;
            for (size_t i = 0; i < din; ++i) {
                dxrow[i] += u * wrow[i];
                dwrow[i] += u * xrow[i];
            }
            g.db[o] += u;
        }
    }
    return g;
}

Tensor cross_entropy_vjp(const Tensor& logits, const std::vector<int64_t>& targets,
                         double upstream) {
    const size_t n = logits.extent(0), v = logits.extent(1);
    Tensor d = softmax_rows(logits);
    const double scale = upstream / static_cast<double>(n);
    for (size_t r = 0; r < n; ++r) {
        double* row = d.data() + r * v;
        row[static_cast<size_t>(targets[r])] -= 1.0;
        for (size_t i = 0; i < v; ++i) row[i] *= scale;
    }
    return d;
}

std::vector<Tensor> backward(const VJPRecord& rec, const Tensor& upstream) {
    switch (rec.kind) {
        case OpKind::PointwiseConv: {
            check_upstream(upstream, rec.output_shape, "backward(pointwise)");
            ConvGrads g = conv2d_pointwise_vjp(rec.inputs[0], rec.inputs[1], upstream);
            return {std::move(g.dx), std::move(g.dw), std::move(g.db)};
        }
        case OpKind::DepthwiseConv: {
            check_upstream(upstream, rec.output_shape, "backward(depthwise)");
            ConvGrads g = conv2d_depthwise_vjp(rec.inputs[0], rec.inputs[1], upstream,
                                               rec.stride, rec.zero_pad);
            return {std::move(g.dx), std::move(g.dw), std::move(g.db)};
        }
        case OpKind::Gelu:
            check_upstream(upstream, rec.output_shape, "backward(gelu)");
            return {gelu_vjp(rec.inputs[0], upstream)};
        case OpKind::AvgPool:
            check_upstream(upstream, rec.output_shape, "backward(avgpool)");
            return {avgpool2d_vjp(rec.inputs[0].shape(), rec.rho, upstream)};
        case OpKind::Linear: {
            check_upstream(upstream, rec.output_shape, "backward(linear)");
            LinearGrads g = linear_vjp(rec.inputs[0], rec.inputs[1], upstream);
            return {std::move(g.dx), std::move(g.dw), std::move(g.db)};
        }
        case OpKind::SoftmaxCrossEntropy: {
            if (upstream.numel() != 1) {
                throw std::invalid_argument(
                    "backward(cross_entropy): upstream shape " + shape_str(upstream.shape()) +
                    " does not match scalar output shape []");
            }
            return {cross_entropy_vjp(rec.inputs[0], rec.targets, upstream[0])};
        }
    }
    throw std::invalid_argument("backward: unknown op kind");
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double eps) {
    if (!(eps > 0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

}  // namespace tinyvlm::ops
