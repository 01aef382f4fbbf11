#pragma once

#include "tinyvlm/tensor.hpp"

#include <functional>
#include <vector>

namespace tinyvlm::ops {

// Grids are rank-3 tensors laid out H x W x C. Convolutions are
// cross-correlations (no kernel flip) and always carry a bias.

enum class OpKind {
    PointwiseConv,
    DepthwiseConv,
    Gelu,
    AvgPool,
    Linear,
    SoftmaxCrossEntropy,
};

/// One recorded forward call, replayable as a vector-Jacobian product.
struct VJPRecord {
    OpKind kind{};
    std::vector<Tensor> inputs;       // saved forward inputs, op-specific order
    size_t stride = 1;
    size_t zero_pad = 0;
    size_t rho = 1;
    std::vector<int64_t> targets;     // SoftmaxCrossEntropy only
    std::vector<size_t> output_shape; // {} for scalar outputs
};

// 1x1 convolution: out[h,w,co] = sum_ci w[co,ci] * x[h,w,ci] + b[co]
Tensor conv2d_pointwise(const Tensor& x, const Tensor& w, const Tensor& b,
                        VJPRecord* rec = nullptr);

// channel-separable k x k cross-correlation with zero padding;
// w is [C,k,k], H' = floor((H + 2*zero_pad - k)/stride) + 1
Tensor conv2d_depthwise(const Tensor& x, const Tensor& w, const Tensor& b,
                        size_t stride, size_t zero_pad, VJPRecord* rec = nullptr);

// exact GELU, x * Phi(x) with the erf-based normal CDF
Tensor gelu(const Tensor& x, VJPRecord* rec = nullptr);

// non-overlapping rho x rho mean per channel; rho must divide H and W
Tensor avgpool2d(const Tensor& x, size_t rho, VJPRecord* rec = nullptr);

// affine map on rows: out[n,o] = sum_i w[o,i] * x[n,i] + b[o]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b,
              VJPRecord* rec = nullptr);

Tensor softmax_rows(const Tensor& logits);

// mean negative log-likelihood of the target ids under row-softmax
double cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                     VJPRecord* rec = nullptr);

Tensor add(const Tensor& a, const Tensor& b);

// Hand-written VJPs. `upstream` carries the output shape.
struct ConvGrads { Tensor dx, dw, db; };
ConvGrads conv2d_pointwise_vjp(const Tensor& x, const Tensor& w, const Tensor& upstream);
ConvGrads conv2d_depthwise_vjp(const Tensor& x, const Tensor& w, const Tensor& upstream,
                               size_t stride, size_t zero_pad);
Tensor gelu_vjp(const Tensor& x, const Tensor& upstream);
Tensor avgpool2d_vjp(const std::vector<size_t>& input_shape, size_t rho,
                     const Tensor& upstream);
struct LinearGrads { Tensor dx, dw, db; };
LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& upstream);
// gradient of mean NLL w.r.t. logits, scaled by a scalar upstream
Tensor cross_entropy_vjp(const Tensor& logits, const std::vector<int64_t>& targets,
                         double upstream);

// Replays the record; grads come back in forward-input order
// ([dx, dw, db] for convs and linear, [dx] for gelu/avgpool, [dlogits] for
// softmax+cross-entropy, whose upstream is a single-element tensor).
std::vector<Tensor> backward(const VJPRecord& rec, const Tensor& upstream);

// central differences, (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double eps);

double gelu_scalar(double x);
double gelu_grad_scalar(double x);

}  // namespace tinyvlm::ops
