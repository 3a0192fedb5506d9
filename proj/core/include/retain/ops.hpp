#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "retain/autograd.hpp"
#include "retain/tensor.hpp"

namespace retain::ops {

using ag::Var;

// Deterministic Gaussian init: mean 0, stddev `scale`, fully determined by
// (shape, seed, scale).
Tensor seeded_randn(const std::vector<int64_t>& shape, uint64_t seed, double scale);

// a[m,k] * b[k,n] -> [m,n]; inner products accumulate in double.
Var matmul(const Var& a, const Var& b);

// Naive cross-correlation. x[N,C,H,W], kernel[F,C,kh,kw]; output size must
// be integral: H' = (H + 2*pad - kh)/stride + 1.
Var conv2d(const Var& x, const Var& kernel, int stride, int pad);

// Binary ops accept identical shapes, or a channel vector [C] on the right
// against [N,C] / [N,C,H,W] on the left. Nothing broader.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);  // errors on any zero divisor
Var relu(const Var& x);                  // grad 0 at exactly 0
Var scale(const Var& x, float c);

Var sum(const Var& x);  // -> scalar
Var reshape(const Var& x, std::vector<int64_t> new_shape);

// 1/sqrt(v + eps) elementwise; the normalizer denominator of batch norm.
Var rsqrt_shift(const Var& v, float eps);

// Mean and biased variance (divide by count) over `axes`; remaining axes keep
// their order. For [N,C] pass {0}; for [N,C,H,W] pass {0,2,3}.
std::pair<Var, Var> moments(const Var& x, const std::vector<int>& axes);

// Mean over the batch of -log softmax(logits)[label]; stabilized by
// max-subtraction; backward is (softmax - onehot)/N.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

// Plain (non-differentiable) row softmax for predictions.
Tensor softmax_rows(const Tensor& logits);

}  // namespace retain::ops
