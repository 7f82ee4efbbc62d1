// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels used by the encoder, its backward pass and relevance
// propagation. The functions in `headlrp` parallelise over output rows with
// OpenMP; `headlrp::serial` holds the straight-loop reference versions that
// the tests and the benchmark compare against. Both accumulate in the same
// order, so their results are bitwise identical.
#pragma once

#include <cstddef>
#include <vector>

#include "headlrp/tensor.hpp"

namespace headlrp {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& x);
std::vector<std::size_t> argmax_rows(const Tensor& a);

double gelu(double x);
double gelu_derivative(double x);

Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Adds a length-c bias to every row of an r x c tensor.
Tensor add_row_bias(const Tensor& a, const Tensor& bias);

/// Columns [first, first + count) of a rank-2 tensor.
Tensor column_block(const Tensor& a, std::size_t first, std::size_t count);
void set_column_block(Tensor& a, std::size_t first, const Tensor& block);

namespace serial {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

}  // namespace serial

}  // namespace headlrp
