#pragma once

#include <cstddef>
#include <span>

#include "mtunet/graph.hpp"

/// Differentiable kernels. Every function records one node on the graph and
/// throws DataError on shape violations.
namespace mtunet::ops {

/// input [C_in,H,W], weight [C_out,C_in,kh,kw] -> [C_out,H',W'] with
/// H' = (H + 2*pad - kh)/stride + 1. Zero padding.
Var conv2d(Graph& g, Var input, Var weight, std::size_t stride, std::size_t pad);
/// As above with a per-output-channel bias [C_out].
Var conv2d(Graph& g, Var input, Var weight, Var bias, std::size_t stride, std::size_t pad);

/// input [n,d_in] * weight [d_in,d_out] + bias [d_out].
Var linear(Graph& g, Var input, Var weight, Var bias);
Var matmul(Graph& g, Var a, Var b);
Var transpose(Graph& g, Var a);
Var scale(Graph& g, Var a, double factor);
/// Columns [begin, end) of a rank-2 tensor.
Var slice_cols(Graph& g, Var a, std::size_t begin, std::size_t end);
Var concat_cols(Graph& g, std::span<const Var> parts);

/// Row-wise softmax with max subtraction.
Var softmax_rows(Graph& g, Var input);
/// Per-row normalisation over the last axis (population variance).
Var layer_norm(Graph& g, Var input, Var gain, Var shift, double eps);
/// Per-channel normalisation of [C,H,W] over the spatial axes, then a
/// per-channel affine map. Statistics are per sample.
Var instance_norm(Graph& g, Var input, Var gain, Var shift, double eps);

Var relu(Graph& g, Var x);
Var sigmoid(Graph& g, Var x);
Var add(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
/// Concatenates [C_i,H,W] tensors along the channel axis, in argument order.
Var concat_channels(Graph& g, std::span<const Var> parts);

/// 2x2 stride-2 max pooling. Ties go to the first element in row-major
/// order, which alone receives the gradient.
Var max_pool2d(Graph& g, Var x);
/// Bilinear 2x upsampling, half-pixel centres (align_corners = false).
Var upsample_bilinear2x(Graph& g, Var x);
/// Averages over bins [floor(i*H/out), ceil((i+1)*H/out)).
Var adaptive_avg_pool(Graph& g, Var x, std::size_t out_h, std::size_t out_w);

Var sum(Graph& g, Var x);
Var reshape(Graph& g, Var x, Shape shape);

/// [C,H,W] -> [N, C*P*P]: non-overlapping PxP patches in row-major grid
/// order, each flattened as (channel, row, col).
Var patchify(Graph& g, Var x, std::size_t patch);
/// Inverse of patchify.
Var unpatchify(Graph& g, Var tokens, std::size_t channels, std::size_t height, std::size_t width,
               std::size_t patch);

}  // namespace mtunet::ops
