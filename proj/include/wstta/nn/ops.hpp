#pragma once

#include <cstddef>
#include <vector>

#include "wstta/nn/tape.hpp"
#include "wstta/nn/tensor.hpp"

namespace wstta::nn {

// Plain kernels over tensors. The tape ops below are thin wrappers that add
// a backward rule; both share these so there is a single forward path.
namespace kernel {

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor softmax_rows(const Tensor& m);
Tensor softmax_cols(const Tensor& m);
Tensor sigmoid(const Tensor& x);

}  // namespace kernel

/// input [N,C,H,W], weights [F,C,kH,kW], bias [F] -> [N,F,H',W'].
Var conv2d(Tape& tape, Var input, Var weights, Var bias, std::size_t stride, std::size_t padding);

Var relu(Tape& tape, Var x);

/// 2x2 max pooling with stride 2 over [N,C,H,W]; odd trailing rows/cols are dropped.
Var maxpool2(Tape& tape, Var x);

/// x [N,in], weights [out,in], bias [out] -> [N,out].
Var dense(Tape& tape, Var x, Var weights, Var bias);

Var softmax_rows(Tape& tape, Var m);
Var softmax_cols(Tape& tape, Var m);
Var sigmoid(Tape& tape, Var x);

Var reshape(Tape& tape, Var x, Shape shape);

/// out.flat[i] = x.flat[indices[i]], shaped as `shape`. Backward scatters.
Var gather(Tape& tape, Var x, std::vector<std::size_t> indices, Shape shape);

/// Columns [begin, end) of a matrix.
Var slice_cols(Tape& tape, Var m, std::size_t begin, std::size_t end);

/// [K] values and a column per row -> [K,cols] matrix with value k at
/// (k, columns[k]) and zero elsewhere.
Var place_in_columns(Tape& tape, Var values, std::vector<std::size_t> columns, std::size_t cols);

Var mul(Tape& tape, Var a, Var b);
Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var x, double factor);

/// Sum over the row axis of a matrix: [K,L] -> [L].
Var sum_rows(Tape& tape, Var m);
Var sum(Tape& tape, Var x);

/// Mean binary cross-entropy on logits over the entries with weight > 0.
/// Returns the weighted sum divided by the total weight (0 when no weight).
Var bce_with_logits(Tape& tape, Var logits, std::vector<double> targets, std::vector<double> weights);

/// Mean softmax cross-entropy over rows whose label is >= 0; label -1 ignores the row.
Var softmax_cross_entropy(Tape& tape, Var logits, std::vector<int> labels);

/// Mean per-entry binary cross-entropy on probabilities clamped to
/// [clamp, 1-clamp]; entries outside the clamp get zero gradient.
Var binary_cross_entropy(Tape& tape, Var probs, std::vector<double> targets, double clamp);

/// Sum of smooth-L1 over weighted entries divided by `normalizer`.
Var smooth_l1(Tape& tape, Var pred, std::vector<double> targets, std::vector<double> weights, double beta,
              double normalizer);

}  // namespace wstta::nn
