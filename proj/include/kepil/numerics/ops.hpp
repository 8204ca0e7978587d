#pragma once

#include <cstdint>
#include <vector>

#include "kepil/numerics/graph.hpp"

// Differentiable operations on Graph variables. Every op validates shapes and
// throws ShapeError on mismatch.
namespace kepil::num::ops {

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var add_row(Var m, Var row);  // m[r x c] + row[1 x c] broadcast over rows
Var scale(Var a, double c);
Var sum(Var a);   // -> 1x1
Var mean(Var a);  // -> 1x1
Var reshape(Var a, Shape shape);
Var transpose(Var a);

Var gelu(Var a);  // tanh approximation
Var sigmoid(Var a);
Var tanh(Var a);
Var log(Var a);

// Row-wise layer norm with learned gain and bias (both 1 x cols).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

Var softmax_rows(Var m);

// Each row scaled to unit L2 norm. A zero row is a DomainError.
Var l2_normalize_rows(Var x);

// Mean over rows of -log softmax(logits[r])[target[r]]. Entries with
// exclude[r][c] == true are left out of the normaliser (never the target).
Var cross_entropy_rows(Var logits, const std::vector<std::size_t>& targets,
                       const std::vector<std::vector<bool>>& exclude = {});

// Scalar cosine similarity of two 1 x n rows.
Var cosine_sim(Var a, Var b);

Var dropout(Var v, double p, std::uint64_t seed);

Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
// Rows of table selected by index (embedding lookup); gradient scatter-adds.
Var gather_rows(Var table, const std::vector<std::size_t>& index);
// out = x clamped elementwise into [lo, hi]; gradient is zero where clamped.
Var clamp(Var x, double lo, double hi);

// One attention block: out rows = softmax(Q[q] K[k]^T * scale) V[k] for the
// query row range q and key/value row range k. key_mask, when non-empty,
// marks which of the block's key rows may be attended to.
struct AttentionBlock {
    std::size_t q_begin = 0;
    std::size_t q_count = 0;
    std::size_t k_begin = 0;
    std::size_t k_count = 0;
    std::vector<bool> key_mask;
};

// Output stacks the blocks' results in block order (sum of q_count rows).
// Blocks may share query rows; their gradients add up.
Var attention(Var q, Var k, Var v, const std::vector<AttentionBlock>& blocks, double scale);

// Plain-value version of a single block, returning the attention weights as
// well. Shares the kernel with the graph op.
struct AttentionResult {
    Tensor output;
    Tensor weights;
};
AttentionResult attention_values(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                                 const std::vector<bool>& key_mask = {});

} // namespace kepil::num::ops
