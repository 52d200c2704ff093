#pragma once

#include <vector>

#include "gad/tape.hpp"

namespace gad {

// Per-channel normalization state. Batch variance is the biased (1/N)
// estimate, both for normalization and for the running update
//   running <- (1-momentum)*running + momentum*batch.
struct BatchNormState {
  Arr running_mean;
  Arr running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState make(Index channels, double momentum = 0.1,
                             double eps = 1e-5) {
    BatchNormState s;
    s.running_mean = Arr::Zero(channels);
    s.running_var = Arr::Ones(channels);
    s.momentum = momentum;
    s.eps = eps;
    return s;
  }
};

struct MaxOut {
  Tensor values;
  std::vector<int32_t> argmax;  // winner index per reduced slice
};

enum class AttnBias { none, contextual, naive_pos };

Tensor matmul(const Ctx& ctx, const Tensor& a, const Tensor& b);
Tensor transpose(const Ctx& ctx, const Tensor& a);

Tensor add(const Ctx& ctx, const Tensor& a, const Tensor& b);
Tensor sub(const Ctx& ctx, const Tensor& a, const Tensor& b);
Tensor hadamard(const Ctx& ctx, const Tensor& a, const Tensor& b);
Tensor scale(const Ctx& ctx, const Tensor& a, double c);

Tensor leaky_relu(const Ctx& ctx, const Tensor& a, double slope);
Tensor tanh_act(const Ctx& ctx, const Tensor& a);
Tensor sigmoid_act(const Ctx& ctx, const Tensor& a);

// Affine map over the last axis; leading axes are carried through unchanged
// (the shared-MLP convention: one weight matrix applied to every row).
// Pass an invalid Tensor as bias to omit it.
Tensor linear(const Ctx& ctx, const Tensor& x, const Tensor& weight,
              const Tensor& bias);

// Normalizes over the collapsed row axis. Training mode requires at least two
// rows and updates the running statistics; inference mode uses them.
Tensor batch_norm(const Ctx& ctx, const Tensor& x, BatchNormState& state,
                  const Tensor& gamma, const Tensor& beta);

Tensor softmax_rows(const Ctx& ctx, const Tensor& a);

MaxOut max_over_axis(const Ctx& ctx, const Tensor& a, Index axis);
Tensor mean_over_axis(const Ctx& ctx, const Tensor& a, Index axis);

// out[n][c] = sum_k weights[n][k] * values[n][k][c]
Tensor weighted_sum_axis1(const Ctx& ctx, const Tensor& values,
                          const Tensor& weights);

// Concatenation along the last axis; leading dims must agree.
Tensor concat_channels(const Ctx& ctx, const std::vector<Tensor>& parts);

// Stacking along the first axis; trailing dims must agree.
Tensor concat_rows(const Ctx& ctx, const std::vector<Tensor>& parts);
std::vector<Tensor> split_rows(const Ctx& ctx, const Tensor& a,
                               const std::vector<Index>& sizes);

// Broadcast a single row (rank-1 or 1xC) to n rows.
Tensor repeat_rows(const Ctx& ctx, const Tensor& a, Index n);

// Training: zeroes entries with probability rate and rescales survivors by
// 1/(1-rate); inference: identity.
Tensor dropout(const Ctx& ctx, const Tensor& a, double rate);

Tensor sum_all(const Ctx& ctx, const Tensor& a);

// Same data, new shape (sizes must agree). Copies; meant for small tensors.
Tensor reshape(const Ctx& ctx, const Tensor& a, Shape shape);

// Fused attention adjacency: softmax_rows((q k^T + bias) * inv_scale) where
// bias is (q+k) px^T, px px^T, or absent. Fusing keeps only the adjacency on
// the tape instead of four NxN intermediates.
Tensor attention_scores(const Ctx& ctx, const Tensor& q, const Tensor& k,
                        const Tensor& px, AttnBias bias, double inv_scale);

// Test hook: corrupts the recorded tanh derivative when set (fault injection
// for the gradient-check harness).
void set_tanh_fault_injection(bool enabled);

}  // namespace gad
