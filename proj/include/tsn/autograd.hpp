#pragma once

// Minimal reverse-mode differentiation over Tensor values. Each op computes its
// output eagerly and, when a Tape is supplied and some input requires a
// gradient, records a closure that propagates the output gradient to inputs.

#include <functional>
#include <memory>
#include <vector>

#include "tsn/tensor.hpp"

namespace tsn::ag {

struct Node {
  Tensor value;
  Tensor grad;  // empty until a gradient first reaches this node
  bool requires_grad = false;

  Tensor& grad_buffer();
  void accumulate(const Tensor& g);
  void zero_grad() { grad = Tensor(); }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var parameter(Tensor value);

class Tape {
 public:
  void record(std::function<void()> backward) { ops_.push_back(std::move(backward)); }
  /// Seeds `output` with `seed` and replays recorded closures in reverse order.
  void backward(const Var& output, const Tensor& seed);
  std::size_t size() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
};

Var conv2d(Tape* tape, const Var& x, const Var& weight, const Var& bias = nullptr);
Var relu(Tape* tape, const Var& x);
Var sigmoid(Tape* tape, const Var& x);
Var maxpool2(Tape* tape, const Var& x);
Var avgpool(Tape* tape, const Var& x, int factor);
Var add(Tape* tape, const Var& a, const Var& b);
Var concat_channels(Tape* tape, const Var& a, const Var& b);
Var resize_bilinear(Tape* tape, const Var& x, int out_h, int out_w);
Var reshape(Tape* tape, const Var& x, Shape shape);
Var scale(Tape* tape, const Var& x, double factor);

/// Batched matrix product over (n,1,r,k)·(n,1,k,c); `b` may have n = 1 (shared).
Var matmul(Tape* tape, const Var& a, const Var& b);
/// a (n,1,r,k) · b(n,1,c,k)ᵀ -> (n,1,r,c)
Var matmul_nt(Tape* tape, const Var& a, const Var& b);
/// Softmax along the last axis.
Var softmax_rows(Tape* tape, const Var& x);

/// (n,c,h,w) -> (n,c,1,1) spatial mean.
Var global_avgpool(Tape* tape, const Var& x);
/// x (n,c,h,w) scaled per channel by g (n,c,1,1).
Var channel_scale(Tape* tape, const Var& x, const Var& g);

struct NormBuffers {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
};

/// Batch normalization over (n,h,w) per channel. In training mode the running
/// statistics are updated with `momentum` (unbiased variance).
Var batch_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, NormBuffers buffers,
               bool training, double momentum = 0.1, double eps = 1e-5);

/// Group normalization over (c/groups, h, w) per sample and group.
Var group_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, int groups,
               double eps = 1e-5);

}  // namespace tsn::ag
