#pragma once

#include <functional>
#include <string>
#include <vector>

#include "wsseg/tensor.hpp"

namespace wsseg {

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Tensor& val() const;
  const std::vector<int>& shape() const;
};

// One learnable weight tensor plus its gradient accumulator and Adam state.
struct ParamBlock {
  std::string name;
  Tensor value;
  Tensor grad;  // accumulated by Tape::backward, reset between steps
  Tensor adam_m;
  Tensor adam_v;

  ParamBlock() = default;
  ParamBlock(std::string n, Tensor init)
      : name(std::move(n)),
        value(std::move(init)),
        grad(Tensor::zeros(value.shape)),
        adam_m(Tensor::zeros(value.shape)),
        adam_v(Tensor::zeros(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

// Recorded-graph reverse-mode autodiff. Forward ops append nodes in
// topological order; backward() sweeps the tape in reverse. One tape per
// training step; parameters are bound as leaves and receive accumulated
// gradients in their ParamBlock.
class Tape {
 public:
  Var leaf(Tensor value, bool track_grad = false);
  Var param(ParamBlock& p);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double s);
  Var hadamard(Var a, Var b);
  Var add_rows(Var x, Var rows);  // [N,T,D] + [T,D]
  Var sum(Var a);                 // -> scalar [1]
  Var mean(Var a);                // -> scalar [1]

  Var linear(Var x, Var w, Var b);
  Var matmul(Var a, Var b);
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  Var relu(Var x);
  Var gelu(Var x);
  Var layer_norm(Var x, Var gamma, Var beta, double eps);
  Var softmax_last(Var x);
  Var global_avg_pool(Var x);
  Var bilinear_resize(Var x, int oh, int ow);
  Var patchify(Var x, int p);
  Var tokens_to_grid(Var x, int h, int w);
  Var split_heads(Var x, int heads);
  Var merge_heads(Var x);
  Var transpose_last2(Var x);
  Var concat_channels(Var a, Var b);
  // per-(n,c) min-max rescale of [N,C,H,W] to [0,1]; the extrema act as
  // constants in the backward pass; a constant channel maps to zeros
  Var normalize_channels(Var x);

  // fused losses; targets are constants
  Var multilabel_bce(Var logits, const Tensor& y);
  Var self_regularization(Var cam_t, Var cam_c, const Tensor& y, double beta, bool all_channels);
  Var pixel_bce(Var scores, const std::vector<int>& labels);  // scores [N,K,H,W], labels row-major N*H*W in [0,K)

  // Reverse sweep from a scalar loss. Accumulates into bound ParamBlock
  // grads and into tracked leaves (read back via grad_of). Adjoint buffers
  // are reset at the start of each call, so repeated calls accumulate.
  void backward(Var loss);

  Tensor grad_of(Var v) const;  // zeros if v never received an adjoint
  const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> adj;
    std::function<void(Tape&)> back;  // empty for leaves
    ParamBlock* bound = nullptr;
    bool needs_grad = false;
  };

  friend struct Var;

  int push(Tensor value, bool needs, std::function<void(Tape&)> back);
  bool needs(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  // adjoint buffer of a node, allocated and zeroed on first touch
  std::vector<double>& adj(int id);
  void check_mine(Var v, const char* op) const;

  std::vector<Node> nodes_;
};

}  // namespace wsseg
