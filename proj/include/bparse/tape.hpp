#pragma once

#include "bparse/common.hpp"
#include "bparse/patch.hpp"

#include <functional>
#include <vector>

namespace bparse::ad {

// Define-by-run reverse-mode tape over dense Eigen matrices.
//
// Shapes are 2-D throughout; leading dims are flattened into rows:
//   token sequences  (B*N) x C        node features (B*33) x C
//   volume batches   (B*V) x channels
// Every op below is checked against central finite differences in the
// test suite, so backward formulas stay honest.

struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

class Tape {
 public:
  struct Node {
    Mat val;
    Mat grad;  // empty until backward touches it
    bool needs_grad = false;
    std::function<void(Tape&, int)> back;  // pushes grad(self) into parents
  };

  Var constant(Mat v) { return push(std::move(v), false); }
  Var param(Mat v) { return push(std::move(v), true); }

  const Mat& val(Var v) const { return nodes_[v.i].val; }
  const Mat& grad(Var v) const { return nodes_[v.i].grad; }
  bool needs_grad(Var v) const { return nodes_[v.i].needs_grad; }

  // Runs reverse accumulation from a 1x1 loss node.
  void backward(Var loss);

  // -- used by op implementations --
  Var push(Mat v, bool needs_grad, std::function<void(Tape&, int)> back = nullptr);
  Mat& grad_ref(int i);
  void accum(int parent, const Mat& g);
  Node& node(int i) { return nodes_[i]; }

 private:
  std::vector<Node> nodes_;
};

// Elementwise / broadcast.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var hadamard(Tape& t, Var a, Var b);
Var add_rowvec(Tape& t, Var a, Var bias);            // bias: 1 x C
Var add_tiled(Tape& t, Var a, Var block, int tiles); // block tiled down rows
Var tile_rows(Tape& t, Var v, int rows);             // v: 1 x C

// Activations.
Var relu(Tape& t, Var a);
Var leaky_relu(Tape& t, Var a, double slope);
Var sigmoid(Tape& t, Var a);
Var gelu(Tape& t, Var a);

// Linear algebra.
Var matmul(Tape& t, Var a, Var b);
Var shared_left_matmul(Tape& t, Var p, Var x, int batch);  // out_b = P * x_b
Var bmm_nn(Tape& t, Var a, Var b, int batch);              // out_b = a_b * b_b
Var bmm_nt(Tape& t, Var a, Var b, int batch);              // out_b = a_b * b_b^T

// Normalization / attention.
Var layernorm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax_rows(Tape& t, Var x);
// Row-restricted softmax; `support` is VxV (0/1, diag 1) tiled over batch.
Var masked_softmax_rows(Tape& t, Var x, const Eigen::MatrixXi& support, int batch);

// Structure.
Var slice_cols(Tape& t, Var x, int j, int w);
Var concat_cols(Tape& t, Var a, Var b);
// out = x with rows {b*N + i : i in token_idx} taken from y (same shape).
Var row_replace(Tape& t, Var x, Var y, const std::vector<int>& token_idx, int batch, int n_tokens);
// Keeps only rows {b*N + i : i in token_idx}: (B*N) x C -> (B*|idx|) x C.
Var select_token_rows(Tape& t, Var x, const std::vector<int>& token_idx, int batch, int n_tokens);

// Patch geometry (bijective index maps; see patch.hpp for the layout).
Var gather_patches_op(Tape& t, Var vol, const PatchGrid& g, int batch);
Var scatter_patches_op(Tape& t, Var tokens, const PatchGrid& g, int batch);
// Non-overlapping transposed-conv placement: input (B*Gc) x (K*C) with
// offset-major columns -> output (B*Gc*K) x C on the refined grid.
Var block_expand(Tape& t, Var x, const Vec3i& coarse, const Vec3i& factors, int channels,
                 int batch);

// Graph attention building blocks (V nodes per batch item).
// logits[b](i,j) = a . leaky_relu(s[b](i) + t_feat[b](j))
Var gat_pair_logits(Tape& t, Var s, Var t_feat, Var attn_vec, double slope, int batch, int v);
// out[b](i) = alpha[b](i,i) * s[b](i) + sum_{j != i} alpha[b](i,j) * t_feat[b](j)
Var gat_aggregate(Tape& t, Var alpha, Var s, Var t_feat, int batch, int v);

// Reductions / losses (targets are plain data, not Vars).
Var mean_all(Tape& t, Var a);
Var mse_loss_op(Tape& t, Var pred, const Mat& target);

}  // namespace bparse::ad
