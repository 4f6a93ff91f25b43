#pragma once

#include "bparse/nn.hpp"
#include "bparse/tooth_graph.hpp"

namespace bparse {

// One graph-attention application:
//   x'_i = alpha_ii * Theta_s x_i + sum_{j in N(i)} alpha_ij * Theta_t x_j
// with attention over N(i) u {i}:
//   alpha_ij = softmax_j( a . leaky_relu(Theta_s x_i + Theta_t x_j) ).
// N(i) is the set of neighbors other than i; the adjacency carries
// self-loops which define the softmax support.
struct GATLayerParams {
  Mat theta_s;       // C x C'
  Mat theta_t;       // C x C'
  Vec attn_vec;      // C'
  double negative_slope = 0.2;

  void validate() const;
};

// Validates an adjacency matrix: square, 0/1, symmetric, unit diagonal.
void validate_adjacency(const Eigen::MatrixXi& adj);

// x: (B*V) x C node features; adj: V x V. Works for any node count; the
// prompt branch instantiates it with the 33-node tooth graph.
Mat gat_layer(const Mat& x, const Eigen::MatrixXi& adj, const GATLayerParams& p, int batch);

// Attention coefficients, zero where no edge: (B*V) x V, rows over
// N(i) u {i} summing to 1.
Mat attention_coefficients(const Mat& x, const Eigen::MatrixXi& adj, const GATLayerParams& p,
                           int batch);

// Tape building block shared by the plain entry points above and the
// prompt-branch training graph.
struct GatVars {
  ad::Var alpha;
  ad::Var out;
};
GatVars build_gat(ad::Tape& t, ad::Var x, const Eigen::MatrixXi& adj, ad::Var theta_s,
                  ad::Var theta_t, ad::Var attn_vec, double slope, int batch);

}  // namespace bparse
