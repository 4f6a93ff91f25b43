#pragma once

#include "bparse/common.hpp"

#include <set>
#include <string>
#include <utility>

namespace bparse {

// 33-node tooth graph: nodes 1..32 are teeth under the FDI map documented
// in phantom.hpp, node 0 is the background/global-context hub.
//
// Edge scheme (fixed so tests are deterministic):
//   - within-arch neighbors: consecutive teeth along each dental arch,
//     i.e. 1-2..7-8 and 9-10..15-16 (upper), 17-18..23-24 and
//     25-26..31-32 (lower)
//   - cross-midline pairs: 1-9 (upper centrals), 17-25 (lower centrals)
//   - opposing-arch (occlusion) pairs: 1-25..8-32 and 9-17..16-24
//   - background hub: 0-k for every tooth k
//   - self-loops on every node
struct ToothGraph {
  static constexpr int kNodes = 33;
  Eigen::MatrixXi adjacency;               // 33x33, 0/1, symmetric, diag 1
  std::set<std::pair<int, int>> edge_list; // i < j, self-loops excluded

  bool has_edge(int i, int j) const { return adjacency(i, j) != 0; }
};

ToothGraph build_tooth_adjacency();

// DOT rendering of the edge list (undirected, self-loops omitted).
std::string tooth_graph_dot(const ToothGraph& g);

// Learned token<->node projections (over the token axis).
struct NodeProjection {
  Mat to_nodes;   // 33 x N
  Mat to_tokens;  // N x 33
};

// nodes = to_nodes * tokens, applied per batch block. tokens: (B*N)xC.
Mat tokens_to_nodes(const Mat& tokens, int batch, const NodeProjection& proj);
// tokens = to_tokens * nodes, applied per batch block. nodes: (B*33)xC.
Mat nodes_to_tokens(const Mat& node_features, int batch, const NodeProjection& proj);

}  // namespace bparse
