#include "bparse/tooth_graph.hpp"

#include <sstream>

namespace bparse {

ToothGraph build_tooth_adjacency() {
  ToothGraph g;
  g.adjacency = Eigen::MatrixXi::Identity(ToothGraph::kNodes, ToothGraph::kNodes);
  auto link = [&](int i, int j) {
    g.adjacency(i, j) = 1;
    g.adjacency(j, i) = 1;
    g.edge_list.insert({std::min(i, j), std::max(i, j)});
  };
  // Within-arch neighbors (quadrant chains).
  for (int k = 1; k < 8; ++k) link(k, k + 1);          // upper right 1..8
  for (int k = 9; k < 16; ++k) link(k, k + 1);         // upper left  9..16
  for (int k = 17; k < 24; ++k) link(k, k + 1);        // lower left  17..24
  for (int k = 25; k < 32; ++k) link(k, k + 1);        // lower right 25..32
  // Cross-midline pairs (central incisors).
  link(1, 9);
  link(17, 25);
  // Opposing-arch occlusion pairs.
  for (int k = 1; k <= 8; ++k) link(k, k + 24);        // upper right vs lower right
  for (int k = 9; k <= 16; ++k) link(k, k + 8);        // upper left vs lower left
  // Background hub.
  for (int k = 1; k <= 32; ++k) link(0, k);
  return g;
}

std::string tooth_graph_dot(const ToothGraph& g) {
  std::ostringstream os;
  os << "graph tooth_adjacency {\n";
  os << "  // nodes: 0 = background hub, 1..32 = FDI teeth (see docs)\n";
  for (const auto& [i, j] : g.edge_list) os << "  " << i << " -- " << j << ";\n";
  os << "}\n";
  return os.str();
}

Mat tokens_to_nodes(const Mat& tokens, int batch, const NodeProjection& proj) {
  const int V = ToothGraph::kNodes;
  require(proj.to_nodes.rows() == V, "to_nodes must have 33 rows");
  const int64_t N = proj.to_nodes.cols();
  require(tokens.rows() == int64_t(batch) * N, "token rows do not match projection width");
  Mat out(int64_t(batch) * V, tokens.cols());
  for (int b = 0; b < batch; ++b)
    out.middleRows(int64_t(b) * V, V).noalias() =
        proj.to_nodes * tokens.middleRows(int64_t(b) * N, N);
  return out;
}

Mat nodes_to_tokens(const Mat& node_features, int batch, const NodeProjection& proj) {
  const int V = ToothGraph::kNodes;
  require(proj.to_tokens.cols() == V, "to_tokens must have 33 columns");
  const int64_t N = proj.to_tokens.rows();
  require(node_features.rows() == int64_t(batch) * V,
          "node feature rows do not match 33 nodes per batch item");
  Mat out(int64_t(batch) * N, node_features.cols());
  for (int b = 0; b < batch; ++b)
    out.middleRows(int64_t(b) * N, N).noalias() =
        proj.to_tokens * node_features.middleRows(int64_t(b) * V, V);
  return out;
}

}  // namespace bparse
