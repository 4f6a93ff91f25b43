#include "bparse/gat.hpp"

namespace bparse {

void GATLayerParams::validate() const {
  if (theta_s.rows() != theta_t.rows() || theta_s.cols() != theta_t.cols())
    throw DimensionError("gat: theta_s and theta_t must share a shape");
  if (theta_s.cols() < 1) throw DimensionError("gat: output width must be >= 1");
  if (attn_vec.size() != theta_s.cols())
    throw DimensionError("gat: attention vector width must equal C'");
  if (!theta_s.allFinite() || !theta_t.allFinite() || !attn_vec.allFinite())
    throw DomainError("gat: parameters must be finite");
  if (!(negative_slope > 0.0 && negative_slope < 1.0))
    throw DomainError("gat: negative_slope must lie in (0, 1)");
}

void validate_adjacency(const Eigen::MatrixXi& adj) {
  if (adj.rows() != adj.cols()) throw DimensionError("adjacency must be square");
  for (int i = 0; i < adj.rows(); ++i) {
    if (adj(i, i) != 1) throw DimensionError("adjacency must carry self-loops (diag = 1)");
    for (int j = 0; j < adj.cols(); ++j) {
      if (adj(i, j) != 0 && adj(i, j) != 1) throw DomainError("adjacency entries must be 0/1");
      if (adj(i, j) != adj(j, i)) throw DimensionError("adjacency must be symmetric");
    }
  }
}

GatVars build_gat(ad::Tape& t, ad::Var x, const Eigen::MatrixXi& adj, ad::Var theta_s,
                  ad::Var theta_t, ad::Var attn_vec, double slope, int batch) {
  using namespace ad;
  const int v = int(adj.rows());
  Var s = matmul(t, x, theta_s);
  Var tf = matmul(t, x, theta_t);
  Var logits = gat_pair_logits(t, s, tf, attn_vec, slope, batch, v);
  Var alpha = masked_softmax_rows(t, logits, adj, batch);
  Var out = gat_aggregate(t, alpha, s, tf, batch, v);
  return {alpha, out};
}

namespace {

void check_gat_inputs(const Mat& x, const Eigen::MatrixXi& adj, const GATLayerParams& p,
                      int batch) {
  p.validate();
  validate_adjacency(adj);
  if (!x.allFinite()) throw DomainError("gat: non-finite input features");
  if (batch < 1) throw DimensionError("gat: batch must be >= 1");
  if (x.rows() != int64_t(batch) * adj.rows())
    throw DimensionError("gat: feature rows must equal batch * V");
  if (x.cols() != p.theta_s.rows())
    throw DimensionError("gat: feature width must equal rows of theta");
}

}  // namespace

Mat gat_layer(const Mat& x, const Eigen::MatrixXi& adj, const GATLayerParams& p, int batch) {
  check_gat_inputs(x, adj, p, batch);
  ad::Tape t;
  Mat a = p.attn_vec;
  GatVars g = build_gat(t, t.constant(x), adj, t.constant(p.theta_s), t.constant(p.theta_t),
                        t.constant(a), p.negative_slope, batch);
  return t.val(g.out);
}

Mat attention_coefficients(const Mat& x, const Eigen::MatrixXi& adj, const GATLayerParams& p,
                           int batch) {
  check_gat_inputs(x, adj, p, batch);
  ad::Tape t;
  Mat a = p.attn_vec;
  GatVars g = build_gat(t, t.constant(x), adj, t.constant(p.theta_s), t.constant(p.theta_t),
                        t.constant(a), p.negative_slope, batch);
  return t.val(g.alpha);
}

}  // namespace bparse
