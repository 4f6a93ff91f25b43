#include "bparse/tape.hpp"

#include <cmath>
#include <limits>

namespace bparse::ad {

Var Tape::push(Mat v, bool needs_grad, std::function<void(Tape&, int)> back) {
  Node n;
  n.val = std::move(v);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{int(nodes_.size()) - 1};
}

Mat& Tape::grad_ref(int i) {
  Node& n = nodes_[i];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
  return n.grad;
}

void Tape::accum(int parent, const Mat& g) {
  if (!nodes_[parent].needs_grad) return;
  grad_ref(parent) += g;
}

void Tape::backward(Var loss) {
  require(loss.valid() && val(loss).size() == 1, "backward expects a scalar loss node");
  grad_ref(loss.i).setConstant(1.0);
  for (int i = loss.i; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || !n.back || n.grad.size() == 0) continue;
    n.back(*this, i);
  }
}

namespace {

bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (t.needs_grad(v)) return true;
  return false;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(Tape& t, Var a, Var b) {
  require(t.val(a).rows() == t.val(b).rows() && t.val(a).cols() == t.val(b).cols(),
          "add: shape mismatch");
  Mat v = t.val(a) + t.val(b);
  if (!any_grad(t, {a, b})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, b](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    t.accum(a.i, g);
    t.accum(b.i, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  require(t.val(a).rows() == t.val(b).rows() && t.val(a).cols() == t.val(b).cols(),
          "sub: shape mismatch");
  Mat v = t.val(a) - t.val(b);
  if (!any_grad(t, {a, b})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, b](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    t.accum(a.i, g);
    t.accum(b.i, -g);
  });
}

Var scale(Tape& t, Var a, double s) {
  Mat v = t.val(a) * s;
  if (!t.needs_grad(a)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, s](Tape& t, int self) {
    t.accum(a.i, t.grad_ref(self) * s);
  });
}

Var hadamard(Tape& t, Var a, Var b) {
  require(t.val(a).rows() == t.val(b).rows() && t.val(a).cols() == t.val(b).cols(),
          "hadamard: shape mismatch");
  Mat v = t.val(a).cwiseProduct(t.val(b));
  if (!any_grad(t, {a, b})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, b](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    t.accum(a.i, g.cwiseProduct(t.val(b)));
    t.accum(b.i, g.cwiseProduct(t.val(a)));
  });
}

Var add_rowvec(Tape& t, Var a, Var bias) {
  require(t.val(bias).rows() == 1 && t.val(bias).cols() == t.val(a).cols(),
          "add_rowvec: bias must be 1 x cols(a)");
  Mat v = t.val(a).rowwise() + t.val(bias).row(0);
  if (!any_grad(t, {a, bias})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, bias](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    t.accum(a.i, g);
    t.accum(bias.i, g.colwise().sum());
  });
}

Var add_tiled(Tape& t, Var a, Var block, int tiles) {
  const int64_t rows = t.val(block).rows();
  require(t.val(a).rows() == rows * tiles && t.val(a).cols() == t.val(block).cols(),
          "add_tiled: shape mismatch");
  Mat v = t.val(a);
  for (int b = 0; b < tiles; ++b) v.middleRows(b * rows, rows) += t.val(block);
  if (!any_grad(t, {a, block})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, block, tiles, rows](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    t.accum(a.i, g);
    if (t.needs_grad(block)) {
      Mat gb = Mat::Zero(rows, g.cols());
      for (int b = 0; b < tiles; ++b) gb += g.middleRows(b * rows, rows);
      t.accum(block.i, gb);
    }
  });
}

Var tile_rows(Tape& t, Var v, int rows) {
  require(t.val(v).rows() == 1, "tile_rows: input must be a row vector");
  Mat out = t.val(v).replicate(rows, 1);
  if (!t.needs_grad(v)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [v](Tape& t, int self) {
    t.accum(v.i, t.grad_ref(self).colwise().sum());
  });
}

// ---------------------------------------------------------------- activations

Var relu(Tape& t, Var a) {
  Mat v = t.val(a).cwiseMax(0.0);
  if (!t.needs_grad(a)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a](Tape& t, int self) {
    Mat mask = (t.val(a).array() > 0.0).cast<double>();
    t.accum(a.i, t.grad_ref(self).cwiseProduct(mask));
  });
}

Var leaky_relu(Tape& t, Var a, double slope) {
  const Mat& x = t.val(a);
  Mat v = x.array().max(x.array() * slope).matrix();
  if (!t.needs_grad(a)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, slope](Tape& t, int self) {
    Mat d = (t.val(a).array() > 0.0).select(Mat::Ones(t.val(a).rows(), t.val(a).cols()),
                                            Mat::Constant(t.val(a).rows(), t.val(a).cols(), slope));
    t.accum(a.i, t.grad_ref(self).cwiseProduct(d));
  });
}

Var sigmoid(Tape& t, Var a) {
  Mat v = (1.0 / (1.0 + (-t.val(a).array()).exp())).matrix();
  if (!t.needs_grad(a)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a](Tape& t, int self) {
    const Mat& y = t.node(self).val;
    t.accum(a.i, (t.grad_ref(self).array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var gelu(Tape& t, Var a) {
  Mat v = t.val(a).unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x / M_SQRT2)); });
  if (!t.needs_grad(a)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a](Tape& t, int self) {
    Mat d = t.val(a).unaryExpr([](double x) {
      double cdf = 0.5 * (1.0 + std::erf(x / M_SQRT2));
      double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      return cdf + x * pdf;
    });
    t.accum(a.i, t.grad_ref(self).cwiseProduct(d));
  });
}

// ------------------------------------------------------------- linear algebra

Var matmul(Tape& t, Var a, Var b) {
  require(t.val(a).cols() == t.val(b).rows(), "matmul: inner dimensions differ");
  Mat v = t.val(a) * t.val(b);
  if (!any_grad(t, {a, b})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, b](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    if (t.needs_grad(a)) t.accum(a.i, g * t.val(b).transpose());
    if (t.needs_grad(b)) t.accum(b.i, t.val(a).transpose() * g);
  });
}

Var shared_left_matmul(Tape& t, Var p, Var x, int batch) {
  const int64_t r1 = t.val(p).cols(), r2 = t.val(p).rows();
  require(t.val(x).rows() == r1 * batch, "shared_left_matmul: rows(x) != batch * cols(P)");
  Mat v(r2 * batch, t.val(x).cols());
  for (int b = 0; b < batch; ++b)
    v.middleRows(b * r2, r2).noalias() = t.val(p) * t.val(x).middleRows(b * r1, r1);
  if (!any_grad(t, {p, x})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [p, x, batch, r1, r2](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    if (t.needs_grad(p)) {
      Mat gp = Mat::Zero(r2, r1);
      for (int b = 0; b < batch; ++b)
        gp.noalias() += g.middleRows(b * r2, r2) * t.val(x).middleRows(b * r1, r1).transpose();
      t.accum(p.i, gp);
    }
    if (t.needs_grad(x)) {
      Mat gx(r1 * batch, g.cols());
      for (int b = 0; b < batch; ++b)
        gx.middleRows(b * r1, r1).noalias() = t.val(p).transpose() * g.middleRows(b * r2, r2);
      t.accum(x.i, gx);
    }
  });
}

Var bmm_nn(Tape& t, Var a, Var b, int batch) {
  const int64_t ra = t.val(a).rows() / batch, k = t.val(a).cols();
  const int64_t rb = t.val(b).rows() / batch, cb = t.val(b).cols();
  require(t.val(a).rows() == ra * batch && t.val(b).rows() == rb * batch && k == rb,
          "bmm_nn: block shapes incompatible");
  Mat v(ra * batch, cb);
  for (int i = 0; i < batch; ++i)
    v.middleRows(i * ra, ra).noalias() =
        t.val(a).middleRows(i * ra, ra) * t.val(b).middleRows(i * rb, rb);
  if (!any_grad(t, {a, b})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, b, batch, ra, rb](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    if (t.needs_grad(a)) {
      Mat ga(ra * batch, t.val(a).cols());
      for (int i = 0; i < batch; ++i)
        ga.middleRows(i * ra, ra).noalias() =
            g.middleRows(i * ra, ra) * t.val(b).middleRows(i * rb, rb).transpose();
      t.accum(a.i, ga);
    }
    if (t.needs_grad(b)) {
      Mat gb(rb * batch, t.val(b).cols());
      for (int i = 0; i < batch; ++i)
        gb.middleRows(i * rb, rb).noalias() =
            t.val(a).middleRows(i * ra, ra).transpose() * g.middleRows(i * ra, ra);
      t.accum(b.i, gb);
    }
  });
}

Var bmm_nt(Tape& t, Var a, Var b, int batch) {
  const int64_t ra = t.val(a).rows() / batch, k = t.val(a).cols();
  const int64_t rb = t.val(b).rows() / batch;
  require(t.val(a).rows() == ra * batch && t.val(b).rows() == rb * batch &&
              k == t.val(b).cols(),
          "bmm_nt: block shapes incompatible");
  Mat v(ra * batch, rb);
  for (int i = 0; i < batch; ++i)
    v.middleRows(i * ra, ra).noalias() =
        t.val(a).middleRows(i * ra, ra) * t.val(b).middleRows(i * rb, rb).transpose();
  if (!any_grad(t, {a, b})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, b, batch, ra, rb](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    if (t.needs_grad(a)) {
      Mat ga(ra * batch, t.val(a).cols());
      for (int i = 0; i < batch; ++i)
        ga.middleRows(i * ra, ra).noalias() =
            g.middleRows(i * ra, ra) * t.val(b).middleRows(i * rb, rb);
      t.accum(a.i, ga);
    }
    if (t.needs_grad(b)) {
      Mat gb(rb * batch, t.val(b).cols());
      for (int i = 0; i < batch; ++i)
        gb.middleRows(i * rb, rb).noalias() =
            g.middleRows(i * ra, ra).transpose() * t.val(a).middleRows(i * ra, ra);
      t.accum(b.i, gb);
    }
  });
}

// ---------------------------------------------------- normalization, softmax

Var layernorm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Mat& in = t.val(x);
  const int64_t c = in.cols();
  require(t.val(gamma).rows() == 1 && t.val(gamma).cols() == c, "layernorm: gamma must be 1 x C");
  require(t.val(beta).rows() == 1 && t.val(beta).cols() == c, "layernorm: beta must be 1 x C");
  Vec mu = in.rowwise().mean();
  Mat centered = in.colwise() - mu;
  Vec inv_sd = (centered.array().square().rowwise().mean() + eps).rsqrt().matrix();
  Mat xhat = (centered.array().colwise() * inv_sd.array()).matrix();
  Mat v = xhat * t.val(gamma).row(0).asDiagonal();
  v.rowwise() += t.val(beta).row(0);
  if (!any_grad(t, {x, gamma, beta})) return t.constant(std::move(v));
  // xhat and inv_sd are cached by value for the backward pass.
  return t.push(std::move(v), true,
                [x, gamma, beta, xhat = std::move(xhat), inv_sd = std::move(inv_sd)](
                    Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    if (t.needs_grad(gamma)) t.accum(gamma.i, g.cwiseProduct(xhat).colwise().sum());
    if (t.needs_grad(beta)) t.accum(beta.i, g.colwise().sum());
    if (t.needs_grad(x)) {
      Mat dxhat = g * t.val(gamma).row(0).asDiagonal();
      Vec m1 = dxhat.rowwise().mean();
      Vec m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
      Mat inner = (dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix();
      Mat dx = (inner.array().colwise() * inv_sd.array()).matrix();
      t.accum(x.i, dx);
    }
  });
}

Var softmax_rows(Tape& t, Var x) {
  const Mat& in = t.val(x);
  Mat v(in.rows(), in.cols());
  for (int64_t r = 0; r < in.rows(); ++r) {
    Eigen::RowVectorXd e = (in.row(r).array() - in.row(r).maxCoeff()).exp();
    v.row(r) = e / e.sum();
  }
  if (!t.needs_grad(x)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [x](Tape& t, int self) {
    const Mat& y = t.node(self).val;
    const Mat& g = t.grad_ref(self);
    Vec dot = g.cwiseProduct(y).rowwise().sum();
    t.accum(x.i, y.cwiseProduct(g.colwise() - dot));
  });
}

Var masked_softmax_rows(Tape& t, Var x, const Eigen::MatrixXi& support, int batch) {
  const int v_nodes = int(support.rows());
  require(support.rows() == support.cols(), "masked_softmax: support must be square");
  require(t.val(x).rows() == int64_t(batch) * v_nodes && t.val(x).cols() == v_nodes,
          "masked_softmax: rows must be batch * V and cols V");
  for (int i = 0; i < v_nodes; ++i)
    require(support(i, i) == 1, "masked_softmax: support diagonal must be 1 (self-loops)");
  const Mat& in = t.val(x);
  Mat out = Mat::Zero(in.rows(), in.cols());
  for (int64_t r = 0; r < in.rows(); ++r) {
    int i = int(r % v_nodes);
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < v_nodes; ++j)
      if (support(i, j)) mx = std::max(mx, in(r, j));
    double denom = 0.0;
    for (int j = 0; j < v_nodes; ++j)
      if (support(i, j)) denom += std::exp(in(r, j) - mx);
    for (int j = 0; j < v_nodes; ++j)
      if (support(i, j)) out(r, j) = std::exp(in(r, j) - mx) / denom;
  }
  if (!t.needs_grad(x)) return t.constant(std::move(out));
  return t.push(std::move(out), true, [x, support, v_nodes](Tape& t, int self) {
    const Mat& y = t.node(self).val;
    const Mat& g = t.grad_ref(self);
    Mat dx = Mat::Zero(y.rows(), y.cols());
    for (int64_t r = 0; r < y.rows(); ++r) {
      int i = int(r % v_nodes);
      double dot = 0.0;
      for (int j = 0; j < v_nodes; ++j)
        if (support(i, j)) dot += g(r, j) * y(r, j);
      for (int j = 0; j < v_nodes; ++j)
        if (support(i, j)) dx(r, j) = y(r, j) * (g(r, j) - dot);
    }
    t.accum(x.i, dx);
  });
}

// ------------------------------------------------------------------ structure

Var slice_cols(Tape& t, Var x, int j, int w) {
  require(j >= 0 && w >= 1 && j + w <= t.val(x).cols(), "slice_cols: out of range");
  Mat v = t.val(x).middleCols(j, w);
  if (!t.needs_grad(x)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [x, j, w](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    Mat gx = Mat::Zero(t.val(x).rows(), t.val(x).cols());
    gx.middleCols(j, w) = g;
    t.accum(x.i, gx);
  });
}

Var concat_cols(Tape& t, Var a, Var b) {
  require(t.val(a).rows() == t.val(b).rows(), "concat_cols: row counts differ");
  Mat v(t.val(a).rows(), t.val(a).cols() + t.val(b).cols());
  v << t.val(a), t.val(b);
  if (!any_grad(t, {a, b})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, b](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    t.accum(a.i, g.leftCols(t.val(a).cols()));
    t.accum(b.i, g.rightCols(t.val(b).cols()));
  });
}

Var row_replace(Tape& t, Var x, Var y, const std::vector<int>& token_idx, int batch,
                int n_tokens) {
  require(t.val(x).rows() == t.val(y).rows() && t.val(x).cols() == t.val(y).cols(),
          "row_replace: shape mismatch");
  require(t.val(x).rows() == int64_t(batch) * n_tokens, "row_replace: rows != batch * N");
  for (int i : token_idx) require(i >= 0 && i < n_tokens, "row_replace: index out of range");
  Mat v = t.val(x);
  for (int b = 0; b < batch; ++b)
    for (int i : token_idx) v.row(int64_t(b) * n_tokens + i) = t.val(y).row(int64_t(b) * n_tokens + i);
  if (!any_grad(t, {x, y})) return t.constant(std::move(v));
  return t.push(std::move(v), true, [x, y, token_idx, batch, n_tokens](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    if (t.needs_grad(x)) {
      Mat gx = g;
      for (int b = 0; b < batch; ++b)
        for (int i : token_idx) gx.row(int64_t(b) * n_tokens + i).setZero();
      t.accum(x.i, gx);
    }
    if (t.needs_grad(y)) {
      Mat gy = Mat::Zero(g.rows(), g.cols());
      for (int b = 0; b < batch; ++b)
        for (int i : token_idx)
          gy.row(int64_t(b) * n_tokens + i) = g.row(int64_t(b) * n_tokens + i);
      t.accum(y.i, gy);
    }
  });
}

Var select_token_rows(Tape& t, Var x, const std::vector<int>& token_idx, int batch,
                      int n_tokens) {
  require(t.val(x).rows() == int64_t(batch) * n_tokens, "select_token_rows: rows != batch * N");
  for (int i : token_idx) require(i >= 0 && i < n_tokens, "select_token_rows: index out of range");
  const int64_t k = int64_t(token_idx.size());
  Mat v(k * batch, t.val(x).cols());
  for (int b = 0; b < batch; ++b)
    for (int64_t j = 0; j < k; ++j)
      v.row(int64_t(b) * k + j) = t.val(x).row(int64_t(b) * n_tokens + token_idx[j]);
  if (!t.needs_grad(x)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [x, token_idx, batch, n_tokens, k](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    Mat gx = Mat::Zero(t.val(x).rows(), t.val(x).cols());
    for (int b = 0; b < batch; ++b)
      for (int64_t j = 0; j < k; ++j)
        gx.row(int64_t(b) * n_tokens + token_idx[j]) = g.row(int64_t(b) * k + j);
    t.accum(x.i, gx);
  });
}

// ------------------------------------------------------------- patch geometry

Var gather_patches_op(Tape& t, Var vol, const PatchGrid& g, int batch) {
  Mat v = gather_patches(t.val(vol), g, batch);
  if (!t.needs_grad(vol)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [vol, g, batch](Tape& t, int self) {
    t.accum(vol.i, scatter_patches(t.grad_ref(self), g, batch));
  });
}

Var scatter_patches_op(Tape& t, Var tokens, const PatchGrid& g, int batch) {
  Mat v = scatter_patches(t.val(tokens), g, batch);
  if (!t.needs_grad(tokens)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [tokens, g, batch](Tape& t, int self) {
    t.accum(tokens.i, gather_patches(t.grad_ref(self), g, batch));
  });
}

namespace {

// fine_row[rc * K + ro] = row of the refined grid cell, per batch block.
std::vector<int64_t> expand_map(const Vec3i& coarse, const Vec3i& f) {
  const int64_t gc = int64_t(coarse[0]) * coarse[1] * coarse[2];
  const int k = f[0] * f[1] * f[2];
  Vec3i fine = coarse.cwiseProduct(f);
  std::vector<int64_t> map(size_t(gc) * k);
  for (int cz = 0; cz < coarse[2]; ++cz)
    for (int cy = 0; cy < coarse[1]; ++cy)
      for (int cx = 0; cx < coarse[0]; ++cx) {
        int64_t rc = cx + int64_t(coarse[0]) * (cy + int64_t(coarse[1]) * cz);
        for (int oz = 0; oz < f[2]; ++oz)
          for (int oy = 0; oy < f[1]; ++oy)
            for (int ox = 0; ox < f[0]; ++ox) {
              int ro = ox + f[0] * (oy + f[1] * oz);
              int64_t fx = int64_t(cx) * f[0] + ox;
              int64_t fy = int64_t(cy) * f[1] + oy;
              int64_t fz = int64_t(cz) * f[2] + oz;
              map[size_t(rc) * k + ro] = fx + fine[0] * (fy + int64_t(fine[1]) * fz);
            }
      }
  return map;
}

}  // namespace

Var block_expand(Tape& t, Var x, const Vec3i& coarse, const Vec3i& factors, int channels,
                 int batch) {
  const int64_t gc = int64_t(coarse[0]) * coarse[1] * coarse[2];
  const int k = factors[0] * factors[1] * factors[2];
  require(t.val(x).rows() == gc * batch && t.val(x).cols() == int64_t(k) * channels,
          "block_expand: input must be (batch*coarse) x (K*channels)");
  auto map = expand_map(coarse, factors);
  const Mat& in = t.val(x);
  Mat v(gc * k * batch, channels);
  for (int b = 0; b < batch; ++b) {
    const int64_t in0 = b * gc, out0 = b * gc * k;
    for (int64_t rc = 0; rc < gc; ++rc)
      for (int ro = 0; ro < k; ++ro) {
        int64_t rf = map[size_t(rc) * k + ro];
        for (int c = 0; c < channels; ++c) v(out0 + rf, c) = in(in0 + rc, int64_t(ro) * channels + c);
      }
  }
  if (!t.needs_grad(x)) return t.constant(std::move(v));
  return t.push(std::move(v), true,
                [x, map = std::move(map), gc, k, channels, batch](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    Mat gx(gc * batch, int64_t(k) * channels);
    for (int b = 0; b < batch; ++b) {
      const int64_t in0 = b * gc, out0 = b * gc * k;
      for (int64_t rc = 0; rc < gc; ++rc)
        for (int ro = 0; ro < k; ++ro) {
          int64_t rf = map[size_t(rc) * k + ro];
          for (int c = 0; c < channels; ++c) gx(in0 + rc, int64_t(ro) * channels + c) = g(out0 + rf, c);
        }
    }
    t.accum(x.i, gx);
  });
}

// ------------------------------------------------------------ graph attention

Var gat_pair_logits(Tape& t, Var s, Var t_feat, Var attn_vec, double slope, int batch, int v) {
  const int64_t c = t.val(s).cols();
  require(t.val(s).rows() == int64_t(batch) * v && t.val(t_feat).rows() == int64_t(batch) * v,
          "gat_pair_logits: rows must be batch * V");
  require(t.val(t_feat).cols() == c, "gat_pair_logits: s and t widths differ");
  require(t.val(attn_vec).size() == c, "gat_pair_logits: attention vector width mismatch");
  const Mat& sv = t.val(s);
  const Mat& tv = t.val(t_feat);
  Eigen::Map<const Vec> a(t.val(attn_vec).data(), c);
  Mat out(int64_t(batch) * v, v);
  Vec pair(c);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < v; ++i)
      for (int j = 0; j < v; ++j) {
        pair = sv.row(int64_t(b) * v + i) + tv.row(int64_t(b) * v + j);
        double dot = 0.0;
        for (int64_t q = 0; q < c; ++q) {
          double z = pair[q];
          dot += a[q] * (z > 0.0 ? z : slope * z);
        }
        out(int64_t(b) * v + i, j) = dot;
      }
  if (!any_grad(t, {s, t_feat, attn_vec})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [s, t_feat, attn_vec, slope, batch, v, c](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    const Mat& sv = t.val(s);
    const Mat& tv = t.val(t_feat);
    Eigen::Map<const Vec> a(t.val(attn_vec).data(), c);
    Mat gs = Mat::Zero(sv.rows(), c);
    Mat gt = Mat::Zero(tv.rows(), c);
    Mat ga = Mat::Zero(t.val(attn_vec).rows(), t.val(attn_vec).cols());
    Eigen::Map<Vec> gav(ga.data(), c);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < v; ++i)
        for (int j = 0; j < v; ++j) {
          double gij = g(int64_t(b) * v + i, j);
          if (gij == 0.0) continue;
          for (int64_t q = 0; q < c; ++q) {
            double z = sv(int64_t(b) * v + i, q) + tv(int64_t(b) * v + j, q);
            double act = z > 0.0 ? z : slope * z;
            double dact = z > 0.0 ? 1.0 : slope;
            gav[q] += gij * act;
            double w = gij * a[q] * dact;
            gs(int64_t(b) * v + i, q) += w;
            gt(int64_t(b) * v + j, q) += w;
          }
        }
    t.accum(s.i, gs);
    t.accum(t_feat.i, gt);
    t.accum(attn_vec.i, ga);
  });
}

Var gat_aggregate(Tape& t, Var alpha, Var s, Var t_feat, int batch, int v) {
  const int64_t c = t.val(s).cols();
  require(t.val(alpha).rows() == int64_t(batch) * v && t.val(alpha).cols() == v,
          "gat_aggregate: alpha must be (batch*V) x V");
  require(t.val(s).rows() == int64_t(batch) * v && t.val(t_feat).rows() == int64_t(batch) * v &&
              t.val(t_feat).cols() == c,
          "gat_aggregate: feature shapes inconsistent");
  const Mat& av = t.val(alpha);
  const Mat& sv = t.val(s);
  const Mat& tv = t.val(t_feat);
  Mat out(int64_t(batch) * v, c);
  for (int b = 0; b < batch; ++b) {
    auto ab = av.middleRows(int64_t(b) * v, v);
    auto sb = sv.middleRows(int64_t(b) * v, v);
    auto tb = tv.middleRows(int64_t(b) * v, v);
    Mat o = ab * tb;  // includes the j = i term with t features
    for (int i = 0; i < v; ++i) o.row(i) += ab(i, i) * (sb.row(i) - tb.row(i));
    out.middleRows(int64_t(b) * v, v) = o;
  }
  if (!any_grad(t, {alpha, s, t_feat})) return t.constant(std::move(out));
  return t.push(std::move(out), true, [alpha, s, t_feat, batch, v](Tape& t, int self) {
    const Mat& g = t.grad_ref(self);
    const Mat& av = t.val(alpha);
    const Mat& sv = t.val(s);
    const Mat& tv = t.val(t_feat);
    Mat galpha = Mat::Zero(av.rows(), av.cols());
    Mat gs = Mat::Zero(sv.rows(), sv.cols());
    Mat gt = Mat::Zero(tv.rows(), tv.cols());
    for (int b = 0; b < batch; ++b) {
      auto gb = g.middleRows(int64_t(b) * v, v);
      auto ab = av.middleRows(int64_t(b) * v, v);
      auto sb = sv.middleRows(int64_t(b) * v, v);
      auto tb = tv.middleRows(int64_t(b) * v, v);
      Mat ga = gb * tb.transpose();  // d/dalpha(i,j) for j != i
      for (int i = 0; i < v; ++i) ga(i, i) = gb.row(i).dot(sb.row(i));
      galpha.middleRows(int64_t(b) * v, v) = ga;
      Mat gtb = ab.transpose() * gb;  // includes the self column
      for (int j = 0; j < v; ++j) gtb.row(j) -= ab(j, j) * gb.row(j);
      gt.middleRows(int64_t(b) * v, v) = gtb;
      for (int i = 0; i < v; ++i) gs.row(int64_t(b) * v + i) = ab(i, i) * gb.row(i);
    }
    t.accum(alpha.i, galpha);
    t.accum(s.i, gs);
    t.accum(t_feat.i, gt);
  });
}

// ----------------------------------------------------------------- reductions

Var mean_all(Tape& t, Var a) {
  const double n = double(t.val(a).size());
  Mat v(1, 1);
  v(0, 0) = t.val(a).sum() / n;
  if (!t.needs_grad(a)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [a, n](Tape& t, int self) {
    double g = t.grad_ref(self)(0, 0);
    t.accum(a.i, Mat::Constant(t.val(a).rows(), t.val(a).cols(), g / n));
  });
}

Var mse_loss_op(Tape& t, Var pred, const Mat& target) {
  require(t.val(pred).rows() == target.rows() && t.val(pred).cols() == target.cols(),
          "mse: shape mismatch");
  const double n = double(target.size());
  Mat diff = t.val(pred) - target;
  Mat v(1, 1);
  v(0, 0) = diff.squaredNorm() / n;
  if (!t.needs_grad(pred)) return t.constant(std::move(v));
  return t.push(std::move(v), true, [pred, diff = std::move(diff), n](Tape& t, int self) {
    double g = t.grad_ref(self)(0, 0);
    t.accum(pred.i, diff * (2.0 * g / n));
  });
}

}  // namespace bparse::ad
