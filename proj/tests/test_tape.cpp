#include "bparse/tape.hpp"

#include "bparse/nn.hpp"
#include "oracles.hpp"

#include <doctest.h>

using namespace bparse;
using ad::Tape;
using ad::Var;

namespace {

// Finite-difference check of one op: the loss is a fixed random weighting
// of the op output, differentiated w.r.t. each input. Inputs are bound
// onto the tape in order, so their Var ids are 0..K-1.
struct OpCheck {
  std::function<Var(Tape&, const std::vector<Var>&)> build;
  std::vector<Mat> inputs;
  Mat weights;  // same shape as the op output

  Var bind_and_build(Tape& t, const std::vector<Mat>& xs, bool trainable) const {
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const auto& x : xs) vs.push_back(trainable ? t.param(x) : t.constant(x));
    return build(t, vs);
  }

  double loss_at(const std::vector<Mat>& xs) const {
    Tape t;
    Var out = bind_and_build(t, xs, false);
    Var l = ad::mean_all(t, ad::hadamard(t, out, t.constant(weights)));
    return t.val(l)(0, 0);
  }

  void run(double tol = 1e-6) const {
    Tape t;
    Var out = bind_and_build(t, inputs, true);
    Var l = ad::mean_all(t, ad::hadamard(t, out, t.constant(weights)));
    t.backward(l);
    for (size_t k = 0; k < inputs.size(); ++k) {
      auto f = [&](const Mat& x) {
        std::vector<Mat> mod = inputs;
        mod[k] = x;
        return loss_at(mod);
      };
      Mat fd = oracle::fd_grad(f, inputs[k]);
      const Mat& an = t.grad(Var{int(k)});
      REQUIRE(an.size() == fd.size());
      CHECK(oracle::max_rel_err(an, fd) < tol);
    }
  }
};

Rng& rng() {
  static Rng r(20240811);
  return r;
}

Mat rmat(int64_t r, int64_t c) { return oracle::random_mat(rng(), r, c); }

}  // namespace

TEST_CASE("elementwise and broadcast ops match finite differences") {
  OpCheck chk;
  chk.inputs = {rmat(4, 3), rmat(4, 3)};
  chk.weights = rmat(4, 3);
  chk.build = [](Tape& t, const std::vector<Var>& v) {
    return ad::add(t, ad::hadamard(t, v[0], v[1]), ad::sub(t, ad::scale(t, v[0], 0.7), v[1]));
  };
  chk.run();

  OpCheck bias;
  bias.inputs = {rmat(5, 4), rmat(1, 4)};
  bias.weights = rmat(5, 4);
  bias.build = [](Tape& t, const std::vector<Var>& v) { return ad::add_rowvec(t, v[0], v[1]); };
  bias.run();

  OpCheck tiled;
  tiled.inputs = {rmat(6, 3), rmat(3, 3)};
  tiled.weights = rmat(6, 3);
  tiled.build = [](Tape& t, const std::vector<Var>& v) { return ad::add_tiled(t, v[0], v[1], 2); };
  tiled.run();

  OpCheck tile;
  tile.inputs = {rmat(1, 5)};
  tile.weights = rmat(7, 5);
  tile.build = [](Tape& t, const std::vector<Var>& v) { return ad::tile_rows(t, v[0], 7); };
  tile.run();
}

TEST_CASE("activations match finite differences") {
  // Keep inputs away from the relu kink so central differences are clean.
  Mat x = rmat(5, 4);
  for (int64_t i = 0; i < x.size(); ++i)
    if (std::abs(x.data()[i]) < 0.05) x.data()[i] += 0.1;

  for (int which = 0; which < 4; ++which) {
    OpCheck chk;
    chk.inputs = {x};
    chk.weights = rmat(5, 4);
    chk.build = [which](Tape& t, const std::vector<Var>& v) {
      switch (which) {
        case 0: return ad::relu(t, v[0]);
        case 1: return ad::leaky_relu(t, v[0], 0.2);
        case 2: return ad::sigmoid(t, v[0]);
        default: return ad::gelu(t, v[0]);
      }
    };
    chk.run(1e-5);
  }
}

TEST_CASE("matmul family matches finite differences") {
  OpCheck mm;
  mm.inputs = {rmat(4, 3), rmat(3, 5)};
  mm.weights = rmat(4, 5);
  mm.build = [](Tape& t, const std::vector<Var>& v) { return ad::matmul(t, v[0], v[1]); };
  mm.run();

  OpCheck shared;  // out_b = P * x_b, batch 2
  shared.inputs = {rmat(3, 4), rmat(8, 2)};
  shared.weights = rmat(6, 2);
  shared.build = [](Tape& t, const std::vector<Var>& v) {
    return ad::shared_left_matmul(t, v[0], v[1], 2);
  };
  shared.run();

  OpCheck nn;  // a_b: 3x2, b_b: 2x4, batch 2
  nn.inputs = {rmat(6, 2), rmat(4, 4)};
  nn.weights = rmat(6, 4);
  nn.build = [](Tape& t, const std::vector<Var>& v) { return ad::bmm_nn(t, v[0], v[1], 2); };
  nn.run();

  OpCheck nt;  // a_b: 3x2, b_b: 4x2 -> 3x4, batch 2
  nt.inputs = {rmat(6, 2), rmat(8, 2)};
  nt.weights = rmat(6, 4);
  nt.build = [](Tape& t, const std::vector<Var>& v) { return ad::bmm_nt(t, v[0], v[1], 2); };
  nt.run();
}

TEST_CASE("layernorm and softmax match finite differences") {
  OpCheck ln;
  ln.inputs = {rmat(5, 6), rmat(1, 6), rmat(1, 6)};
  ln.weights = rmat(5, 6);
  ln.build = [](Tape& t, const std::vector<Var>& v) {
    return ad::layernorm(t, v[0], v[1], v[2]);
  };
  ln.run(1e-5);

  OpCheck sm;
  sm.inputs = {rmat(6, 5)};
  sm.weights = rmat(6, 5);
  sm.build = [](Tape& t, const std::vector<Var>& v) { return ad::softmax_rows(t, v[0]); };
  sm.run(1e-5);

  Eigen::MatrixXi support = oracle::random_adjacency(rng(), 5);
  OpCheck msm;
  msm.inputs = {rmat(10, 5)};
  msm.weights = rmat(10, 5);
  msm.build = [support](Tape& t, const std::vector<Var>& v) {
    return ad::masked_softmax_rows(t, v[0], support, 2);
  };
  msm.run(1e-5);
}

TEST_CASE("masked softmax zeros exactly the non-edges and rows sum to 1") {
  Eigen::MatrixXi support = oracle::random_adjacency(rng(), 7, 0.3);
  Tape t;
  Mat x = rmat(14, 7);
  Var y = ad::masked_softmax_rows(t, t.constant(x), support, 2);
  const Mat& v = t.val(y);
  for (int r = 0; r < 14; ++r) {
    double sum = 0.0;
    for (int j = 0; j < 7; ++j) {
      if (!support(r % 7, j)) CHECK(v(r, j) == 0.0);
      sum += v(r, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("structural ops match finite differences") {
  OpCheck sl;
  sl.inputs = {rmat(4, 6)};
  sl.weights = rmat(4, 3);
  sl.build = [](Tape& t, const std::vector<Var>& v) { return ad::slice_cols(t, v[0], 2, 3); };
  sl.run();

  OpCheck cc;
  cc.inputs = {rmat(4, 2), rmat(4, 3)};
  cc.weights = rmat(4, 5);
  cc.build = [](Tape& t, const std::vector<Var>& v) { return ad::concat_cols(t, v[0], v[1]); };
  cc.run();

  std::vector<int> idx = {1, 3};
  OpCheck rr;
  rr.inputs = {rmat(8, 3), rmat(8, 3)};
  rr.weights = rmat(8, 3);
  rr.build = [idx](Tape& t, const std::vector<Var>& v) {
    return ad::row_replace(t, v[0], v[1], idx, 2, 4);
  };
  rr.run();

  OpCheck sel;
  sel.inputs = {rmat(8, 3)};
  sel.weights = rmat(4, 3);
  sel.build = [idx](Tape& t, const std::vector<Var>& v) {
    return ad::select_token_rows(t, v[0], idx, 2, 4);
  };
  sel.run();
}

TEST_CASE("patch gather/scatter and block_expand match finite differences") {
  PatchGrid g = make_patch_grid(Vec3i(4, 4, 2), Vec3i(2, 2, 1), 3);
  const int64_t v = voxel_count(g.volume_shape());

  OpCheck gather;
  gather.inputs = {rmat(2 * v, 1)};
  gather.weights = rmat(2 * g.tokens(), g.patch_voxels());
  gather.build = [g](Tape& t, const std::vector<Var>& vs) {
    return ad::gather_patches_op(t, vs[0], g, 2);
  };
  gather.run();

  OpCheck scatter;
  scatter.inputs = {rmat(2 * g.tokens(), g.patch_voxels())};
  scatter.weights = rmat(2 * v, 1);
  scatter.build = [g](Tape& t, const std::vector<Var>& vs) {
    return ad::scatter_patches_op(t, vs[0], g, 2);
  };
  scatter.run();

  Vec3i coarse(2, 2, 1), factors(2, 1, 2);
  const int k = factors.prod(), ch = 3;
  OpCheck be;
  be.inputs = {rmat(2 * coarse.prod(), k * ch)};
  be.weights = rmat(2 * coarse.prod() * k, ch);
  be.build = [coarse, factors, ch](Tape& t, const std::vector<Var>& vs) {
    return ad::block_expand(t, vs[0], coarse, factors, ch, 2);
  };
  be.run();
}

TEST_CASE("gat building-block ops match finite differences") {
  const int v = 4, c = 3, batch = 2;
  OpCheck logits;
  logits.inputs = {rmat(batch * v, c), rmat(batch * v, c), rmat(c, 1)};
  logits.weights = rmat(batch * v, v);
  logits.build = [=](Tape& t, const std::vector<Var>& vs) {
    return ad::gat_pair_logits(t, vs[0], vs[1], vs[2], 0.2, batch, v);
  };
  logits.run(1e-5);

  // alpha entering gat_aggregate can be any dense matrix for the FD check.
  OpCheck agg;
  agg.inputs = {rmat(batch * v, v), rmat(batch * v, c), rmat(batch * v, c)};
  agg.weights = rmat(batch * v, c);
  agg.build = [=](Tape& t, const std::vector<Var>& vs) {
    return ad::gat_aggregate(t, vs[0], vs[1], vs[2], batch, v);
  };
  agg.run();
}

TEST_CASE("mse op matches finite differences and reports the mean") {
  Mat target = rmat(5, 2);
  OpCheck chk;
  chk.inputs = {rmat(5, 2)};
  chk.weights = Mat::Ones(1, 1) * 10.0;  // scalar loss weighting
  chk.build = [target](Tape& t, const std::vector<Var>& v) {
    return ad::mse_loss_op(t, v[0], target);
  };
  chk.run();

  Tape t;
  Var l = ad::mse_loss_op(t, t.constant(Mat::Zero(2, 1)), (Mat(2, 1) << 1.0, 1.0).finished());
  CHECK(t.val(l)(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("block_expand places offsets in x-fastest raster order") {
  // One coarse cell expanding by (2,2,1), channel 1: output rows must
  // follow ox + 2*oy ordering.
  Tape t;
  Mat in(1, 4);
  in << 10, 11, 12, 13;  // offset-major columns
  Var out = ad::block_expand(t, t.constant(in), Vec3i(1, 1, 1), Vec3i(2, 2, 1), 1, 1);
  const Mat& v = t.val(out);
  REQUIRE(v.rows() == 4);
  CHECK(v(0, 0) == 10);
  CHECK(v(1, 0) == 11);
  CHECK(v(2, 0) == 12);
  CHECK(v(3, 0) == 13);
}
