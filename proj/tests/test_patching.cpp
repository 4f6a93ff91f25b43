#include "bparse/patch.hpp"

#include "oracles.hpp"

#include <doctest.h>

using namespace bparse;

TEST_CASE("grid construction checks divisibility and names the axis") {
  PatchGrid g = make_patch_grid(Vec3i(64, 64, 64), Vec3i(16, 16, 16), 64);
  CHECK(g.tokens() == 64);  // 4*4*4
  CHECK(g.patch_voxels() == 4096);
  try {
    make_patch_grid(Vec3i(64, 60, 64), Vec3i(16, 16, 16), 64);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("y (H)") != std::string::npos);
  }
}

TEST_CASE("identity embedding reproduces flattened patches") {
  PatchGrid g = make_patch_grid(Vec3i(4, 4, 4), Vec3i(2, 2, 2), 8);
  const double c = 3.25;
  Mat vol = Mat::Constant(voxel_count(g.volume_shape()), 1, c);
  PatchSequence seq = patchify(vol, 1, g, Mat::Identity(8, 8));
  CHECK(seq.tokens.rows() == 8);
  CHECK((seq.tokens.array() == c).all());
}

TEST_CASE("patchify/unpatchify with inverse maps round-trips the volume") {
  Rng rng(11);
  PatchGrid g = make_patch_grid(Vec3i(6, 4, 4), Vec3i(3, 2, 2), 12);
  Mat vol = oracle::random_mat(rng, 2 * voxel_count(g.volume_shape()), 1);
  // Random orthogonal-ish invertible embed: use QR of a random matrix.
  Mat a = oracle::random_mat(rng, 12, 12) + 3.0 * Mat::Identity(12, 12);
  Mat inv = a.inverse();
  PatchSequence seq = patchify(vol, 2, g, a);
  Mat back = unpatchify(seq, inv);
  CHECK((back - vol).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("patchify is linear in the volume") {
  Rng rng(12);
  PatchGrid g = make_patch_grid(Vec3i(4, 4, 2), Vec3i(2, 2, 2), 5);
  Mat embed = oracle::random_mat(rng, g.patch_voxels(), 5);
  Mat v1 = oracle::random_mat(rng, voxel_count(g.volume_shape()), 1);
  Mat v2 = oracle::random_mat(rng, voxel_count(g.volume_shape()), 1);
  double a = 1.7, b = -0.4;
  Mat lhs = patchify(a * v1 + b * v2, 1, g, embed).tokens;
  Mat rhs = a * patchify(v1, 1, g, embed).tokens + b * patchify(v2, 1, g, embed).tokens;
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("token raster order matches an independent index oracle") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    Vec3i grid_dims(int(1 + rng.below(4)), int(1 + rng.below(4)), int(1 + rng.below(4)));
    Vec3i patch(int(1 + rng.below(3)), int(1 + rng.below(3)), int(1 + rng.below(3)));
    Vec3i shape = patch.cwiseProduct(grid_dims);
    PatchGrid g = make_patch_grid(shape, patch, 4);
    // Volume whose voxel value encodes its own flat index.
    Mat vol(voxel_count(shape), 1);
    for (int64_t i = 0; i < vol.rows(); ++i) vol(i, 0) = double(i);
    Mat patches = gather_patches(vol, g, 1);
    for (int n = 0; n < g.tokens(); ++n) {
      // Independent recomputation via div/mod.
      int ix = n % grid_dims[0];
      int iy = (n / grid_dims[0]) % grid_dims[1];
      int iz = n / (grid_dims[0] * grid_dims[1]);
      for (int p = 0; p < g.patch_voxels(); ++p) {
        int ox = p % patch[0];
        int oy = (p / patch[0]) % patch[1];
        int oz = p / (patch[0] * patch[1]);
        int64_t vx = ix * patch[0] + ox;
        int64_t vy = iy * patch[1] + oy;
        int64_t vz = iz * patch[2] + oz;
        int64_t flat = vx + shape[0] * (vy + int64_t(shape[1]) * vz);
        REQUIRE(patches(n, p) == double(flat));
      }
    }
  }
}

TEST_CASE("one-hot token lands on the decoded patch location") {
  PatchGrid g = make_patch_grid(Vec3i(4, 4, 4), Vec3i(2, 2, 2), 8);
  PatchSequence seq;
  seq.batch = 1;
  seq.grid = g;
  seq.tokens = Mat::Zero(g.tokens(), 8);
  const int token = 5, offset = 3;
  seq.tokens(token, offset) = 1.0;
  Mat vol = unpatchify(seq, Mat::Identity(8, 8));
  CHECK(vol.sum() == doctest::Approx(1.0));
  CHECK(vol(patch_voxel_index(g, token, offset), 0) == doctest::Approx(1.0));

  PatchSequence zeros = seq;
  zeros.tokens.setZero();
  CHECK(unpatchify(zeros, Mat::Identity(8, 8)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unpatchify rejects inconsistent token counts") {
  PatchGrid g = make_patch_grid(Vec3i(4, 4, 4), Vec3i(2, 2, 2), 8);
  PatchSequence seq;
  seq.batch = 1;
  seq.grid = g;
  seq.tokens = Mat::Zero(g.tokens() - 1, 8);
  CHECK_THROWS_AS(unpatchify(seq, Mat::Identity(8, 8)), DimensionError);
}
