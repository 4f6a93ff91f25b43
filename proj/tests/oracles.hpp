#pragma once

// Independent oracles for the test suites. Everything here is written as
// plain per-element loops, deliberately avoiding the library's compute
// paths, so agreement is meaningful.

#include "bparse/common.hpp"
#include "bparse/gat.hpp"
#include "bparse/rng.hpp"
#include "bparse/volume.hpp"

#include <cmath>
#include <functional>
#include <queue>
#include <vector>

namespace oracle {

using bparse::Mat;
using bparse::Vec3d;
using bparse::Vec3i;

// Per-node, per-coefficient evaluation of the graph-attention layer
// (single batch item): x is V x C, returns V x C'.
inline Mat gat_forward(const Mat& x, const Eigen::MatrixXi& adj,
                       const bparse::GATLayerParams& p) {
  const int v = int(adj.rows());
  const int cp = int(p.theta_s.cols());
  auto lrelu = [&](double z) { return z > 0.0 ? z : p.negative_slope * z; };
  Mat out = Mat::Zero(v, cp);
  for (int i = 0; i < v; ++i) {
    // attention logits over N(i) u {i}
    std::vector<int> nbrs;
    for (int j = 0; j < v; ++j)
      if (adj(i, j)) nbrs.push_back(j);
    std::vector<double> logits(nbrs.size());
    for (size_t k = 0; k < nbrs.size(); ++k) {
      double dot = 0.0;
      for (int c = 0; c < cp; ++c) {
        double si = 0.0, tj = 0.0;
        for (int q = 0; q < x.cols(); ++q) {
          si += p.theta_s(q, c) * x(i, q);
          tj += p.theta_t(q, c) * x(nbrs[k], q);
        }
        dot += p.attn_vec[c] * lrelu(si + tj);
      }
      logits[k] = dot;
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - mx);
    for (size_t k = 0; k < nbrs.size(); ++k) {
      double alpha = std::exp(logits[k] - mx) / denom;
      int j = nbrs[k];
      for (int c = 0; c < cp; ++c) {
        double feat = 0.0;
        for (int q = 0; q < x.cols(); ++q)
          feat += (j == i ? p.theta_s(q, c) : p.theta_t(q, c)) * x(j, q);
        out(i, c) += alpha * feat;
      }
    }
  }
  return out;
}

// Brute-force attention coefficients, dense V x V with zeros off-support.
inline Mat gat_alpha(const Mat& x, const Eigen::MatrixXi& adj, const bparse::GATLayerParams& p) {
  const int v = int(adj.rows());
  const int cp = int(p.theta_s.cols());
  auto lrelu = [&](double z) { return z > 0.0 ? z : p.negative_slope * z; };
  Mat alpha = Mat::Zero(v, v);
  for (int i = 0; i < v; ++i) {
    double denom = 0.0;
    std::vector<double> e(v, 0.0);
    for (int j = 0; j < v; ++j) {
      if (!adj(i, j)) continue;
      double dot = 0.0;
      for (int c = 0; c < cp; ++c) {
        double si = 0.0, tj = 0.0;
        for (int q = 0; q < x.cols(); ++q) {
          si += p.theta_s(q, c) * x(i, q);
          tj += p.theta_t(q, c) * x(j, q);
        }
        dot += p.attn_vec[c] * lrelu(si + tj);
      }
      e[j] = std::exp(dot);
      denom += e[j];
    }
    for (int j = 0; j < v; ++j)
      if (adj(i, j)) alpha(i, j) = e[j] / denom;
  }
  return alpha;
}

// Central finite differences of f at x, one element at a time.
inline Mat fd_grad(const std::function<double(const Mat&)>& f, const Mat& x, double h = 1e-6) {
  Mat g(x.rows(), x.cols());
  Mat xp = x;
  for (int64_t c = 0; c < x.cols(); ++c)
    for (int64_t r = 0; r < x.rows(); ++r) {
      double step = h * (1.0 + std::abs(x(r, c)));
      xp(r, c) = x(r, c) + step;
      double fp = f(xp);
      xp(r, c) = x(r, c) - step;
      double fm = f(xp);
      xp(r, c) = x(r, c);
      g(r, c) = (fp - fm) / (2.0 * step);
    }
  return g;
}

// Relative-error comparison used by every gradient check.
inline double max_rel_err(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (int64_t c = 0; c < a.cols(); ++c)
    for (int64_t r = 0; r < a.rows(); ++r) {
      double denom = std::max({std::abs(a(r, c)), std::abs(b(r, c)), 1e-3});
      worst = std::max(worst, std::abs(a(r, c) - b(r, c)) / denom);
    }
  return worst;
}

// BFS connectivity from a start node over an adjacency matrix.
inline int bfs_reachable(const Eigen::MatrixXi& adj, int start) {
  std::vector<bool> seen(adj.rows(), false);
  std::queue<int> q;
  q.push(start);
  seen[start] = true;
  int count = 0;
  while (!q.empty()) {
    int i = q.front();
    q.pop();
    ++count;
    for (int j = 0; j < adj.cols(); ++j)
      if (adj(i, j) && !seen[j]) {
        seen[j] = true;
        q.push(j);
      }
  }
  return count;
}

// Per-voxel confusion scan.
struct Confusion {
  long long tp = 0, fp = 0, fn = 0, tn = 0;
};
inline Confusion confusion_scan(const bparse::LabelVolume& pred, const bparse::LabelVolume& gt,
                                int cls) {
  Confusion c;
  for (int64_t i = 0; i < pred.size(); ++i) {
    bool p = pred.labels[i] == cls, g = gt.labels[i] == cls;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// All-pairs directed 95th percentile distance between two point sets.
inline double directed_p95_bruteforce(const std::vector<Vec3i>& a, const std::vector<Vec3i>& b,
                                      const Vec3d& spacing) {
  std::vector<double> dists;
  dists.reserve(a.size());
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      double dx = (p[0] - q[0]) * spacing[0];
      double dy = (p[1] - q[1]) * spacing[1];
      double dz = (p[2] - q[2]) * spacing[2];
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    dists.push_back(best);
  }
  std::sort(dists.begin(), dists.end());
  if (dists.size() == 1) return dists[0];
  double pos = 0.95 * double(dists.size() - 1);
  size_t lo = size_t(pos);
  double frac = pos - double(lo);
  return dists[lo] + frac * (dists[std::min(lo + 1, dists.size() - 1)] - dists[lo]);
}

inline double hd95_bruteforce(const std::vector<Vec3i>& a, const std::vector<Vec3i>& b,
                              const Vec3d& spacing) {
  return std::max(directed_p95_bruteforce(a, b, spacing),
                  directed_p95_bruteforce(b, a, spacing));
}

// Random helpers.
inline Mat random_mat(bparse::Rng& rng, int64_t r, int64_t c, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (int64_t j = 0; j < c; ++j)
    for (int64_t i = 0; i < r; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Random symmetric adjacency with forced self-loops.
inline Eigen::MatrixXi random_adjacency(bparse::Rng& rng, int v, double edge_prob = 0.4) {
  Eigen::MatrixXi adj = Eigen::MatrixXi::Identity(v, v);
  for (int i = 0; i < v; ++i)
    for (int j = i + 1; j < v; ++j)
      if (rng.uniform() < edge_prob) adj(i, j) = adj(j, i) = 1;
  return adj;
}

}  // namespace oracle
