#pragma once

#include "bparse/common.hpp"
#include "bparse/rng.hpp"

#include <string>
#include <utility>
#include <vector>

namespace bparse {

// (step, loss) pairs; persisted as a two-column CSV `step,loss`.
struct LossLog {
  std::vector<std::pair<int64_t, double>> entries;

  void record(int64_t step, double loss) { entries.emplace_back(step, loss); }
  void write_csv(const std::string& path) const;
};

LossLog read_loss_csv(const std::string& path);

// Deterministic batch sampler: reshuffles the index set every epoch.
class BatchSampler {
 public:
  BatchSampler(int n_cases, int batch_size, uint64_t seed);
  std::vector<int> next();

 private:
  int n_;
  int batch_;
  Rng rng_;
  std::vector<int> order_;
  size_t cursor_ = 0;
};

}  // namespace bparse
