#include "bparse/trainer.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace bparse {

void LossLog::write_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write loss log " + path);
  f << "step,loss\n";
  char buf[64];
  for (const auto& [step, loss] : entries) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g\n", static_cast<long long>(step), loss);
    f << buf;
  }
}

LossLog read_loss_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read loss log " + path);
  LossLog log;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    size_t comma = line.find(',');
    if (comma == std::string::npos) throw DataError("bad loss log line: " + line);
    log.record(std::stoll(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
  }
  return log;
}

BatchSampler::BatchSampler(int n_cases, int batch_size, uint64_t seed)
    : n_(n_cases), batch_(batch_size), rng_(seed) {
  if (n_ < 1) throw ConfigError("batch sampler needs at least one case");
  if (batch_ < 1) throw ConfigError("batch size must be >= 1");
  order_ = rng_.permutation(n_);
}

std::vector<int> BatchSampler::next() {
  std::vector<int> idx;
  idx.reserve(batch_);
  for (int k = 0; k < batch_; ++k) {
    if (cursor_ == order_.size()) {
      order_ = rng_.permutation(n_);
      cursor_ = 0;
    }
    idx.push_back(order_[cursor_++]);
  }
  return idx;
}

}  // namespace bparse
