#include "bparse/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace bparse {

using ordered_json = nlohmann::ordered_json;

static constexpr char kMagic[8] = {'B', 'P', 'C', 'K', 'P', 'T', '0', '1'};

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  ordered_json header;
  ordered_json meta;
  meta["stage"] = c.meta.stage;
  meta["step"] = c.meta.step;
  meta["seed"] = c.meta.seed;
  meta["config_hash"] = c.meta.config_hash;
  meta["config"] = c.meta.config_text;
  meta["metrics"] = c.meta.metrics;
  header["meta"] = meta;
  ordered_json tensors = ordered_json::array();
  uint64_t offset = 0;
  for (const auto& [name, m] : c.params.all()) {  // std::map: already name-sorted
    ordered_json t;
    t["name"] = name;
    t["dtype"] = "f64le";
    t["rows"] = m.rows();
    t["cols"] = m.cols();
    t["offset"] = offset;
    t["nbytes"] = uint64_t(m.size()) * sizeof(double);
    offset += uint64_t(m.size()) * sizeof(double);
    tensors.push_back(std::move(t));
  }
  header["tensors"] = std::move(tensors);
  std::string hjson = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint " + path);
  f.write(kMagic, 8);
  uint64_t hlen = hjson.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hjson.data(), std::streamsize(hjson.size()));
  for (const auto& [name, m] : c.params.all())
    f.write(reinterpret_cast<const char*>(m.data()),
            std::streamsize(size_t(m.size()) * sizeof(double)));
  if (!f) throw DataError("short write on checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(IoErrorCode::FileMissing, "missing checkpoint " + path);
  char magic[8];
  uint64_t hlen = 0;
  f.read(magic, 8);
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError(IoErrorCode::MalformedHeader, "not a checkpoint file: " + path);
  std::string hjson(hlen, '\0');
  f.read(hjson.data(), std::streamsize(hlen));
  if (!f) throw IoError(IoErrorCode::MalformedHeader, "truncated checkpoint header: " + path);
  ordered_json header;
  try {
    header = ordered_json::parse(hjson);
  } catch (const std::exception& e) {
    throw IoError(IoErrorCode::MalformedHeader, std::string("bad checkpoint header: ") + e.what());
  }

  Checkpoint c;
  try {
    const auto& meta = header.at("meta");
    c.meta.stage = meta.at("stage").get<std::string>();
    c.meta.step = meta.at("step").get<int64_t>();
    c.meta.seed = meta.at("seed").get<uint64_t>();
    c.meta.config_hash = meta.at("config_hash").get<std::string>();
    c.meta.config_text = meta.value("config", std::string());
    c.meta.metrics = meta.value("metrics", ordered_json::object());
    for (const auto& t : header.at("tensors")) {
      std::string name = t.at("name").get<std::string>();
      std::string dtype = t.at("dtype").get<std::string>();
      if (dtype != "f64le")
        throw IoError(IoErrorCode::UnsupportedDtype, "checkpoint tensor dtype " + dtype);
      int64_t rows = t.at("rows").get<int64_t>();
      int64_t cols = t.at("cols").get<int64_t>();
      uint64_t nbytes = t.at("nbytes").get<uint64_t>();
      if (nbytes != uint64_t(rows) * cols * sizeof(double))
        throw IoError(IoErrorCode::ByteCountMismatch, "tensor byte count mismatch for " + name);
      Mat m(rows, cols);
      f.read(reinterpret_cast<char*>(m.data()), std::streamsize(nbytes));
      if (!f) throw IoError(IoErrorCode::ByteCountMismatch, "truncated payload for " + name);
      c.params.add(name, std::move(m));
    }
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(IoErrorCode::MalformedHeader, std::string("bad checkpoint header: ") + e.what());
  }
  return c;
}

}  // namespace bparse
