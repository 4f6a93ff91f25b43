#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bparse {

// SHA-256 hex digest (OpenSSL-backed). Used for parameter-freeze checks
// and config hashes embedded in checkpoints.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

}  // namespace bparse
