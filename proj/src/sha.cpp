#include "bparse/sha.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace bparse {

std::string sha256_hex(const void* data, size_t len) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  if (EVP_Digest(data, len, md, &md_len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(md_len * 2);
  for (unsigned int i = 0; i < md_len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

}  // namespace bparse
