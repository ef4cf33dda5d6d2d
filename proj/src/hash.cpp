// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/hash.hpp"

#include "knowtrace/common.hpp"

#include <fstream>
#include <vector>

namespace knowtrace {

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for hashing: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a64(buf.data(), static_cast<size_t>(in.gcount()), h);
  }
  return hash_hex(h);
}

}  // namespace knowtrace
