#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace mdi {

/// Incremental FNV-1a content digest. Not cryptographic; used to key
/// artifacts, detect content changes, and verify determinism.
class Digest {
 public:
  Digest& bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  Digest& str(const std::string& s) {
    std::uint64_t len = s.size();
    bytes(&len, sizeof(len));
    return bytes(s.data(), s.size());
  }

  template <typename T>
  Digest& pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    return bytes(&v, sizeof(T));
  }

  template <typename T, typename Alloc>
  Digest& vec(const std::vector<T, Alloc>& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint64_t len = v.size();
    bytes(&len, sizeof(len));
    return bytes(v.data(), v.size() * sizeof(T));
  }

  std::uint64_t value() const { return h_; }

  std::string hex() const {
    static const char* k = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t v = h_;
    for (int i = 15; i >= 0; --i) {
      out[std::size_t(i)] = k[v & 0xf];
      v >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace mdi
