#pragma once

#include <cstddef>
#include <new>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdi {

/// Allocator pinning float buffers to 64-byte boundaries. Vectorized kernels
/// peel scalar elements until the pointer is aligned, so an unaligned buffer
/// makes summation order (and float rounding) depend on heap layout. Pinning
/// the start keeps every reduction bit-identical across runs.
template <typename T>
struct Aligned64Alloc {
  using value_type = T;
  Aligned64Alloc() = default;
  template <typename U>
  Aligned64Alloc(const Aligned64Alloc<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(
        ::operator new(n * sizeof(T), std::align_val_t(64)));
  }
  void deallocate(T* p, std::size_t) {
    ::operator delete(p, std::align_val_t(64));
  }
  bool operator==(const Aligned64Alloc&) const { return true; }
};

using FloatVec = std::vector<float, Aligned64Alloc<float>>;

/// Error type thrown on precondition violations and unrecoverable failures.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  throw Error(os.str());
}

template <typename... Args>
void check(bool cond, const Args&... args) {
  if (!cond) fail(args...);
}

}  // namespace mdi
