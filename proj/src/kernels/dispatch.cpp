#include <cstdlib>
#include <string_view>

#include "gdkvm/kernels.hpp"

namespace gdkvm::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(GDKVM_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

bool forced_scalar() {
  const char* env = std::getenv("GDKVM_SIMD");
  return env != nullptr && std::string_view(env) == "scalar";
}

}  // namespace

#ifndef GDKVM_HAVE_AVX2
namespace detail {
template <typename T>
const KernelTable<T>* avx2_table() {
  return nullptr;
}
template const KernelTable<float>* avx2_table<float>();
template const KernelTable<double>* avx2_table<double>();
}  // namespace detail
#endif

template <typename T>
const KernelTable<T>* avx2() {
  static const bool ok = cpu_has_avx2();
  return ok ? detail::avx2_table<T>() : nullptr;
}

template <typename T>
const KernelTable<T>& active() {
  static const KernelTable<T>& table = []() -> const KernelTable<T>& {
    if (!forced_scalar()) {
      if (const auto* t = avx2<T>()) return *t;
    }
    return scalar<T>();
  }();
  return table;
}

template const KernelTable<float>* avx2<float>();
template const KernelTable<double>* avx2<double>();
template const KernelTable<float>& active<float>();
template const KernelTable<double>& active<double>();

}  // namespace gdkvm::kernels
