#include "kernels_impl.hpp"

#include "spon/error.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace spon::kernels {

const KernelTable* avx2_table() {
#if defined(SPON_HAVE_AVX2)
    return cpu_supports_avx2() ? &avx2_table_impl() : nullptr;
#else
    return nullptr;
#endif
}

bool cpu_supports_avx2() {
#if defined(SPON_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return ok;
#else
    return false;
#endif
}

namespace {

const KernelTable* initial_table() {
    if (const char* env = std::getenv("SPON_KERNELS")) {
        const std::string want(env);
        if (want == "scalar") return &scalar_table();
        if (want == "avx2" && avx2_table()) return avx2_table();
    }
    if (const KernelTable* t = avx2_table()) return t;
    return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
    static std::atomic<const KernelTable*> table{initial_table()};
    return table;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

void set_backend(Backend b) {
    const KernelTable* t = b == Backend::Scalar ? &scalar_table() : avx2_table();
    if (!t) throw InputError("kernel backend '" + std::string(backend_name(b)) + "' is not available on this CPU");
    current().store(t, std::memory_order_release);
}

Backend backend() { return active().backend; }

std::string_view backend_name(Backend b) { return b == Backend::Scalar ? "scalar" : "avx2"; }

}  // namespace spon::kernels
