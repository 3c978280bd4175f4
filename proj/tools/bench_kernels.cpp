// Compares the OpenMP kernels against the serial reference implementation:
// wall time plus a bitwise equality check on every output.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>

#include "coft/ops.hpp"

using namespace coft;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Tensor random_tensor(std::vector<int64_t> shape, SeededRng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = float(rng.gaussian());
    return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

template <typename F>
double time_best_of(int reps, F&& fn) {
    double best = 1e30;
    for (int i = 0; i < reps; ++i) {
        auto t0 = Clock::now();
        fn();
        best = std::min(best, ms_since(t0));
    }
    return best;
}

} // namespace

int main(int argc, char** argv) {
    int64_t n = argc > 1 ? std::atoll(argv[1]) : 512;
    int reps = argc > 2 ? std::atoi(argv[2]) : 3;
    std::printf("threads: %d\n", max_threads());

    SeededRng rng(7);
    Tensor a = random_tensor({n, n}, rng);
    Tensor b = random_tensor({n, n}, rng);
    Tensor w = random_tensor({n}, rng);

    Tensor out_par, out_ser;
    double t_par = time_best_of(reps, [&] { out_par = matmul(a, b); });
    double t_ser = time_best_of(reps, [&] { out_ser = serial_ref::matmul(a, b); });
    double gflop = 2.0 * double(n) * double(n) * double(n) / 1e9;
    std::printf("matmul %lldx%lld      omp %8.2f ms (%6.2f GFLOP/s)   serial %8.2f ms (%6.2f GFLOP/s)   bit-equal %s\n",
                (long long)n, (long long)n, t_par, gflop / (t_par / 1e3), t_ser, gflop / (t_ser / 1e3),
                bit_equal(out_par, out_ser) ? "yes" : "NO");

    double s_par = time_best_of(reps, [&] { out_par = softmax_lastdim(a); });
    double s_ser = time_best_of(reps, [&] { out_ser = serial_ref::softmax_lastdim(a); });
    std::printf("softmax %lld rows     omp %8.2f ms                     serial %8.2f ms                     bit-equal %s\n",
                (long long)n, s_par, s_ser, bit_equal(out_par, out_ser) ? "yes" : "NO");

    double r_par = time_best_of(reps, [&] { out_par = rmsnorm(a, w, 1e-6f); });
    double r_ser = time_best_of(reps, [&] { out_ser = serial_ref::rmsnorm(a, w, 1e-6f); });
    std::printf("rmsnorm %lld rows     omp %8.2f ms                     serial %8.2f ms                     bit-equal %s\n",
                (long long)n, r_par, r_ser, bit_equal(out_par, out_ser) ? "yes" : "NO");

    double l_par = time_best_of(reps, [&] { out_par = silu(a); });
    double l_ser = time_best_of(reps, [&] { out_ser = serial_ref::silu(a); });
    std::printf("silu %lldx%lld        omp %8.2f ms                     serial %8.2f ms                     bit-equal %s\n",
                (long long)n, (long long)n, l_par, l_ser, bit_equal(out_par, out_ser) ? "yes" : "NO");
    return 0;
}
