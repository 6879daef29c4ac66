// Kernel benchmark: OpenMP-parallel kernels against the serial reference.
// Shapes follow the desk-scale training step (batch 16, 64 tokens, width 128).

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "mdtbox/kernels.hpp"
#include "mdtbox/rng.hpp"

using namespace mdtbox;
namespace k = mdtbox::kern;
using clock_t_ = std::chrono::steady_clock;

namespace {

double time_of(const std::function<void()>& fn, int reps) {
    fn(); // warm up
    auto t0 = clock_t_::now();
    for (int i = 0; i < reps; ++i) fn();
    return std::chrono::duration<double>(clock_t_::now() - t0).count() / reps;
}

void report(const char* name, double flops, double t_omp, double t_ref) {
    std::printf("%-22s %10.3f ms %10.3f ms %8.2fx %10.2f GFLOP/s\n", name, t_omp * 1e3,
                t_ref * 1e3, t_ref / t_omp, flops / t_omp / 1e9);
}

} // namespace

int main(int argc, char** argv) {
    int reps = argc > 1 ? std::atoi(argv[1]) : 20;
    const int B = 16, L = 64, D = 128, H = 8;
    const int rows = B * L;
    Rng rng(0);

    std::printf("threads: %d, reps: %d\n", omp_get_max_threads(), reps);
    std::printf("%-22s %13s %13s %9s %12s\n", "kernel", "omp", "serial", "speedup", "omp rate");

    std::vector<double> x(static_cast<size_t>(rows) * 4 * D), w(static_cast<size_t>(4) * D * D),
        b(static_cast<size_t>(4) * D), y(static_cast<size_t>(rows) * 4 * D);
    for (auto& v : x) v = rng.gaussian();
    for (auto& v : w) v = rng.gaussian();
    for (auto& v : b) v = rng.gaussian();

    // mlp fc1: [rows, D] x [4D, D]^T
    {
        double flops = 2.0 * rows * D * 4 * D;
        double t1 = time_of([&] { k::matmul_fwd(y.data(), x.data(), w.data(), b.data(), rows, D, 4 * D); }, reps);
        double t2 = time_of([&] { k::ref::matmul_fwd(y.data(), x.data(), w.data(), b.data(), rows, D, 4 * D); }, reps);
        report("matmul_fwd DxH4D", flops, t1, t2);
    }
    {
        std::vector<double> dx(static_cast<size_t>(rows) * D, 0.0);
        double flops = 2.0 * rows * D * 4 * D;
        double t1 = time_of([&] { k::matmul_bwd_input(dx.data(), y.data(), w.data(), rows, D, 4 * D); }, reps);
        double t2 = time_of([&] { k::ref::matmul_bwd_input(dx.data(), y.data(), w.data(), rows, D, 4 * D); }, reps);
        report("matmul_bwd_input", flops, t1, t2);
    }
    {
        std::vector<double> dw(w.size(), 0.0), db(b.size(), 0.0);
        double flops = 2.0 * rows * D * 4 * D;
        double t1 = time_of([&] { k::matmul_bwd_params(dw.data(), db.data(), y.data(), x.data(), rows, D, 4 * D); }, reps);
        double t2 = time_of([&] { k::ref::matmul_bwd_params(dw.data(), db.data(), y.data(), x.data(), rows, D, 4 * D); }, reps);
        report("matmul_bwd_params", flops, t1, t2);
    }
    {
        std::vector<double> qkv(static_cast<size_t>(rows) * 3 * D), att(static_cast<size_t>(B) * H * L * L),
            out(static_cast<size_t>(rows) * D);
        for (auto& v : qkv) v = rng.gaussian();
        double flops = 2.0 * B * H * L * L * (D / H) * 2;
        double t1 = time_of([&] { k::attention_fwd(out.data(), att.data(), qkv.data(), B, L, D, H); }, reps);
        double t2 = time_of([&] { k::ref::attention_fwd(out.data(), att.data(), qkv.data(), B, L, D, H); }, reps);
        report("attention_fwd", flops, t1, t2);

        std::vector<double> dqkv(qkv.size()), scr(att.size());
        double t3 = time_of([&] { k::attention_bwd(dqkv.data(), out.data(), att.data(), qkv.data(), scr.data(), B, L, D, H); }, reps);
        double t4 = time_of([&] { k::ref::attention_bwd(dqkv.data(), out.data(), att.data(), qkv.data(), scr.data(), B, L, D, H); }, reps);
        report("attention_bwd", 2 * flops, t3, t4);
    }
    {
        std::vector<double> mean(rows), rstd(rows), ln(static_cast<size_t>(rows) * D);
        double flops = 8.0 * rows * D;
        double t1 = time_of([&] { k::layernorm_fwd(ln.data(), mean.data(), rstd.data(), x.data(), rows, D); }, reps);
        double t2 = time_of([&] { k::ref::layernorm_fwd(ln.data(), mean.data(), rstd.data(), x.data(), rows, D); }, reps);
        report("layernorm_fwd", flops, t1, t2);
    }
    {
        std::vector<double> g(y.size());
        double flops = 1.0 * static_cast<double>(y.size());
        double t1 = time_of([&] { k::gelu_fwd(g.data(), y.data(), y.size()); }, reps);
        double t2 = time_of([&] { k::ref::gelu_fwd(g.data(), y.data(), y.size()); }, reps);
        report("gelu_fwd", flops, t1, t2);
    }
    return 0;
}
