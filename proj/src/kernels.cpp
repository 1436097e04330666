#include "mtlab/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace mtlab {

namespace {
std::atomic<bool> g_parallel{true};
}

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

void matvec_serial(const float* W, const double* x, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const float* row = W + static_cast<std::size_t>(r) * cols;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += static_cast<double>(row[c]) * x[c];
        y[r] = acc;
    }
}

void matvec_omp(const float* W, const double* x, double* y, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const float* row = W + static_cast<std::size_t>(r) * cols;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += static_cast<double>(row[c]) * x[c];
        y[r] = acc;
    }
}

void matvec(const float* W, const double* x, double* y, int rows, int cols) {
    if (parallel_enabled())
        matvec_omp(W, x, y, rows, cols);
    else
        matvec_serial(W, x, y, rows, cols);
}

void matvec_transpose_serial(const float* W, const double* g, double* y, int rows, int cols) {
    // One output element per column; the row loop is the fixed accumulation order.
    for (int c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (int r = 0; r < rows; ++r)
            acc += g[r] * static_cast<double>(W[static_cast<std::size_t>(r) * cols + c]);
        y[c] += acc;
    }
}

void matvec_transpose_omp(const float* W, const double* g, double* y, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (int r = 0; r < rows; ++r)
            acc += g[r] * static_cast<double>(W[static_cast<std::size_t>(r) * cols + c]);
        y[c] += acc;
    }
}

void matvec_transpose(const float* W, const double* g, double* y, int rows, int cols) {
    if (parallel_enabled())
        matvec_transpose_omp(W, g, y, rows, cols);
    else
        matvec_transpose_serial(W, g, y, rows, cols);
}

void softmax_inplace(double* v, int n) {
    double mx = v[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        sum += v[i];
    }
    for (int i = 0; i < n; ++i) v[i] /= sum;
}

void softmax_inplace(std::vector<double>& v) { softmax_inplace(v.data(), static_cast<int>(v.size())); }

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::acos(-1.0));
    return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

void rmsnorm(const double* x, const float* gain, double* out, int n, double eps) {
    double ms = 0.0;
    for (int i = 0; i < n; ++i) ms += x[i] * x[i];
    ms = ms / n + eps;
    double inv = 1.0 / std::sqrt(ms);
    for (int i = 0; i < n; ++i) out[i] = x[i] * inv * static_cast<double>(gain[i]);
}

}  // namespace mtlab
