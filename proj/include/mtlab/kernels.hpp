#pragma once

#include <cstddef>
#include <vector>

namespace mtlab {

// Compute kernels come in two flavours: a serial reference and an OpenMP
// version parallelised over independent output elements. Each output element
// is accumulated in a fixed index order by exactly one thread, so both
// flavours produce bitwise identical results; the serial flavour is kept as
// the reference the tests compare against.

// Process-wide switch consulted by the parallel entry points. Defaults to on;
// set_parallel(false) forces every kernel down the serial path.
bool parallel_enabled();
void set_parallel(bool on);

// y[r] = sum_c W[r*cols + c] * x[c], W stored row-major as float, math in double.
void matvec_serial(const float* W, const double* x, double* y, int rows, int cols);
void matvec_omp(const float* W, const double* x, double* y, int rows, int cols);
void matvec(const float* W, const double* x, double* y, int rows, int cols);

// y[c] += sum_r g[r] * W[r*cols + c]  (gradient through matvec: W^T * g).
void matvec_transpose_serial(const float* W, const double* g, double* y, int rows, int cols);
void matvec_transpose_omp(const float* W, const double* g, double* y, int rows, int cols);
void matvec_transpose(const float* W, const double* g, double* y, int rows, int cols);

// In-place numerically stable softmax over v.
void softmax_inplace(std::vector<double>& v);
void softmax_inplace(double* v, int n);

// Exact (erf-based) GELU and its derivative.
double gelu(double x);
double gelu_grad(double x);

// RMS normalisation: out[i] = x[i] / rms(x) * gain[i], rms = sqrt(mean(x^2) + eps).
void rmsnorm(const double* x, const float* gain, double* out, int n, double eps);

}  // namespace mtlab
