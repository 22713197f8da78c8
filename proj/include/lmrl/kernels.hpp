#pragma once

// Raw row-major float kernels shared by the differentiable ops.

namespace lmrl::kernels {

// C[m×n] (+)= A[m×k] · B[k×n]
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);
// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);
// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);

void transpose(const float* src, float* dst, int rows, int cols);

}  // namespace lmrl::kernels
