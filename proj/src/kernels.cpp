#include "lmrl/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace lmrl::kernels {

namespace {

constexpr int kColBlock = 64;

// 4×64 block of C held in registers while streaming the shared K dimension.
inline void block4_nn(const float* a, int lda, const float* b, int ldb, float* c, int ldc, int k,
                      bool accumulate) {
  float acc0[kColBlock] = {}, acc1[kColBlock] = {}, acc2[kColBlock] = {}, acc3[kColBlock] = {};
  const float* a0 = a;
  const float* a1 = a0 + lda;
  const float* a2 = a1 + lda;
  const float* a3 = a2 + lda;
  for (int p = 0; p < k; ++p) {
    const float* brow = b + static_cast<std::size_t>(p) * ldb;
    const float x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
    for (int j = 0; j < kColBlock; ++j) {
      const float bv = brow[j];
      acc0[j] += x0 * bv;
      acc1[j] += x1 * bv;
      acc2[j] += x2 * bv;
      acc3[j] += x3 * bv;
    }
  }
  float* c0 = c;
  float* c1 = c0 + ldc;
  float* c2 = c1 + ldc;
  float* c3 = c2 + ldc;
  if (accumulate) {
    for (int j = 0; j < kColBlock; ++j) {
      c0[j] += acc0[j];
      c1[j] += acc1[j];
      c2[j] += acc2[j];
      c3[j] += acc3[j];
    }
  } else {
    for (int j = 0; j < kColBlock; ++j) {
      c0[j] = acc0[j];
      c1[j] = acc1[j];
      c2[j] = acc2[j];
      c3[j] = acc3[j];
    }
  }
}

// Generic path for ragged edges: rows [i0, i1) × cols [j0, j1).
void edge_nn(const float* a, const float* b, float* c, int k, int n, int i0, int i1, int j0, int j1,
             bool accumulate) {
  for (int i = i0; i < i1; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) {
      for (int j = j0; j < j1; ++j) crow[j] = 0.0f;
    }
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  constexpr int depth_block = 256;
  const int full_rows = m - m % 4;
  const int full_cols = n - n % kColBlock;
  for (int p0 = 0; p0 < k; p0 += depth_block) {
    const int depth = std::min(depth_block, k - p0);
    const bool acc = accumulate || p0 > 0;
    const float* bpanel = b + static_cast<std::size_t>(p0) * n;
    for (int j = 0; j < full_cols; j += kColBlock) {
      for (int i = 0; i < full_rows; i += 4) {
        block4_nn(a + static_cast<std::size_t>(i) * k + p0, k, bpanel + j, n,
                  c + static_cast<std::size_t>(i) * n + j, n, depth, acc);
      }
    }
  }
  if (full_cols < n) edge_nn(a, b, c, k, n, 0, full_rows, full_cols, n, accumulate);
  if (full_rows < m) edge_nn(a, b, c, k, n, full_rows, m, 0, n, accumulate);
}

void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  std::vector<float> bt(static_cast<std::size_t>(k) * n);
  transpose(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  std::vector<float> at(static_cast<std::size_t>(k) * m);
  transpose(a, at.data(), k, m);
  gemm_nn(at.data(), b, c, m, k, n, accumulate);
}

void transpose(const float* src, float* dst, int rows, int cols) {
  constexpr int tile = 32;
  for (int r0 = 0; r0 < rows; r0 += tile) {
    for (int c0 = 0; c0 < cols; c0 += tile) {
      const int r1 = std::min(rows, r0 + tile);
      const int c1 = std::min(cols, c0 + tile);
      for (int r = r0; r < r1; ++r) {
        for (int cc = c0; cc < c1; ++cc) {
          dst[static_cast<std::size_t>(cc) * rows + r] = src[static_cast<std::size_t>(r) * cols + cc];
        }
      }
    }
  }
}

}  // namespace lmrl::kernels
