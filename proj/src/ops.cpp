#include "lmrl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "lmrl/error.hpp"
#include "lmrl/kernels.hpp"

namespace lmrl {

namespace {

// Gradient buffer of parent `i`, or nullptr when that parent is constant.
float* parent_grad(Node& node, std::size_t i) {
  Node& p = *node.parents[i];
  return p.requires_grad ? p.grad_buffer() : nullptr;
}

const std::vector<float>& parent_data(const Node& node, std::size_t i) { return node.parents[i]->data; }

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    fail(ErrorKind::dimension, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                   shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::dimension,
         std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_finite(const Tensor& t, const char* op) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) fail(ErrorKind::degenerate_input, std::string(op) + ": non-finite input");
  }
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  fail(ErrorKind::config, "unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation activation) {
  switch (activation) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "relu";
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorKind::dimension,
         "matmul: inner dimensions disagree for " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
    const float* dc = self.grad.data();
    if (float* da = parent_grad(self, 0)) kernels::gemm_nt(dc, parent_data(self, 1).data(), da, m, n, k, true);
    if (float* db = parent_grad(self, 1)) kernels::gemm_tn(parent_data(self, 0).data(), dc, db, k, m, n, true);
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const int r = a.dim(0), c = a.dim(1);
  std::vector<float> out(a.size());
  kernels::transpose(a.data().data(), out.data(), r, c);
  return make_result({c, r}, std::move(out), "transpose", {a}, [r, c](Node& self) {
    float* da = parent_grad(self, 0);
    std::vector<float> back(self.grad.size());
    kernels::transpose(self.grad.data(), back.data(), c, r);
    for (std::size_t i = 0; i < back.size(); ++i) da[i] += back[i];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (weight.dim(0) != k) {
    fail(ErrorKind::dimension, "linear: input " + shape_string(x.shape()) + " does not fit weight " +
                                   shape_string(weight.shape()));
  }
  if (bias.size() != static_cast<std::size_t>(n)) {
    fail(ErrorKind::dimension, "linear: bias " + shape_string(bias.shape()) + " does not fit weight " +
                                   shape_string(weight.shape()));
  }
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  const float* bv = bias.data().data();
  for (int i = 0; i < m; ++i) std::copy(bv, bv + n, out.begin() + static_cast<std::ptrdiff_t>(i) * n);
  kernels::gemm_nn(x.data().data(), weight.data().data(), out.data(), m, k, n, true);
  return make_result({m, n}, std::move(out), "linear", {x, weight, bias}, [m, k, n](Node& self) {
    const float* dc = self.grad.data();
    if (float* dx = parent_grad(self, 0)) kernels::gemm_nt(dc, parent_data(self, 1).data(), dx, m, n, k, true);
    if (float* dw = parent_grad(self, 1)) kernels::gemm_tn(parent_data(self, 0).data(), dc, dw, k, m, n, true);
    if (float* db = parent_grad(self, 2)) {
      for (int i = 0; i < m; ++i) {
        const float* row = dc + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) db[j] += row[j];
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (float* d = parent_grad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](Node& self) {
    if (float* d = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
    if (float* d = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
    const auto& av = parent_data(self, 0);
    const auto& bv = parent_data(self, 1);
    if (float* d = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bv[i];
    }
    if (float* d = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), "scale", {a}, [factor](Node& self) {
    float* d = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * factor;
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const int m = x.dim(0), n = x.dim(1);
  if (bias.size() != static_cast<std::size_t>(n)) {
    fail(ErrorKind::dimension,
         "add_row_bias: bias " + shape_string(bias.shape()) + " does not fit " + shape_string(x.shape()));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  const auto bv = bias.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += bv[j];
  }
  return make_result(x.shape(), std::move(out), "add_row_bias", {x, bias}, [m, n](Node& self) {
    if (float* dx = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
    }
    if (float* db = parent_grad(self, 1)) {
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) db[j] += self.grad[static_cast<std::size_t>(i) * n + j];
      }
    }
  });
}

Tensor activate(const Tensor& x, Activation activation) {
  std::vector<float> out(x.size());
  const auto xd = x.data();
  switch (activation) {
    case Activation::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const float v = xd[i];
        out[i] = 0.5f * v * (1.0f + std::tanh(kGeluC * (v + 0.044715f * v * v * v)));
      }
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xd[i]);
      break;
    case Activation::identity:
      std::copy(xd.begin(), xd.end(), out.begin());
      break;
  }
  return make_result(x.shape(), std::move(out), "activate", {x}, [activation](Node& self) {
    float* dx = parent_grad(self, 0);
    const auto& in = parent_data(self, 0);
    const auto& g = self.grad;
    switch (activation) {
      case Activation::relu:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += in[i] > 0.0f ? g[i] : 0.0f;
        break;
      case Activation::gelu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float v = in[i];
          const float inner = kGeluC * (v + 0.044715f * v * v * v);
          const float t = std::tanh(inner);
          const float dinner = kGeluC * (1.0f + 3.0f * 0.044715f * v * v);
          dx[i] += g[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * dinner);
        }
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (1.0f - self.data[i] * self.data[i]);
        break;
      case Activation::identity:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        break;
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  require_finite(x, "softmax");
  const int rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    fail(ErrorKind::dimension, "softmax: axis out of range for " + shape_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(x.dim(d));
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(x.dim(d));
  const std::size_t len = static_cast<std::size_t>(x.dim(axis));

  std::vector<float> out(x.size());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xd[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const float e = std::exp(xd[base + l * inner] - mx);
        out[base + l * inner] = e;
        total += e;
      }
      const float inv = static_cast<float>(1.0 / total);
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] *= inv;
    }
  }
  return make_result(x.shape(), std::move(out), "softmax", {x}, [outer, inner, len](Node& self) {
    float* dx = parent_grad(self, 0);
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += static_cast<double>(g[base + l * inner]) * y[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          dx[idx] += y[idx] * (g[idx] - static_cast<float>(dot));
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const int n = x.dim(-1);
  if (gain.size() != static_cast<std::size_t>(n) || bias.size() != static_cast<std::size_t>(n)) {
    fail(ErrorKind::dimension, "layernorm: gain/bias do not fit " + shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(n);
  std::vector<float> out(x.size());
  std::vector<float> xhat(x.size());
  std::vector<float> rstd(rows);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xd.data() + r * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= n;
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<float>(rs);
    for (int j = 0; j < n; ++j) {
      const float h = static_cast<float>((row[j] - mu) * rs);
      xhat[r * n + j] = h;
      out[r * n + j] = h * gd[j] + bd[j];
    }
  }
  return make_result(x.shape(), std::move(out), "layernorm", {x, gain, bias},
                     [n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       const auto& g = self.grad;
                       const auto& gv = parent_data(self, 1);
                       float* dx = parent_grad(self, 0);
                       float* dg = parent_grad(self, 1);
                       float* db = parent_grad(self, 2);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const float* gr = g.data() + r * n;
                         const float* hr = xhat.data() + r * n;
                         if (dg || db) {
                           for (int j = 0; j < n; ++j) {
                             if (dg) dg[j] += gr[j] * hr[j];
                             if (db) db[j] += gr[j];
                           }
                         }
                         if (dx) {
                           double mean_dh = 0.0, mean_dh_h = 0.0;
                           for (int j = 0; j < n; ++j) {
                             const double dh = static_cast<double>(gr[j]) * gv[j];
                             mean_dh += dh;
                             mean_dh_h += dh * hr[j];
                           }
                           mean_dh /= n;
                           mean_dh_h /= n;
                           for (int j = 0; j < n; ++j) {
                             const double dh = static_cast<double>(gr[j]) * gv[j];
                             dx[r * n + j] += static_cast<float>(rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h));
                           }
                         }
                       }
                     });
}

Tensor dropout(const Tensor& x, float p, std::mt19937_64& rng) {
  if (p <= 0.0f) return x;
  if (p >= 1.0f) fail(ErrorKind::config, "dropout rate must be < 1");
  std::uniform_real_distribution<float> coin(0.0f, 1.0f);
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.size());
  std::vector<float> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = coin(rng) >= p ? keep_scale : 0.0f;
    out[i] = xd[i] * mask[i];
  }
  return make_result(x.shape(), std::move(out), "dropout", {x}, [mask = std::move(mask)](Node& self) {
    float* dx = parent_grad(self, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += self.grad[i] * mask[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    fail(ErrorKind::dimension, "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    float* dx = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
  });
}

namespace {

Tensor select_rows(const Tensor& table, std::span<const int> ids, ErrorKind kind, const char* op) {
  require_rank(table, 2, op);
  const int rows = table.dim(0), n = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      fail(kind, std::string(op) + ": index " + std::to_string(id) + " outside [0, " + std::to_string(rows) + ")");
    }
  }
  if (ids.empty()) fail(ErrorKind::dimension, std::string(op) + ": no rows selected");
  std::vector<float> out(ids.size() * static_cast<std::size_t>(n));
  const auto td = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[r]) * n, n, out.begin() + static_cast<std::ptrdiff_t>(r) * n);
  }
  std::vector<int> index(ids.begin(), ids.end());
  return make_result({static_cast<int>(ids.size()), n}, std::move(out), op, {table},
                     [n, index = std::move(index)](Node& self) {
                       float* dt = parent_grad(self, 0);
                       for (std::size_t r = 0; r < index.size(); ++r) {
                         float* dst = dt + static_cast<std::size_t>(index[r]) * n;
                         const float* src = self.grad.data() + r * n;
                         for (int j = 0; j < n; ++j) dst[j] += src[j];
                       }
                     });
}

}  // namespace

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  return select_rows(table, ids, ErrorKind::vocabulary, "embedding");
}

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
  return select_rows(x, rows, ErrorKind::dimension, "gather_rows");
}

Tensor interleave_rows(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::dimension, "interleave_rows: no inputs");
  for (const auto& p : parts) {
    require_rank(p, 2, "interleave_rows");
    require_same_shape(p, parts[0], "interleave_rows");
  }
  const int m = parts[0].dim(0), n = parts[0].dim(1);
  const int k = static_cast<int>(parts.size());
  std::vector<float> out(static_cast<std::size_t>(m) * k * n);
  for (int r = 0; r < m; ++r) {
    for (int p = 0; p < k; ++p) {
      const auto src = parts[static_cast<std::size_t>(p)].data();
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r) * n, n,
                  out.begin() + (static_cast<std::ptrdiff_t>(r) * k + p) * n);
    }
  }
  return make_result({m * k, n}, std::move(out), "interleave_rows", std::vector<Tensor>(parts.begin(), parts.end()),
                     [m, k, n](Node& self) {
                       for (int p = 0; p < k; ++p) {
                         float* dp = parent_grad(self, static_cast<std::size_t>(p));
                         if (!dp) continue;
                         for (int r = 0; r < m; ++r) {
                           const float* src = self.grad.data() + (static_cast<std::size_t>(r) * k + p) * n;
                           float* dst = dp + static_cast<std::size_t>(r) * n;
                           for (int j = 0; j < n; ++j) dst[j] += src[j];
                         }
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  return make_result({1}, {static_cast<float>(total)}, "sum", {x}, [](Node& self) {
    float* dx = parent_grad(self, 0);
    const float g = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) dx[i] += g;
  });
}

Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  const std::size_t count = x.size();
  return make_result({1}, {static_cast<float>(total / count)}, "mean", {x}, [count](Node& self) {
    float* dx = parent_grad(self, 0);
    const float g = self.grad[0] / static_cast<float>(count);
    for (std::size_t i = 0; i < count; ++i) dx[i] += g;
  });
}

Tensor row_max(const Tensor& x) {
  require_rank(x, 2, "row_max");
  const int m = x.dim(0), n = x.dim(1);
  std::vector<float> out(static_cast<std::size_t>(m));
  std::vector<int> arg(static_cast<std::size_t>(m));
  const auto xd = x.data();
  for (int i = 0; i < m; ++i) {
    const float* row = xd.data() + static_cast<std::size_t>(i) * n;
    int best = 0;
    for (int j = 1; j < n; ++j) {
      if (row[j] > row[best]) best = j;
    }
    arg[static_cast<std::size_t>(i)] = best;
    out[static_cast<std::size_t>(i)] = row[best];
  }
  return make_result({m}, std::move(out), "row_max", {x}, [n, arg = std::move(arg)](Node& self) {
    float* dx = parent_grad(self, 0);
    for (std::size_t i = 0; i < arg.size(); ++i) dx[i * n + static_cast<std::size_t>(arg[i])] += self.grad[i];
  });
}

Tensor normalize_rows(const Tensor& x, float eps) {
  require_rank(x, 2, "normalize_rows");
  const int m = x.dim(0), n = x.dim(1);
  std::vector<float> out(x.size());
  std::vector<float> norms(static_cast<std::size_t>(m));
  const auto xd = x.data();
  for (int i = 0; i < m; ++i) {
    const float* row = xd.data() + static_cast<std::size_t>(i) * n;
    double sq = 0.0;
    for (int j = 0; j < n; ++j) sq += static_cast<double>(row[j]) * row[j];
    const float norm = std::max(static_cast<float>(std::sqrt(sq)), eps);
    norms[static_cast<std::size_t>(i)] = norm;
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] = row[j] / norm;
  }
  return make_result(x.shape(), std::move(out), "normalize_rows", {x},
                     [m, n, eps, norms = std::move(norms)](Node& self) {
                       float* dx = parent_grad(self, 0);
                       for (int i = 0; i < m; ++i) {
                         const std::size_t base = static_cast<std::size_t>(i) * n;
                         const float norm = norms[static_cast<std::size_t>(i)];
                         const float* y = self.data.data() + base;
                         const float* g = self.grad.data() + base;
                         if (norm > eps) {
                           double dot = 0.0;
                           for (int j = 0; j < n; ++j) dot += static_cast<double>(y[j]) * g[j];
                           for (int j = 0; j < n; ++j) dx[base + j] += (g[j] - y[j] * static_cast<float>(dot)) / norm;
                         } else {
                           for (int j = 0; j < n; ++j) dx[base + j] += g[j] / norm;
                         }
                       }
                     });
}

Tensor cosine_similarity(const Tensor& z1, const Tensor& z2) {
  if (z1.size() != z2.size()) {
    fail(ErrorKind::dimension,
         "cosine_similarity: " + shape_string(z1.shape()) + " vs " + shape_string(z2.shape()));
  }
  const auto u = z1.data();
  const auto v = z2.data();
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
    uv += static_cast<double>(u[i]) * v[i];
  }
  if (uu == 0.0 || vv == 0.0) fail(ErrorKind::degenerate_input, "cosine_similarity: zero-norm vector");
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  const double c = std::clamp(uv / (nu * nv), -1.0, 1.0);
  return make_result({1}, {static_cast<float>(c)}, "cosine_similarity", {z1, z2}, [nu, nv, c](Node& self) {
    const auto& u = parent_data(self, 0);
    const auto& v = parent_data(self, 1);
    const double g = self.grad[0];
    if (float* du = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < u.size(); ++i) du[i] += static_cast<float>(g * (v[i] / (nu * nv) - c * u[i] / (nu * nu)));
    }
    if (float* dv = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < v.size(); ++i) dv[i] += static_cast<float>(g * (u[i] / (nu * nv) - c * v[i] / (nv * nv)));
    }
  });
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse_loss");
  const auto p = pred.data();
  const auto t = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - t[i];
    total += d * d;
  }
  const std::size_t count = p.size();
  return make_result({1}, {static_cast<float>(total / count)}, "mse_loss", {pred, target}, [count](Node& self) {
    const auto& p = parent_data(self, 0);
    const auto& t = parent_data(self, 1);
    const float g = self.grad[0] * 2.0f / static_cast<float>(count);
    if (float* dp = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < count; ++i) dp[i] += g * (p[i] - t[i]);
    }
    if (float* dt = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < count; ++i) dt[i] -= g * (p[i] - t[i]);
    }
  });
}

Tensor masked_mse_loss(const Tensor& pred, const Tensor& target, std::span<const float> row_mask) {
  require_same_shape(pred, target, "masked_mse_loss");
  require_rank(pred, 2, "masked_mse_loss");
  const int m = pred.dim(0), n = pred.dim(1);
  if (row_mask.size() != static_cast<std::size_t>(m)) {
    fail(ErrorKind::dimension, "masked_mse_loss: mask length " + std::to_string(row_mask.size()) +
                                   " does not match " + std::to_string(m) + " rows");
  }
  std::vector<float> mask(row_mask.begin(), row_mask.end());
  const auto p = pred.data();
  const auto t = target.data();
  double total = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < m; ++i) {
    if (mask[static_cast<std::size_t>(i)] == 0.0f) continue;
    count += static_cast<std::size_t>(n);
    for (int j = 0; j < n; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * n + j;
      const double d = static_cast<double>(p[idx]) - t[idx];
      total += d * d;
    }
  }
  const float value = count ? static_cast<float>(total / count) : 0.0f;
  return make_result({1}, {value}, "masked_mse_loss", {pred, target},
                     [n, count, mask = std::move(mask)](Node& self) {
                       if (count == 0) return;
                       const auto& p = parent_data(self, 0);
                       const auto& t = parent_data(self, 1);
                       const float g = self.grad[0] * 2.0f / static_cast<float>(count);
                       float* dp = parent_grad(self, 0);
                       float* dt = parent_grad(self, 1);
                       for (std::size_t i = 0; i < mask.size(); ++i) {
                         if (mask[i] == 0.0f) continue;
                         for (int j = 0; j < n; ++j) {
                           const std::size_t idx = i * n + j;
                           const float d = g * (p[idx] - t[idx]);
                           if (dp) dp[idx] += d;
                           if (dt) dt[idx] -= d;
                         }
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const int classes = logits.dim(-1);
  const int rows = static_cast<int>(logits.size() / static_cast<std::size_t>(classes));
  if (targets.size() != static_cast<std::size_t>(rows)) {
    fail(ErrorKind::dimension, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                   std::to_string(rows) + " rows");
  }
  for (int t : targets) {
    if (t < -1 || t >= classes) {
      fail(ErrorKind::vocabulary,
           "cross_entropy: class index " + std::to_string(t) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  std::vector<float> probs(logits.size());
  std::vector<int> tgt(targets.begin(), targets.end());
  const auto ld = logits.data();
  double total = 0.0;
  std::size_t counted = 0;
  for (int r = 0; r < rows; ++r) {
    const float* row = ld.data() + static_cast<std::size_t>(r) * classes;
    float* pr = probs.data() + static_cast<std::size_t>(r) * classes;
    float mx = row[0];
    for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int c = 0; c < classes; ++c) {
      pr[c] = std::exp(row[c] - mx);
      z += pr[c];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int c = 0; c < classes; ++c) pr[c] *= inv;
    const int t = tgt[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    total += -(static_cast<double>(row[t]) - mx - std::log(z));
    ++counted;
  }
  const float value = counted ? static_cast<float>(total / counted) : 0.0f;
  return make_result({1}, {value}, "cross_entropy", {logits},
                     [classes, counted, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                       if (counted == 0) return;
                       float* dl = parent_grad(self, 0);
                       const float g = self.grad[0] / static_cast<float>(counted);
                       for (std::size_t r = 0; r < tgt.size(); ++r) {
                         if (tgt[r] < 0) continue;
                         const float* pr = probs.data() + r * classes;
                         float* dr = dl + r * classes;
                         for (int c = 0; c < classes; ++c) dr[c] += g * pr[c];
                         dr[tgt[r]] -= g;
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, int target) {
  const int t[1] = {target};
  return cross_entropy(logits, std::span<const int>(t, 1));
}

Tensor causal_attention(const Tensor& qkv, const AttentionShape& shape, AttentionCapture* capture) {
  require_rank(qkv, 2, "causal_attention");
  const int B = shape.batch, T = shape.seq, H = shape.heads;
  if (qkv.dim(0) != B * T || qkv.dim(1) % 3 != 0) {
    fail(ErrorKind::dimension, "causal_attention: packed qkv " + shape_string(qkv.shape()) + " does not fit batch " +
                                   std::to_string(B) + " x seq " + std::to_string(T));
  }
  const int n = qkv.dim(1) / 3;
  if (H <= 0 || n % H != 0) {
    fail(ErrorKind::dimension, "causal_attention: width " + std::to_string(n) + " not divisible by " +
                                   std::to_string(H) + " heads");
  }
  if (!shape.key_valid.empty() && shape.key_valid.size() != static_cast<std::size_t>(B) * T) {
    fail(ErrorKind::dimension, "causal_attention: key mask has wrong length");
  }
  const int d = n / H;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(d));
  const int stride = 3 * n;
  const auto in = qkv.data();
  std::vector<float> out(static_cast<std::size_t>(B) * T * n, 0.0f);
  std::vector<float> probs(static_cast<std::size_t>(B) * H * T * T, 0.0f);
  std::vector<unsigned char> allowed(static_cast<std::size_t>(B) * T * T, 0);
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < T; ++i) {
      for (int j = 0; j <= i; ++j) {
        const bool valid = shape.key_valid.empty() || shape.key_valid[static_cast<std::size_t>(b) * T + j] != 0.0f;
        allowed[(static_cast<std::size_t>(b) * T + i) * T + j] = (valid || j == i) ? 1 : 0;
      }
    }
  }
  if (capture) {
    capture->batch = B;
    capture->heads = H;
    capture->seq = T;
    capture->scores.assign(probs.size(), 0.0f);
  }

  std::vector<float> scores(static_cast<std::size_t>(T));
  for (int b = 0; b < B; ++b) {
    const float* base = in.data() + static_cast<std::size_t>(b) * T * stride;
    for (int h = 0; h < H; ++h) {
      float* ph = probs.data() + (static_cast<std::size_t>(b) * H + h) * T * T;
      for (int i = 0; i < T; ++i) {
        const float* q = base + static_cast<std::size_t>(i) * stride + h * d;
        const unsigned char* ok = allowed.data() + (static_cast<std::size_t>(b) * T + i) * T;
        const int limit = capture ? T : i + 1;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < limit; ++j) {
          const float* k = base + static_cast<std::size_t>(j) * stride + n + h * d;
          float s = 0.0f;
          for (int c = 0; c < d; ++c) s += q[c] * k[c];
          s *= inv_sqrt;
          if (capture) capture->scores[(static_cast<std::size_t>(b) * H + h) * T * T + static_cast<std::size_t>(i) * T + j] = s;
          if (j <= i) {
            scores[static_cast<std::size_t>(j)] = s;
            if (ok[j]) mx = std::max(mx, s);
          }
        }
        double z = 0.0;
        float* prow = ph + static_cast<std::size_t>(i) * T;
        for (int j = 0; j <= i; ++j) {
          if (!ok[j]) continue;
          prow[j] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
          z += prow[j];
        }
        const float inv = static_cast<float>(1.0 / z);
        float* o = out.data() + (static_cast<std::size_t>(b) * T + i) * n + h * d;
        for (int j = 0; j <= i; ++j) {
          if (!ok[j]) continue;
          prow[j] *= inv;
          const float p = prow[j];
          const float* v = base + static_cast<std::size_t>(j) * stride + 2 * n + h * d;
          for (int c = 0; c < d; ++c) o[c] += p * v[c];
        }
      }
    }
  }
  if (capture) capture->weights = probs;

  return make_result({B * T, n}, std::move(out), "causal_attention", {qkv},
                     [B, T, H, n, d, inv_sqrt, probs = std::move(probs)](Node& self) {
                       float* dqkv = parent_grad(self, 0);
                       const auto& in = parent_data(self, 0);
                       const int stride = 3 * n;
                       std::vector<float> dp(static_cast<std::size_t>(T));
                       for (int b = 0; b < B; ++b) {
                         const float* base = in.data() + static_cast<std::size_t>(b) * T * stride;
                         float* dbase = dqkv + static_cast<std::size_t>(b) * T * stride;
                         for (int h = 0; h < H; ++h) {
                           const float* ph = probs.data() + (static_cast<std::size_t>(b) * H + h) * T * T;
                           for (int i = 0; i < T; ++i) {
                             const float* prow = ph + static_cast<std::size_t>(i) * T;
                             const float* dout = self.grad.data() + (static_cast<std::size_t>(b) * T + i) * n + h * d;
                             const float* q = base + static_cast<std::size_t>(i) * stride + h * d;
                             float* dq = dbase + static_cast<std::size_t>(i) * stride + h * d;
                             double weighted = 0.0;
                             for (int j = 0; j <= i; ++j) {
                               if (prow[j] == 0.0f) {
                                 dp[static_cast<std::size_t>(j)] = 0.0f;
                                 continue;
                               }
                               const float* v = base + static_cast<std::size_t>(j) * stride + 2 * n + h * d;
                               float* dv = dbase + static_cast<std::size_t>(j) * stride + 2 * n + h * d;
                               float s = 0.0f;
                               for (int c = 0; c < d; ++c) {
                                 s += dout[c] * v[c];
                                 dv[c] += prow[j] * dout[c];
                               }
                               dp[static_cast<std::size_t>(j)] = s;
                               weighted += static_cast<double>(prow[j]) * s;
                             }
                             for (int j = 0; j <= i; ++j) {
                               if (prow[j] == 0.0f) continue;
                               const float ds = prow[j] * (dp[static_cast<std::size_t>(j)] - static_cast<float>(weighted)) * inv_sqrt;
                               const float* k = base + static_cast<std::size_t>(j) * stride + n + h * d;
                               float* dk = dbase + static_cast<std::size_t>(j) * stride + n + h * d;
                               for (int c = 0; c < d; ++c) {
                                 dq[c] += ds * k[c];
                                 dk[c] += ds * q[c];
                               }
                             }
                           }
                         }
                       }
                     });
}

}  // namespace lmrl
