#include "lexlm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "lexlm/error.hpp"
#include "lexlm/kernels.hpp"

namespace lexlm::ops {
namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + " must be 2-D, got " + shape_str(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  }
  const auto& kt = kernels::active();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) kt.axpy_f32(crow, a[i * k + p], b.data() + p * n, n);
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& w) {
  require_matrix(a, "matmul_nt lhs");
  require_matrix(w, "matmul_nt rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = w.dim(0);
  if (w.dim(1) != k) {
    throw ShapeError("matmul_nt inner dimensions differ: " + shape_str(a.shape()) + " * " +
                     shape_str(w.shape()) + "^T");
  }
  const auto& kt = kernels::active();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = kt.dot_f32(a.data() + i * k, w.data() + j * k, k);
  }
  return c;
}

void softmax_inplace(std::span<float> v) noexcept {
  if (v.empty()) return;
  const float mx = *std::max_element(v.begin(), v.end());
  float sum = 0.0f;
  for (float& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  const float inv = 1.0f / sum;
  for (float& x : v) x *= inv;
}

Tensor softmax(const Tensor& logits) {
  Tensor out = logits;
  if (out.cols() == 0) return out;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return out;
}

void layernorm_row(std::span<const float> x, std::span<const float> gamma,
                   std::span<const float> beta, float eps, std::span<float> out, float* mean_out,
                   float* rstd_out) noexcept {
  const std::size_t d = x.size();
  float mean = 0.0f;
  for (float v : x) mean += v;
  mean /= static_cast<float>(d);
  float var = 0.0f;
  for (float v : x) {
    const float c = v - mean;
    var += c * c;
  }
  var /= static_cast<float>(d);
  const float rstd = 1.0f / std::sqrt(var + eps);
  for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layernorm parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) layernorm_row(x.row(r), gamma.span(), beta.span(), eps, out.row(r));
  return out;
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

float gelu(float x) noexcept {
  const float inner = kGeluC * (x + kGeluA * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(inner));
}

float gelu_grad(float x) noexcept {
  const float inner = kGeluC * (x + kGeluA * x * x * x);
  const float th = std::tanh(inner);
  const float sech2 = 1.0f - th * th;
  return 0.5f * (1.0f + th) + 0.5f * x * sech2 * kGeluC * (1.0f + 3.0f * kGeluA * x * x);
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.span()) v = gelu(v);
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require_matrix(table, "embedding table");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw DataError("token id " + std::to_string(ids[t]) + " out of range for vocabulary of " +
                      std::to_string(vocab));
    }
    std::copy_n(table.data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  return out;
}

}  // namespace lexlm::ops
