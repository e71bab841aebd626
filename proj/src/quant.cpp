#include "lexlm/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "lexlm/error.hpp"

namespace lexlm {

bool operator==(const QuantizedTensor& a, const QuantizedTensor& b) noexcept {
  return a.shape == b.shape && a.pad == b.pad && a.blocks.size() == b.blocks.size() &&
         std::memcmp(a.blocks.data(), b.blocks.data(), a.byte_size()) == 0;
}

bool q8_0_row_aligned(const Shape& shape) noexcept {
  return !shape.empty() && shape.back() > 0 && shape.back() % kQ8BlockSize == 0;
}

QuantizedTensor quantize_q8_0(const Tensor& t, std::string_view name) {
  const auto span = t.span();
  for (std::size_t i = 0; i < span.size(); ++i) {
    if (!std::isfinite(span[i])) {
      throw DataError("cannot quantize " + std::string(name) + ": non-finite value at index " +
                      std::to_string(i));
    }
  }

  QuantizedTensor q;
  q.shape = t.shape();
  const std::size_t n = t.size();
  const std::size_t nb = (n + kQ8BlockSize - 1) / kQ8BlockSize;
  q.pad = nb * kQ8BlockSize - n;
  q.blocks.resize(nb);

  const auto& kt = kernels::active();
  const std::size_t full = n - n % kQ8BlockSize;
  kt.quantize_row_q8_0(t.data(), q.blocks.data(), full);
  if (q.pad != 0) {
    float tail[kQ8BlockSize] = {};
    std::copy(t.data() + full, t.data() + n, tail);
    kt.quantize_row_q8_0(tail, q.blocks.data() + nb - 1, kQ8BlockSize);
  }

  for (std::size_t b = 0; b < nb; ++b) {
    if (std::isinf(kernels::fp16_to_fp32(q.blocks[b].scale))) {
      throw DataError("cannot quantize " + std::string(name) + ": block " + std::to_string(b) +
                      " scale exceeds the fp16 range");
    }
  }
  return q;
}

Tensor dequantize_q8_0(const QuantizedTensor& q) {
  const std::size_t n = q.numel();
  if (q.blocks.size() * kQ8BlockSize != n + q.pad || q.pad >= kQ8BlockSize) {
    throw DataError("Q8_0 tensor block count does not cover shape " + shape_str(q.shape));
  }
  for (std::size_t b = 0; b < q.blocks.size(); ++b) {
    for (std::int8_t c : q.blocks[b].codes) {
      if (c == -128) throw DataError("corrupt Q8_0 block " + std::to_string(b) + ": code -128");
    }
  }
  std::vector<float> flat(q.blocks.size() * kQ8BlockSize);
  kernels::active().dequantize_row_q8_0(q.blocks.data(), flat.data(), flat.size());
  flat.resize(n);
  return Tensor(q.shape, std::move(flat));
}

void quantize_activation(std::span<const float> x, std::span<BlockQ8_0> out) {
  if (x.size() % kQ8BlockSize != 0 || out.size() * kQ8BlockSize != x.size()) {
    throw ShapeError("activation length " + std::to_string(x.size()) +
                     " is not a whole number of Q8_0 blocks");
  }
  kernels::active().quantize_row_q8_0(x.data(), out.data(), x.size());
}

void qmatvec(const QuantizedTensor& w, std::span<const BlockQ8_0> xq, std::span<float> out) {
  const std::size_t per_row = w.cols() / kQ8BlockSize;
  if (!q8_0_row_aligned(w.shape) || xq.size() != per_row || out.size() != w.rows()) {
    throw ShapeError("qmatvec shape mismatch: weight " + shape_str(w.shape) + ", input blocks " +
                     std::to_string(xq.size()) + ", output " + std::to_string(out.size()));
  }
  const auto dot = kernels::active().dot_q8_0;
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = dot(w.blocks.data() + r * per_row, xq.data(), per_row);
}

Tensor qmatmul(const QuantizedTensor& w, const Tensor& x) {
  if (w.shape.size() != 2) throw ShapeError("qmatmul weight must be 2-D, got " + shape_str(w.shape));
  const std::size_t n = w.shape[0], k = w.shape[1];
  if (x.cols() != k || x.rank() == 0 || x.rank() > 2) {
    throw ShapeError("qmatmul shape mismatch: weight " + shape_str(w.shape) + " with input " +
                     shape_str(x.shape()));
  }
  if (!q8_0_row_aligned(w.shape)) {
    throw ShapeError("qmatmul needs rows that are whole Q8_0 blocks, got " + shape_str(w.shape));
  }
  const std::size_t m = x.rows();
  Tensor out(x.rank() == 1 ? Shape{n} : Shape{m, n});
  std::vector<BlockQ8_0> xq(k / kQ8BlockSize);
  for (std::size_t i = 0; i < m; ++i) {
    quantize_activation(x.row(i), xq);
    qmatvec(w, xq, out.row(i));
  }
  return out;
}

}  // namespace lexlm
