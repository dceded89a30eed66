#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "refseg/nn.hpp"
#include "refseg/ops.hpp"

namespace refseg::oracle {

// x [.., in] row-major times w [in, out] plus b, one row at a time.
inline std::vector<std::vector<double>> affine_rows(const Tensor& x, std::size_t rows, const Linear& l) {
  const std::size_t in = l.w.size(0), out = l.w.size(1);
  std::vector<std::vector<double>> y(rows, std::vector<double>(out));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = l.b.defined() ? l.b.data()[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += x.data()[r * in + i] * l.w.at({i, o});
      y[r][o] = acc;
    }
  return y;
}

// Scores softmax(q k^T / sqrt(d_k)) over text and output A v, written out
// as plain loops per batch, head and image token.
inline Tensor attention(const Tensor& img, const Tensor& text, const Linear& q, const Linear& k, const Linear& v, std::size_t heads) {
  const std::size_t B = img.size(0), M = img.size(1), C = img.size(2), L = text.size(0), dk = C / heads;
  const auto K = affine_rows(text, L, k), V = affine_rows(text, L, v);
  Tensor out({B, M, C});
  for (std::size_t b = 0; b < B; ++b) {
    const auto Q = affine_rows(slice(img, 0, b, 1), M, q);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t m = 0; m < M; ++m) {
        std::vector<double> s(L);
        double mx = -1e300;
        for (std::size_t l = 0; l < L; ++l) {
          double dot = 0.0;
          for (std::size_t j = 0; j < dk; ++j) dot += Q[m][h * dk + j] * K[l][h * dk + j];
          s[l] = dot / std::sqrt(static_cast<double>(dk));
          mx = std::max(mx, s[l]);
        }
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < dk; ++j) {
          double acc = 0.0;
          for (std::size_t l = 0; l < L; ++l) acc += s[l] / z * V[l][h * dk + j];
          out.at({b, m, h * dk + j}) = acc;
        }
      }
  }
  return out;
}

}  // namespace refseg::oracle
