#pragma once

// Brute-force reference implementations of the overlap and surface metrics.
// Quadratic in the surface size; only meant for small volumes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "refseg/metrics.hpp"

namespace refseg::oracle {

struct Voxel {
  long d, h, w;
};

inline std::vector<Voxel> surface(const BinaryMask& m) {
  std::vector<Voxel> out;
  const long D = static_cast<long>(m.dims[0]), H = static_cast<long>(m.dims[1]), W = static_cast<long>(m.dims[2]);
  auto fg = [&](long d, long h, long w) {
    return d >= 0 && h >= 0 && w >= 0 && d < D && h < H && w < W && m.at(static_cast<std::size_t>(d), static_cast<std::size_t>(h), static_cast<std::size_t>(w));
  };
  for (long d = 0; d < D; ++d)
    for (long h = 0; h < H; ++h)
      for (long w = 0; w < W; ++w)
        if (fg(d, h, w) && !(fg(d - 1, h, w) && fg(d + 1, h, w) && fg(d, h - 1, w) && fg(d, h + 1, w) && fg(d, h, w - 1) && fg(d, h, w + 1)))
          out.push_back({d, h, w});
  return out;
}

inline double dist(const Voxel& a, const Voxel& b, const std::array<double, 3>& sp) {
  const double x = (a.d - b.d) * sp[0], y = (a.h - b.h) * sp[1], z = (a.w - b.w) * sp[2];
  return std::sqrt(x * x + y * y + z * z);
}

/// For each voxel of `from`, the distance to the closest voxel of `to`.
inline std::vector<double> directed(const std::vector<Voxel>& from, const std::vector<Voxel>& to, const std::array<double, 3>& sp) {
  std::vector<double> out;
  for (const Voxel& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Voxel& b : to) best = std::min(best, dist(a, b, sp));
    out.push_back(best);
  }
  return out;
}

inline double dice(const BinaryMask& p, const BinaryMask& g) {
  double inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p.bits[i] && g.bits[i];
    np += p.bits[i];
    ng += g.bits[i];
  }
  return np + ng == 0 ? 1.0 : 2.0 * inter / (np + ng);
}

inline double nsd(const BinaryMask& p, const BinaryMask& g, double tau) {
  const auto sp = surface(p), sg = surface(g);
  if (sp.empty() && sg.empty()) return 1.0;
  if (sp.empty() || sg.empty()) return 0.0;
  auto frac = [tau](const std::vector<double>& d) {
    double n = 0;
    for (double x : d) n += x <= tau;
    return n / static_cast<double>(d.size());
  };
  return 0.5 * (frac(directed(sp, sg, p.spacing)) + frac(directed(sg, sp, p.spacing)));
}

/// Percentile by linear interpolation between the closest ranks.
inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (pos - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

inline double hausdorff(const BinaryMask& p, const BinaryMask& g, double q) {
  const auto sp = surface(p), sg = surface(g);
  return std::max(percentile(directed(sp, sg, p.spacing), q), percentile(directed(sg, sp, p.spacing), q));
}

/// Random mask built from a few boxes plus salt noise, so surfaces are
/// varied but never trivially full.
inline BinaryMask random_mask(std::mt19937_64& rng, const Triple& dims, const std::array<double, 3>& spacing) {
  BinaryMask m(dims, spacing);
  std::uniform_int_distribution<int> boxes(1, 3);
  const int nb = boxes(rng);
  for (int b = 0; b < nb; ++b) {
    Triple lo, hi;
    for (int a = 0; a < 3; ++a) {
      std::uniform_int_distribution<std::size_t> u(0, dims[a] - 1);
      std::size_t x = u(rng), y = u(rng);
      lo[a] = std::min(x, y);
      hi[a] = std::max(x, y);
    }
    for (std::size_t d = lo[0]; d <= hi[0]; ++d)
      for (std::size_t h = lo[1]; h <= hi[1]; ++h)
        for (std::size_t w = lo[2]; w <= hi[2]; ++w) m.set(d, h, w);
  }
  std::bernoulli_distribution salt(0.03);
  for (auto& b : m.bits)
    if (salt(rng)) b = 1 - b;
  return m;
}

}  // namespace refseg::oracle
