#include "refseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// outer x axis x inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// ---------------------------------------------------------------------------
// Broadcasting

enum class BcastKind { Same, ScalarB, ScalarA, SuffixB, SuffixA, General };

struct Bcast {
  Shape out;
  BcastKind kind = BcastKind::General;
  std::vector<std::size_t> a_str, b_str;  // strides in output rank, 0 on broadcast axes
};

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Bcast plan_broadcast(const Shape& a, const Shape& b) {
  Bcast p;
  if (a == b) {
    p.out = a;
    p.kind = BcastKind::Same;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  p.a_str.assign(rank, 0);
  p.b_str.assign(rank, 0);
  const auto as = strides_of(a);
  const auto bs = strides_of(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(rank - a.size());
    const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(rank - b.size());
    const std::size_t da = ia >= 0 ? a[static_cast<std::size_t>(ia)] : 1;
    const std::size_t db = ib >= 0 ? b[static_cast<std::size_t>(ib)] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b) + " on axis " + std::to_string(i));
    }
    p.out[i] = std::max(da, db);
    if (da != 1) p.a_str[i] = as[static_cast<std::size_t>(ia)];
    if (db != 1) p.b_str[i] = bs[static_cast<std::size_t>(ib)];
  }
  if (shape_numel(b) == 1 && p.out == a) {
    p.kind = BcastKind::ScalarB;
  } else if (shape_numel(a) == 1 && p.out == b) {
    p.kind = BcastKind::ScalarA;
  } else if (p.out == a && is_suffix(b, a)) {
    p.kind = BcastKind::SuffixB;
  } else if (p.out == b && is_suffix(a, b)) {
    p.kind = BcastKind::SuffixA;
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_bcast(const Bcast& p, std::size_t na, std::size_t nb, F&& f) {
  const std::size_t n = shape_numel(p.out);
  switch (p.kind) {
    case BcastKind::Same:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case BcastKind::ScalarB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
      return;
    case BcastKind::ScalarA:
      for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
      return;
    case BcastKind::SuffixB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
      return;
    case BcastKind::SuffixA:
      for (std::size_t i = 0; i < n; ++i) f(i, i % na, i);
      return;
    case BcastKind::General:
      break;
  }
  const std::size_t rank = p.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += p.a_str[d];
      ib += p.b_str[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.a_str[d] * idx[d];
      ib -= p.b_str[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  const Bcast p = plan_broadcast(a.shape(), b.shape());
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(shape_numel(p.out));
  switch (op) {
    case BinOp::Add:
      for_each_bcast(p, ad.size(), bd.size(), [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] + bd[j]; });
      break;
    case BinOp::Sub:
      for_each_bcast(p, ad.size(), bd.size(), [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] - bd[j]; });
      break;
    case BinOp::Mul:
      for_each_bcast(p, ad.size(), bd.size(), [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = ad[i] * bd[j]; });
      break;
  }
  return make_result(p.out, std::move(out), {a, b}, [p, op](TensorImpl& self) {
    TensorImpl& pa = *self.parents[0];
    TensorImpl& pb = *self.parents[1];
    const auto& g = self.grad;
    const std::size_t na = pa.data.size(), nb = pb.data.size();
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      if (op == BinOp::Mul) {
        const auto& bv = pb.data;
        for_each_bcast(p, na, nb, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * bv[j]; });
      } else {
        for_each_bcast(p, na, nb, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += g[o]; });
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      if (op == BinOp::Mul) {
        const auto& av = pa.data;
        for_each_bcast(p, na, nb, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * av[i]; });
      } else if (op == BinOp::Sub) {
        for_each_bcast(p, na, nb, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] -= g[o]; });
      } else {
        for_each_bcast(p, na, nb, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] += g[o]; });
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }

Tensor add_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += s;
  return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor mul_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= s;
  return make_result(x.shape(), std::move(out), {x}, [s](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Activations

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double v = xd[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& self) {
    TensorImpl& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = p.data[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double v = xd[i];
    out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.data[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  const double s = std::accumulate(xd.begin(), xd.end(), 0.0);
  return make_result(Shape{1}, {s}, {x}, [](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    const double go = self.grad[0];
    for (auto& v : g) v += go;
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.dim());
  const AxisSplit sp = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim || out_shape.size() == 1) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto xd = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xd[(o * sp.len + l) * sp.inner + i];
  return make_result(out_shape, std::move(out), {x}, [sp](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

Tensor mean_axis(const Tensor& x, int axis, bool keepdim) {
  const std::size_t len = x.size(axis);
  return mul_scalar(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

// ---------------------------------------------------------------------------
// Matrix products

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) throw DimensionError("matmul needs rank >= 2 operands");
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
  if (k != k2) {
    throw DimensionError("matmul inner dimension mismatch: " + shape_str(as) + " x " + shape_str(bs) +
                         " (axis -1 of lhs vs axis -2 of rhs)");
  }
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(shape_numel(out_shape));

  if (bs.size() == 2) {
    // Shared right operand: fold all leading axes into rows.
    const std::size_t rows = a.numel() / k;
    MapMat(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n)).noalias() =
        ConstMapMat(a.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k)) *
        ConstMapMat(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    return make_result(out_shape, std::move(out), {a, b}, [rows, k, n](TensorImpl& self) {
      TensorImpl& pa = *self.parents[0];
      TensorImpl& pb = *self.parents[1];
      const ConstMapMat g(self.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
      if (pa.requires_grad) {
        MapMat ga(pa.ensure_grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
        ga.noalias() += g * ConstMapMat(pb.data.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n)).transpose();
      }
      if (pb.requires_grad) {
        MapMat gb(pb.ensure_grad().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        gb.noalias() += ConstMapMat(pa.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k)).transpose() * g;
      }
    });
  }

  if (!std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2) || as.size() != bs.size()) {
    throw DimensionError("matmul batch axes differ: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t batch = a.numel() / (m * k);
  const auto em = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k), en = static_cast<Eigen::Index>(n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    MapMat(out.data() + bi * m * n, em, en).noalias() =
        ConstMapMat(a.data().data() + bi * m * k, em, ek) * ConstMapMat(b.data().data() + bi * k * n, ek, en);
  }
  return make_result(out_shape, std::move(out), {a, b}, [batch, em, ek, en](TensorImpl& self) {
    TensorImpl& pa = *self.parents[0];
    TensorImpl& pb = *self.parents[1];
    const std::size_t m = static_cast<std::size_t>(em), k = static_cast<std::size_t>(ek), n = static_cast<std::size_t>(en);
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const ConstMapMat g(self.grad.data() + bi * m * n, em, en);
      if (pa.requires_grad) {
        MapMat(pa.ensure_grad().data() + bi * m * k, em, ek).noalias() +=
            g * ConstMapMat(pb.data.data() + bi * k * n, ek, en).transpose();
      }
      if (pb.requires_grad) {
        MapMat(pb.ensure_grad().data() + bi * k * n, ek, en).noalias() +=
            ConstMapMat(pa.data.data() + bi * m * k, em, ek).transpose() * g;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.dim() != 2) throw DimensionError("linear weight must be [C_in, C_out], got " + shape_str(w.shape()));
  if (x.shape().back() != w.size(0)) {
    throw DimensionError("linear: input last axis " + std::to_string(x.shape().back()) + " != C_in " +
                         std::to_string(w.size(0)));
  }
  if (x.dim() == 1) {
    Tensor y = matmul(reshape(x, {1, x.numel()}), w);
    y = reshape(y, {w.size(1)});
    return b.defined() ? add(y, b) : y;
  }
  Tensor y = matmul(x, w);
  if (!b.defined()) return y;
  if (b.dim() != 1 || b.numel() != w.size(1)) throw DimensionError("linear bias must be [C_out]");
  return add(y, b);
}

// ---------------------------------------------------------------------------
// Layout ops

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  if (perm.size() != rank) throw DimensionError("permute rank mismatch");
  std::vector<bool> used(rank, false);
  for (auto p : perm) {
    if (p >= rank || used[p]) throw DimensionError("invalid permutation");
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in[perm[i]];
  const auto in_str = strides_of(in);
  // Stride in the source for each output axis.
  std::vector<std::size_t> src_str(rank);
  for (std::size_t i = 0; i < rank; ++i) src_str[i] = in_str[perm[i]];

  const std::size_t n = x.numel();
  std::vector<std::size_t> gather(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
      gather[o] = src;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        src += src_str[d];
        if (idx[d] < out_shape[d]) break;
        src -= src_str[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  const auto xd = x.data();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[gather[o]];
  return make_result(out_shape, std::move(out), {x}, [gather = std::move(gather)](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < gather.size(); ++o) g[gather[o]] += self.grad[o];
  });
}

Tensor transpose_last(const Tensor& x) {
  if (x.dim() < 2) throw DimensionError("transpose_last needs rank >= 2");
  std::vector<std::size_t> perm(x.dim());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, x.dim());
  const AxisSplit sp = split_at(x.shape(), ax);
  if (length == 0 || start + length > sp.len) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of range on axis " +
                         std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const auto xd = x.data();
  std::vector<double> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner), length * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  }
  return make_result(out_shape, std::move(out), {x}, [sp, start, length](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < length * sp.inner; ++i)
        g[(o * sp.len + start) * sp.inner + i] += self.grad[o * length * sp.inner + i];
  });
}

Tensor pad(const Tensor& x, int axis, std::size_t before, std::size_t after) {
  const std::size_t ax = norm_axis(axis, x.dim());
  if (before == 0 && after == 0) return x;
  const AxisSplit sp = split_at(x.shape(), ax);
  const std::size_t len = sp.len + before + after;
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  const auto xd = x.data();
  std::vector<double> out(sp.outer * len * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(o * sp.len * sp.inner), sp.len * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>((o * len + before) * sp.inner));
  }
  return make_result(out_shape, std::move(out), {x}, [sp, before, len](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.len * sp.inner; ++i) g[o * sp.len * sp.inner + i] += self.grad[(o * len + before) * sp.inner + i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t ax = norm_axis(axis, parts[0].dim());
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != out_shape[i]) {
        throw DimensionError("concat: axis " + std::to_string(i) + " differs (" + shape_str(s) + " vs " +
                             shape_str(out_shape) + ")");
      }
    }
    total += s[ax];
  }
  out_shape[ax] = total;
  const AxisSplit sp = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> lens, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t l = p.shape()[ax];
    const auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * l * sp.inner), l * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + off) * sp.inner));
    }
    lens.push_back(l);
    offsets.push_back(off);
    off += l;
  }
  return make_result(out_shape, std::move(out), parts, [sp, total, lens, offsets](TensorImpl& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      TensorImpl& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const std::size_t l = lens[k];
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < l * sp.inner; ++i) g[o * l * sp.inner + i] += self.grad[(o * total + offsets[k]) * sp.inner + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.dim());
  const AxisSplit sp = split_at(x.shape(), ax);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = xd[base];
      for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, xd[base + l * sp.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(xd[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] *= inv;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [sp](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += gy[base + l * sp.inner] * y[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t j = base + l * sp.inner;
          g[j] += y[j] * (gy[j] - dot);
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layernorm affine size must equal last axis " + std::to_string(c));
  }
  const std::size_t rows = x.numel() / c;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gd[j] + bd[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [c, rows, xhat, rstd](TensorImpl& self) {
    TensorImpl& px = *self.parents[0];
    TensorImpl& pg = *self.parents[1];
    TensorImpl& pb = *self.parents[2];
    const auto& gy = self.grad;
    if (pg.requires_grad) {
      auto& gg = pg.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gg[j] += gy[r * c + j] * (*xhat)[r * c + j];
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += gy[r * c + j];
    }
    if (px.requires_grad) {
      auto& gx = px.ensure_grad();
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = gy[r * c + j] * pg.data[j];
          m1 += dh;
          m2 += dh * (*xhat)[r * c + j];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = gy[r * c + j] * pg.data[j];
          gx[r * c + j] += (*rstd)[r] * (dh - m1 - (*xhat)[r * c + j] * m2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Lookup / resampling / loss

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.dim() != 2) throw DimensionError("embedding table must be [V, C]");
  const std::size_t v = table.size(0), c = table.size(1);
  std::vector<int> idv(ids.begin(), ids.end());
  for (int id : idv) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw CorruptionError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(v));
    }
  }
  if (idv.empty()) throw DimensionError("embedding lookup of zero ids");
  const auto td = table.data();
  std::vector<double> out(idv.size() * c);
  for (std::size_t r = 0; r < idv.size(); ++r)
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idv[r]) * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(r * c));
  return make_result(Shape{idv.size(), c}, std::move(out), {table}, [idv, c](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) g[static_cast<std::size_t>(idv[r]) * c + j] += self.grad[r * c + j];
  });
}

Tensor upsample_nearest3d(const Tensor& x, std::array<std::size_t, 3> f) {
  if (x.dim() != 5) throw DimensionError("upsample_nearest3d expects [B,C,D,H,W], got " + shape_str(x.shape()));
  const Shape& s = x.shape();
  if (f[0] == 1 && f[1] == 1 && f[2] == 1) return x;
  const std::size_t planes = s[0] * s[1];
  const std::size_t d = s[2], h = s[3], w = s[4];
  const std::size_t od = d * f[0], oh = h * f[1], ow = w * f[2];
  const auto xd = x.data();
  std::vector<double> out(planes * od * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t q = 0; q < ow; ++q)
          out[((p * od + z) * oh + y) * ow + q] = xd[((p * d + z / f[0]) * h + y / f[1]) * w + q / f[2]];
  return make_result(Shape{s[0], s[1], od, oh, ow}, std::move(out), {x},
                     [planes, d, h, w, f, od, oh, ow](TensorImpl& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t p = 0; p < planes; ++p)
                         for (std::size_t z = 0; z < od; ++z)
                           for (std::size_t y = 0; y < oh; ++y)
                             for (std::size_t q = 0; q < ow; ++q)
                               g[((p * d + z / f[0]) * h + y / f[1]) * w + q / f[2]] += self.grad[((p * od + z) * oh + y) * ow + q];
                     });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw DimensionError("bce: logits " + shape_str(logits.shape()) + " vs targets " + shape_str(targets.shape()));
  }
  const auto xd = logits.data();
  const auto yd = targets.data();
  const std::size_t n = xd.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = xd[i];
    acc += std::max(x, 0.0) - x * yd[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_result(Shape{1}, {acc * inv_n}, {logits}, [inv_n, targets](TensorImpl& self) {
    TensorImpl& p = *self.parents[0];
    auto& g = p.ensure_grad();
    const auto yd = targets.data();
    const double go = self.grad[0] * inv_n;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = p.data[i];
      const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += go * (s - yd[i]);
    }
  });
}

}  // namespace refseg
