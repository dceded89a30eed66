#include "refseg/conv.hpp"

#include <Eigen/Core>
#include <algorithm>

#include "refseg/errors.hpp"
#include "refseg/ops.hpp"

namespace refseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

constexpr const char* kAxisName[3] = {"depth", "height", "width"};
constexpr std::size_t kColBudget = std::size_t{1} << 20;  // doubles per im2col chunk

// Sliding-window geometry between a "big" grid (the strided-over side) and a
// "small" grid of window positions. Forward conv: big = input, small = output.
// Transposed conv swaps roles: big = output, small = input.
struct Geometry {
  Triple big{};
  Triple small{};
  Triple k{}, s{}, p{};
  std::size_t k3() const { return k[0] * k[1] * k[2]; }
  std::size_t big_n() const { return big[0] * big[1] * big[2]; }
  std::size_t small_n() const { return small[0] * small[1] * small[2]; }
  std::size_t plane() const { return small[1] * small[2]; }
};

// col[(c, a, b, e), position] for small-grid depth rows [z0, z1).
void im2col(const double* src, std::size_t channels, const Geometry& g, std::size_t z0, std::size_t z1, double* col) {
  const std::size_t cols = (z1 - z0) * g.plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = src + c * g.big_n();
    for (std::size_t a = 0; a < g.k[0]; ++a)
      for (std::size_t b = 0; b < g.k[1]; ++b)
        for (std::size_t e = 0; e < g.k[2]; ++e, ++row) {
          double* out = col + row * cols;
          for (std::size_t z = z0; z < z1; ++z) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z * g.s[0] + a) - static_cast<std::ptrdiff_t>(g.p[0]);
            const bool zin = iz >= 0 && iz < static_cast<std::ptrdiff_t>(g.big[0]);
            for (std::size_t y = 0; y < g.small[1]; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.s[1] + b) - static_cast<std::ptrdiff_t>(g.p[1]);
              double* o = out + ((z - z0) * g.small[1] + y) * g.small[2];
              if (!zin || iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.big[1])) {
                std::fill_n(o, g.small[2], 0.0);
                continue;
              }
              const double* r = plane + (static_cast<std::size_t>(iz) * g.big[1] + static_cast<std::size_t>(iy)) * g.big[2];
              for (std::size_t x = 0; x < g.small[2]; ++x) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.s[2] + e) - static_cast<std::ptrdiff_t>(g.p[2]);
                o[x] = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.big[2])) ? r[ix] : 0.0;
              }
            }
          }
        }
  }
}

// Adjoint of im2col: scatters-adds columns back into the big grid.
void col2im(const double* col, std::size_t channels, const Geometry& g, std::size_t z0, std::size_t z1, double* dst) {
  const std::size_t cols = (z1 - z0) * g.plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = dst + c * g.big_n();
    for (std::size_t a = 0; a < g.k[0]; ++a)
      for (std::size_t b = 0; b < g.k[1]; ++b)
        for (std::size_t e = 0; e < g.k[2]; ++e, ++row) {
          const double* in = col + row * cols;
          for (std::size_t z = z0; z < z1; ++z) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z * g.s[0] + a) - static_cast<std::ptrdiff_t>(g.p[0]);
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.big[0])) continue;
            for (std::size_t y = 0; y < g.small[1]; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.s[1] + b) - static_cast<std::ptrdiff_t>(g.p[1]);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.big[1])) continue;
              const double* i = in + ((z - z0) * g.small[1] + y) * g.small[2];
              double* r = plane + (static_cast<std::size_t>(iz) * g.big[1] + static_cast<std::size_t>(iy)) * g.big[2];
              for (std::size_t x = 0; x < g.small[2]; ++x) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.s[2] + e) - static_cast<std::ptrdiff_t>(g.p[2]);
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.big[2])) r[ix] += i[x];
              }
            }
          }
        }
  }
}

std::size_t rows_per_chunk(const Geometry& g, std::size_t k_rows) {
  const std::size_t per_row = std::max<std::size_t>(1, k_rows * g.plane());
  return std::clamp<std::size_t>(kColBudget / per_row, 1, g.small[0]);
}

struct ConvPlan {
  std::size_t batch = 0, c_in = 0, c_out = 0, groups = 1, cg_in = 0, cg_out = 0;
  Geometry geo;
  bool transposed = false;
};

}  // namespace

Triple conv3d_output_dims(const Triple& in, const ConvSpec& spec) {
  Triple out{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (spec.kernel[a] == 0 || spec.stride[a] == 0) {
      throw ConfigError(std::string("conv3d: kernel and stride must be positive on the ") + kAxisName[a] + " axis");
    }
    if (spec.transposed) {
      const std::ptrdiff_t v = static_cast<std::ptrdiff_t>((in[a] - 1) * spec.stride[a] + spec.kernel[a]) -
                               2 * static_cast<std::ptrdiff_t>(spec.padding[a]);
      if (v <= 0) throw DimensionError(std::string("conv3d (transposed): empty output on the ") + kAxisName[a] + " axis");
      out[a] = static_cast<std::size_t>(v);
    } else {
      const std::size_t padded = in[a] + 2 * spec.padding[a];
      if (padded < spec.kernel[a]) {
        throw DimensionError(std::string("conv3d: ") + kAxisName[a] + " extent " + std::to_string(in[a]) + " + padding is smaller than kernel " +
                             std::to_string(spec.kernel[a]));
      }
      out[a] = (padded - spec.kernel[a]) / spec.stride[a] + 1;
    }
  }
  return out;
}

Shape conv3d_weight_shape(std::size_t in_channels, std::size_t out_channels, const ConvSpec& spec) {
  if (spec.groups == 0 || in_channels % spec.groups || out_channels % spec.groups) {
    throw ConfigError("conv3d: groups=" + std::to_string(spec.groups) + " must divide in_channels=" + std::to_string(in_channels) +
                      " and out_channels=" + std::to_string(out_channels));
  }
  if (spec.transposed) return {in_channels, out_channels / spec.groups, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  return {out_channels, in_channels / spec.groups, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.size() != 5) throw DimensionError("conv3d: input must be [B,C,D,H,W], got " + shape_str(is));
  if (ws.size() != 5) throw DimensionError("conv3d: weight must be rank 5, got " + shape_str(ws));
  if (spec.groups == 0) throw ConfigError("conv3d: groups must be positive");

  ConvPlan pl;
  pl.batch = is[0];
  pl.c_in = is[1];
  pl.groups = spec.groups;
  pl.transposed = spec.transposed;
  if (pl.c_in % pl.groups) {
    throw ConfigError("conv3d: groups=" + std::to_string(pl.groups) + " does not divide input channels " + std::to_string(pl.c_in));
  }
  pl.cg_in = pl.c_in / pl.groups;
  if (spec.transposed) {
    if (ws[0] != pl.c_in) throw DimensionError("conv3d (transposed): weight axis 0 is " + std::to_string(ws[0]) + ", expected input channels " + std::to_string(pl.c_in));
    pl.cg_out = ws[1];
  } else {
    if (ws[1] != pl.cg_in) throw DimensionError("conv3d: weight axis 1 is " + std::to_string(ws[1]) + ", expected C_in/groups = " + std::to_string(pl.cg_in));
    if (ws[0] % pl.groups) throw ConfigError("conv3d: groups=" + std::to_string(pl.groups) + " does not divide output channels " + std::to_string(ws[0]));
    pl.cg_out = ws[0] / pl.groups;
  }
  pl.c_out = pl.cg_out * pl.groups;
  for (std::size_t a = 0; a < 3; ++a) {
    if (ws[2 + a] != spec.kernel[a]) {
      throw DimensionError(std::string("conv3d: weight kernel extent on the ") + kAxisName[a] + " axis disagrees with spec");
    }
  }
  if (bias.defined() && bias.numel() != pl.c_out) {
    throw DimensionError("conv3d: bias has " + std::to_string(bias.numel()) + " entries, expected " + std::to_string(pl.c_out));
  }

  const Triple in_dims{is[2], is[3], is[4]};
  const Triple out_dims = conv3d_output_dims(in_dims, spec);
  pl.geo.k = spec.kernel;
  pl.geo.s = spec.stride;
  pl.geo.p = spec.padding;
  pl.geo.big = spec.transposed ? out_dims : in_dims;
  pl.geo.small = spec.transposed ? in_dims : out_dims;

  const Geometry& g = pl.geo;
  const std::size_t k3 = g.k3();
  const std::size_t n_in = in_dims[0] * in_dims[1] * in_dims[2];
  const std::size_t n_out = out_dims[0] * out_dims[1] * out_dims[2];
  const auto xd = input.data();
  const auto wd = weight.data();
  std::vector<double> out(pl.batch * pl.c_out * n_out, 0.0);

  if (!spec.transposed) {
    const std::size_t krows = pl.cg_in * k3;
    const std::size_t zc = rows_per_chunk(g, krows);
    std::vector<double> col(krows * zc * g.plane());
    for (std::size_t b = 0; b < pl.batch; ++b)
      for (std::size_t gr = 0; gr < pl.groups; ++gr) {
        const double* src = xd.data() + (b * pl.c_in + gr * pl.cg_in) * n_in;
        const ConstMapMat w(wd.data() + gr * pl.cg_out * krows, static_cast<Eigen::Index>(pl.cg_out), static_cast<Eigen::Index>(krows));
        double* dst = out.data() + (b * pl.c_out + gr * pl.cg_out) * n_out;
        for (std::size_t z0 = 0; z0 < g.small[0]; z0 += zc) {
          const std::size_t z1 = std::min(g.small[0], z0 + zc);
          const std::size_t ncol = (z1 - z0) * g.plane();
          im2col(src, pl.cg_in, g, z0, z1, col.data());
          Strided(dst + z0 * g.plane(), static_cast<Eigen::Index>(pl.cg_out), static_cast<Eigen::Index>(ncol),
                  Eigen::OuterStride<>(static_cast<Eigen::Index>(n_out)))
              .noalias() = w * ConstMapMat(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(ncol));
        }
      }
  } else {
    const std::size_t krows = pl.cg_out * k3;
    const std::size_t zc = rows_per_chunk(g, krows);
    std::vector<double> col(krows * zc * g.plane());
    for (std::size_t b = 0; b < pl.batch; ++b)
      for (std::size_t gr = 0; gr < pl.groups; ++gr) {
        const double* src = xd.data() + (b * pl.c_in + gr * pl.cg_in) * n_in;
        const ConstMapMat w(wd.data() + gr * pl.cg_in * krows, static_cast<Eigen::Index>(pl.cg_in), static_cast<Eigen::Index>(krows));
        double* dst = out.data() + (b * pl.c_out + gr * pl.cg_out) * n_out;
        for (std::size_t z0 = 0; z0 < g.small[0]; z0 += zc) {
          const std::size_t z1 = std::min(g.small[0], z0 + zc);
          const std::size_t ncol = (z1 - z0) * g.plane();
          MapMat(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(ncol)).noalias() =
              w.transpose() * ConstStrided(src + z0 * g.plane(), static_cast<Eigen::Index>(pl.cg_in), static_cast<Eigen::Index>(ncol),
                                           Eigen::OuterStride<>(static_cast<Eigen::Index>(n_in)));
          col2im(col.data(), pl.cg_out, g, z0, z1, dst);
        }
      }
  }

  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t b = 0; b < pl.batch; ++b)
      for (std::size_t c = 0; c < pl.c_out; ++c) {
        double* p = out.data() + (b * pl.c_out + c) * n_out;
        for (std::size_t i = 0; i < n_out; ++i) p[i] += bd[c];
      }
  }

  std::vector<Tensor> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);
  const Shape out_shape{pl.batch, pl.c_out, out_dims[0], out_dims[1], out_dims[2]};

  return make_result(out_shape, std::move(out), parents, [pl, n_in, n_out](TensorImpl& self) {
    TensorImpl& px = *self.parents[0];
    TensorImpl& pw = *self.parents[1];
    const Geometry& g = pl.geo;
    const std::size_t k3 = g.k3();
    const double* gy = self.grad.data();
    double* gx = px.requires_grad ? px.ensure_grad().data() : nullptr;
    double* gw = pw.requires_grad ? pw.ensure_grad().data() : nullptr;

    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->ensure_grad();
      for (std::size_t b = 0; b < pl.batch; ++b)
        for (std::size_t c = 0; c < pl.c_out; ++c) {
          const double* p = gy + (b * pl.c_out + c) * n_out;
          double s = 0.0;
          for (std::size_t i = 0; i < n_out; ++i) s += p[i];
          gb[c] += s;
        }
    }
    if (!gx && !gw) return;

    if (!pl.transposed) {
      const std::size_t krows = pl.cg_in * k3;
      const std::size_t zc = rows_per_chunk(g, krows);
      std::vector<double> col(krows * zc * g.plane());
      for (std::size_t b = 0; b < pl.batch; ++b)
        for (std::size_t gr = 0; gr < pl.groups; ++gr) {
          const double* src = px.data.data() + (b * pl.c_in + gr * pl.cg_in) * n_in;
          const std::size_t woff = gr * pl.cg_out * krows;
          const double* gyg = gy + (b * pl.c_out + gr * pl.cg_out) * n_out;
          for (std::size_t z0 = 0; z0 < g.small[0]; z0 += zc) {
            const std::size_t z1 = std::min(g.small[0], z0 + zc);
            const std::size_t ncol = (z1 - z0) * g.plane();
            const ConstStrided dy(gyg + z0 * g.plane(), static_cast<Eigen::Index>(pl.cg_out), static_cast<Eigen::Index>(ncol),
                                  Eigen::OuterStride<>(static_cast<Eigen::Index>(n_out)));
            MapMat cm(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(ncol));
            if (gw) {
              im2col(src, pl.cg_in, g, z0, z1, col.data());
              MapMat(gw + woff, static_cast<Eigen::Index>(pl.cg_out), static_cast<Eigen::Index>(krows)).noalias() += dy * cm.transpose();
            }
            if (gx) {
              cm.noalias() = ConstMapMat(pw.data.data() + woff, static_cast<Eigen::Index>(pl.cg_out), static_cast<Eigen::Index>(krows)).transpose() * dy;
              col2im(col.data(), pl.cg_in, g, z0, z1, gx + (b * pl.c_in + gr * pl.cg_in) * n_in);
            }
          }
        }
    } else {
      const std::size_t krows = pl.cg_out * k3;
      const std::size_t zc = rows_per_chunk(g, krows);
      std::vector<double> col(krows * zc * g.plane());
      for (std::size_t b = 0; b < pl.batch; ++b)
        for (std::size_t gr = 0; gr < pl.groups; ++gr) {
          const double* src = px.data.data() + (b * pl.c_in + gr * pl.cg_in) * n_in;
          const std::size_t woff = gr * pl.cg_in * krows;
          const double* gyg = gy + (b * pl.c_out + gr * pl.cg_out) * n_out;
          for (std::size_t z0 = 0; z0 < g.small[0]; z0 += zc) {
            const std::size_t z1 = std::min(g.small[0], z0 + zc);
            const std::size_t ncol = (z1 - z0) * g.plane();
            im2col(gyg, pl.cg_out, g, z0, z1, col.data());
            const ConstMapMat cm(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(ncol));
            if (gw) {
              const ConstStrided x(src + z0 * g.plane(), static_cast<Eigen::Index>(pl.cg_in), static_cast<Eigen::Index>(ncol),
                                   Eigen::OuterStride<>(static_cast<Eigen::Index>(n_in)));
              MapMat(gw + woff, static_cast<Eigen::Index>(pl.cg_in), static_cast<Eigen::Index>(krows)).noalias() += x * cm.transpose();
            }
            if (gx) {
              Strided(gx + (b * pl.c_in + gr * pl.cg_in) * n_in + z0 * g.plane(), static_cast<Eigen::Index>(pl.cg_in),
                      static_cast<Eigen::Index>(ncol), Eigen::OuterStride<>(static_cast<Eigen::Index>(n_in)))
                  .noalias() += ConstMapMat(pw.data.data() + woff, static_cast<Eigen::Index>(pl.cg_in), static_cast<Eigen::Index>(krows)) * cm;
            }
          }
        }
    }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvSpec spec) {
  if (input.dim() != 4 || weight.dim() != 4) throw DimensionError("conv2d expects [B,C,H,W] input and rank-4 weight");
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  spec.kernel[0] = 1;
  spec.stride[0] = 1;
  spec.padding[0] = 0;
  Tensor y = conv3d(reshape(input, {is[0], is[1], 1, is[2], is[3]}), reshape(weight, {ws[0], ws[1], 1, ws[2], ws[3]}), bias, spec);
  const Shape& ys = y.shape();
  return reshape(y, {ys[0], ys[1], ys[3], ys[4]});
}

Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvSpec spec) {
  if (input.dim() != 3 || weight.dim() != 3) throw DimensionError("conv1d expects [B,C,L] input and rank-3 weight");
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  for (std::size_t a = 0; a < 2; ++a) {
    spec.kernel[a] = 1;
    spec.stride[a] = 1;
    spec.padding[a] = 0;
  }
  Tensor y = conv3d(reshape(input, {is[0], is[1], 1, 1, is[2]}), reshape(weight, {ws[0], ws[1], 1, 1, ws[2]}), bias, spec);
  const Shape& ys = y.shape();
  return reshape(y, {ys[0], ys[1], ys[4]});
}

}  // namespace refseg
