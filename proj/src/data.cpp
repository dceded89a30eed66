#include "refseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "refseg/errors.hpp"
#include "refseg/ops.hpp"

namespace refseg {

namespace {

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32), salt};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Builds a sample of dims `out` whose voxel (d, h, w) is read from
// src(d, h, w) in the input.
VolumeSample remap(const VolumeSample& s, const Triple& out, const std::function<Triple(std::size_t, std::size_t, std::size_t)>& src) {
  const Triple in = s.dims();
  const std::size_t C = s.volume.size(0);
  const std::size_t nin = in[0] * in[1] * in[2];
  const std::size_t nout = out[0] * out[1] * out[2];
  VolumeSample r = s;
  std::vector<double> vol(C * nout), mask(nout);
  std::vector<std::uint8_t> labels(nout);
  const auto vd = s.volume.data();
  const auto md = s.mask.data();
  std::size_t o = 0;
  for (std::size_t d = 0; d < out[0]; ++d)
    for (std::size_t h = 0; h < out[1]; ++h)
      for (std::size_t w = 0; w < out[2]; ++w, ++o) {
        const Triple p = src(d, h, w);
        const std::size_t i = (p[0] * in[1] + p[1]) * in[2] + p[2];
        for (std::size_t c = 0; c < C; ++c) vol[c * nout + o] = vd[c * nin + i];
        mask[o] = md[i];
        labels[o] = s.labels.empty() ? 0 : s.labels[i];
      }
  r.volume = Tensor({C, out[0], out[1], out[2]}, std::move(vol));
  r.mask = Tensor({out[0], out[1], out[2]}, std::move(mask));
  if (!s.labels.empty()) r.labels = std::move(labels);
  return r;
}

using Voxels = std::vector<std::size_t>;

/// A shape rasterized inside its own bounding box.
struct Stencil {
  Triple size{0, 0, 0};
  std::vector<Triple> cells;
};

Stencil sphere_stencil(const Triple& dims, double fraction, std::mt19937_64& rng) {
  const double V = static_cast<double>(dims[0] * dims[1] * dims[2]);
  const double r = std::cbrt(3.0 * fraction * V / (4.0 * std::numbers::pi));
  const auto n = static_cast<std::size_t>(std::ceil(2.0 * r)) + 2;
  double c[3];
  for (double& x : c) x = r + uniform(rng, 0.0, 1.0);
  Stencil st;
  Triple lo{n, n, n}, hi{0, 0, 0};
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t h = 0; h < n; ++h)
      for (std::size_t w = 0; w < n; ++w) {
        const double x = static_cast<double>(d) - c[0], y = static_cast<double>(h) - c[1], z = static_cast<double>(w) - c[2];
        if (x * x + y * y + z * z > r * r) continue;
        const Triple p{d, h, w};
        st.cells.push_back(p);
        for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], p[a]), hi[a] = std::max(hi[a], p[a]);
      }
  if (st.cells.empty()) return st;
  for (auto& p : st.cells)
    for (int a = 0; a < 3; ++a) p[a] -= lo[a];
  for (int a = 0; a < 3; ++a) st.size[a] = hi[a] - lo[a] + 1;
  return st;
}

Stencil box_stencil(const Triple& size) {
  Stencil st;
  st.size = size;
  for (std::size_t d = 0; d < size[0]; ++d)
    for (std::size_t h = 0; h < size[1]; ++h)
      for (std::size_t w = 0; w < size[2]; ++w) st.cells.push_back({d, h, w});
  return st;
}

Stencil stencil(const std::string& cls, const Triple& dims, double fraction, std::mt19937_64& rng) {
  const double V = static_cast<double>(dims[0] * dims[1] * dims[2]);
  if (cls == "sphere") return sphere_stencil(dims, fraction, rng);
  if (cls == "cube") {
    const auto s = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(std::cbrt(fraction * V))));
    return box_stencil({s, s, s});
  }
  if (cls == "slab") {
    const auto axis = static_cast<int>(uniform_int(rng, 0, 2));
    const std::size_t thick = std::max<std::size_t>(2, dims[axis] / 8);
    const auto side = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(std::sqrt(fraction * V / static_cast<double>(thick)))));
    Triple size{side, side, side};
    size[axis] = thick;
    return box_stencil(size);
  }
  throw ConfigError("unknown shape class " + cls);
}

/// Puts the stencil at a uniformly chosen origin whose bounding box avoids
/// every blocked voxel; empty when there is none.
Voxels place(const Stencil& st, const Triple& dims, const std::vector<std::uint8_t>& blocked, std::mt19937_64& rng) {
  for (int a = 0; a < 3; ++a)
    if (st.size[a] == 0 || st.size[a] > dims[a]) return {};
  // Summed-area table with a zero border: S(d, h, w) counts blocked voxels in [0, d) x [0, h) x [0, w).
  const std::size_t D = dims[0] + 1, H = dims[1] + 1, W = dims[2] + 1;
  std::vector<std::uint32_t> S(D * H * W, 0);
  auto at = [&](std::size_t d, std::size_t h, std::size_t w) -> std::uint32_t& { return S[(d * H + h) * W + w]; };
  for (std::size_t d = 1; d < D; ++d)
    for (std::size_t h = 1; h < H; ++h)
      for (std::size_t w = 1; w < W; ++w)
        at(d, h, w) = blocked[((d - 1) * dims[1] + (h - 1)) * dims[2] + (w - 1)] + at(d - 1, h, w) + at(d, h - 1, w) + at(d, h, w - 1) -
                      at(d - 1, h - 1, w) - at(d - 1, h, w - 1) - at(d, h - 1, w - 1) + at(d - 1, h - 1, w - 1);
  std::vector<Triple> free;
  const Triple& z = st.size;
  for (std::size_t d = 0; d + z[0] <= dims[0]; ++d)
    for (std::size_t h = 0; h + z[1] <= dims[1]; ++h)
      for (std::size_t w = 0; w + z[2] <= dims[2]; ++w) {
        const std::size_t d1 = d + z[0], h1 = h + z[1], w1 = w + z[2];
        const std::int64_t n = static_cast<std::int64_t>(at(d1, h1, w1)) - at(d, h1, w1) - at(d1, h, w1) - at(d1, h1, w) + at(d, h, w1) +
                               at(d, h1, w) + at(d1, h, w) - at(d, h, w);
        if (n == 0) free.push_back({d, h, w});
      }
  if (free.empty()) return {};
  const Triple o = free[uniform_int(rng, 0, free.size() - 1)];
  Voxels v;
  v.reserve(st.cells.size());
  for (const Triple& p : st.cells) v.push_back(((o[0] + p[0]) * dims[1] + o[1] + p[1]) * dims[2] + o[2] + p[2]);
  return v;
}

/// Labels the voxels and blocks them plus a one-voxel margin.
void mark(const Voxels& vox, std::size_t k, const Triple& dims, std::vector<std::uint8_t>& labels, std::vector<std::uint8_t>& blocked) {
  for (std::size_t i : vox) {
    labels[i] = static_cast<std::uint8_t>(k + 1);
    const std::size_t d = i / (dims[1] * dims[2]), h = (i / dims[2]) % dims[1], w = i % dims[2];
    for (int dd = -1; dd <= 1; ++dd)
      for (int dh = -1; dh <= 1; ++dh)
        for (int dw = -1; dw <= 1; ++dw) {
          const auto nd = static_cast<std::ptrdiff_t>(d) + dd, nh = static_cast<std::ptrdiff_t>(h) + dh, nw = static_cast<std::ptrdiff_t>(w) + dw;
          if (nd < 0 || nh < 0 || nw < 0 || nd >= static_cast<std::ptrdiff_t>(dims[0]) || nh >= static_cast<std::ptrdiff_t>(dims[1]) ||
              nw >= static_cast<std::ptrdiff_t>(dims[2]))
            continue;
          blocked[(static_cast<std::size_t>(nd) * dims[1] + static_cast<std::size_t>(nh)) * dims[2] + static_cast<std::size_t>(nw)] = 1;
        }
  }
}

void clamp01(Tensor& t) {
  for (auto& v : t.data()) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

double class_intensity(const std::string& cls) {
  if (cls == "sphere") return 0.85;
  if (cls == "cube") return 0.55;
  if (cls == "slab") return 0.7;
  throw ConfigError("unknown shape class " + cls);
}

Tensor class_mask(const VolumeSample& sample, const std::string& cls) {
  const Triple d = sample.dims();
  Tensor m = Tensor::zeros({d[0], d[1], d[2]});
  const auto it = std::find(sample.classes.begin(), sample.classes.end(), cls);
  if (it == sample.classes.end()) return m;
  const auto label = static_cast<std::uint8_t>(it - sample.classes.begin() + 1);
  auto md = m.data();
  for (std::size_t i = 0; i < sample.labels.size(); ++i) md[i] = sample.labels[i] == label ? 1.0 : 0.0;
  return m;
}

VolumeSample synth_sample(std::uint64_t seed, std::size_t index, const DataConfig& spec, double noise_sigma) {
  if (spec.classes.size() < 2) throw ConfigError("synthetic task needs at least two shape classes");
  auto rng = sample_rng(seed, index, 0x5eed);
  const Triple dims = spec.dims;
  const std::size_t V = dims[0] * dims[1] * dims[2];

  std::vector<std::string> classes = spec.classes;
  std::shuffle(classes.begin(), classes.end(), rng);
  const std::size_t count = classes.size() >= 3 ? uniform_int(rng, 2, 3) : 2;
  classes.resize(count);

  // One try lays out the whole scene; a shape that does not fit restarts it.
  VolumeSample s;
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    s.labels.assign(V, 0);
    std::vector<std::uint8_t> blocked(V, 0);
    placed = true;
    for (std::size_t k = 0; k < count && placed; ++k) {
      const Stencil st = stencil(classes[k], dims, uniform(rng, spec.min_fraction, spec.max_fraction), rng);
      const double frac = static_cast<double>(st.cells.size()) / static_cast<double>(V);
      if (st.cells.empty() || frac < spec.min_fraction || frac > spec.max_fraction) {
        placed = false;
        break;
      }
      const Voxels vox = place(st, dims, blocked, rng);
      placed = !vox.empty();
      if (placed) mark(vox, k, dims, s.labels, blocked);
    }
  }
  if (!placed) throw GenerationError("could not place the shapes without overlap after 100 tries (sample " + std::to_string(index) + ")");
  s.classes = classes;
  s.target = classes[uniform_int(rng, 0, count - 1)];
  s.prompt = "segment the " + s.target;

  std::vector<double> level(count + 1);
  level[0] = 0.1 + uniform(rng, -0.05, 0.05);
  for (std::size_t k = 0; k < count; ++k) level[k + 1] = class_intensity(classes[k]) + uniform(rng, -0.05, 0.05);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> vol(V);
  for (std::size_t i = 0; i < V; ++i) {
    const double n = noise(rng);
    vol[i] = std::clamp(level[s.labels[i]] + noise_sigma * n, 0.0, 1.0);
  }
  s.volume = Tensor({1, dims[0], dims[1], dims[2]}, std::move(vol));
  s.mask = Tensor::zeros({dims[0], dims[1], dims[2]});
  s.mask = class_mask(s, s.target);
  return s;
}

std::vector<VolumeSample> synth_dataset(std::uint64_t seed, std::size_t n, const DataConfig& spec, double noise_sigma) {
  std::vector<VolumeSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_sample(seed, i, spec, noise_sigma));
  return out;
}

VolumeSample resample_isotropic(const VolumeSample& s, const std::array<double, 3>& spacing) {
  for (double v : spacing)
    if (v != 1.0) throw InputError("resampling from non-unit spacing is not supported");
  return s;
}

VolumeSample flip(const VolumeSample& s, int axis) {
  if (axis < 0 || axis > 2) throw InputError("flip axis must be 0, 1 or 2");
  const Triple dims = s.dims();
  return remap(s, dims, [&](std::size_t d, std::size_t h, std::size_t w) {
    Triple p{d, h, w};
    p[axis] = dims[axis] - 1 - p[axis];
    return p;
  });
}

VolumeSample rotate90(const VolumeSample& s, int axis_a, int axis_b, int k) {
  const Triple dims = s.dims();
  if (axis_a == axis_b || axis_a < 0 || axis_b < 0 || axis_a > 2 || axis_b > 2) throw InputError("rotation needs two distinct spatial axes");
  if (dims[axis_a] != dims[axis_b]) throw InputError("rotation plane must be square to keep the volume dims");
  const std::size_t n = dims[axis_a];
  k = ((k % 4) + 4) % 4;
  return remap(s, dims, [&](std::size_t d, std::size_t h, std::size_t w) {
    Triple p{d, h, w};
    for (int r = 0; r < k; ++r) {
      const std::size_t a = p[axis_a], b = p[axis_b];
      p[axis_a] = b;
      p[axis_b] = n - 1 - a;
    }
    return p;
  });
}

VolumeSample erase(const VolumeSample& s, const Triple& origin, const Triple& size) {
  VolumeSample r = s;
  r.volume = s.volume.clone();
  const Triple dims = s.dims();
  const std::size_t C = s.volume.size(0);
  auto v = r.volume.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t d = origin[0]; d < std::min(dims[0], origin[0] + size[0]); ++d)
      for (std::size_t h = origin[1]; h < std::min(dims[1], origin[1] + size[1]); ++h)
        for (std::size_t w = origin[2]; w < std::min(dims[2], origin[2] + size[2]); ++w)
          v[((c * dims[0] + d) * dims[1] + h) * dims[2] + w] = 0.0;
  return r;
}

VolumeSample augment(const VolumeSample& s, std::mt19937_64& rng, const std::vector<std::string>& policy) {
  VolumeSample r = s;
  const Triple dims = s.dims();
  for (const auto& op : policy) {
    if (uniform(rng, 0.0, 1.0) >= 0.5) continue;
    if (op == "flip") {
      r = flip(r, static_cast<int>(uniform_int(rng, 0, 2)));
    } else if (op == "rotate90") {
      std::vector<std::pair<int, int>> planes;
      for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b)
          if (dims[a] == dims[b]) planes.emplace_back(a, b);
      if (planes.empty()) continue;
      const auto& pl = planes[uniform_int(rng, 0, planes.size() - 1)];
      r = rotate90(r, pl.first, pl.second, static_cast<int>(uniform_int(rng, 1, 3)));
    } else if (op == "erase") {
      Triple size, origin;
      for (int a = 0; a < 3; ++a) {
        size[a] = uniform_int(rng, std::max<std::size_t>(1, dims[a] / 8), std::max<std::size_t>(1, dims[a] / 4));
        origin[a] = uniform_int(rng, 0, dims[a] - size[a]);
      }
      r = erase(r, origin, size);
    } else if (op == "scale-intensity") {
      r.volume = mul_scalar(r.volume.detach(), uniform(rng, 0.9, 1.1));
      clamp01(r.volume);
    } else if (op == "contrast") {
      const double f = uniform(rng, 0.9, 1.1);
      const Tensor v = r.volume.detach();
      double mean = 0;
      for (double x : v.data()) mean += x;
      mean /= static_cast<double>(v.numel());
      r.volume = add_scalar(mul_scalar(add_scalar(v, -mean), f), mean);
      clamp01(r.volume);
    } else if (op == "brightness") {
      r.volume = add_scalar(r.volume.detach(), uniform(rng, -0.05, 0.05));
      clamp01(r.volume);
    } else {
      throw ConfigError("unknown augmentation " + op);
    }
  }
  return r;
}

VolumeSample crop(const VolumeSample& s, const Triple& origin, const Triple& size) {
  const Triple dims = s.dims();
  for (int a = 0; a < 3; ++a)
    if (origin[a] + size[a] > dims[a]) throw DimensionError("crop exceeds volume along axis " + std::to_string(a));
  return remap(s, size, [&](std::size_t d, std::size_t h, std::size_t w) { return Triple{origin[0] + d, origin[1] + h, origin[2] + w}; });
}

PatchSet sample_patches(const VolumeSample& s, const Triple& patch, std::size_t count, std::mt19937_64& rng) {
  const Triple dims = s.dims();
  for (int a = 0; a < 3; ++a)
    if (patch[a] == 0 || patch[a] > dims[a]) throw DimensionError("patch extent exceeds the volume along axis " + std::to_string(a));

  // Summed-area table of the mask, (D+1)(H+1)(W+1).
  const std::size_t P1 = dims[1] + 1, P2 = dims[2] + 1;
  std::vector<double> sat((dims[0] + 1) * P1 * P2, 0.0);
  auto at = [&](std::size_t d, std::size_t h, std::size_t w) -> double& { return sat[(d * P1 + h) * P2 + w]; };
  const auto md = s.mask.data();
  std::vector<std::size_t> fg;
  for (std::size_t d = 0; d < dims[0]; ++d)
    for (std::size_t h = 0; h < dims[1]; ++h)
      for (std::size_t w = 0; w < dims[2]; ++w) {
        const std::size_t i = (d * dims[1] + h) * dims[2] + w;
        if (md[i] != 0) fg.push_back(i);
        at(d + 1, h + 1, w + 1) = md[i] + at(d, h + 1, w + 1) + at(d + 1, h, w + 1) + at(d + 1, h + 1, w) - at(d, h, w + 1) - at(d, h + 1, w) -
                                  at(d + 1, h, w) + at(d, h, w);
      }
  auto box = [&](const Triple& o) {
    const std::size_t d0 = o[0], h0 = o[1], w0 = o[2], d1 = o[0] + patch[0], h1 = o[1] + patch[1], w1 = o[2] + patch[2];
    return at(d1, h1, w1) - at(d0, h1, w1) - at(d1, h0, w1) - at(d1, h1, w0) + at(d0, h0, w1) + at(d0, h1, w0) + at(d1, h0, w0) - at(d0, h0, w0);
  };

  std::vector<Triple> background;
  for (std::size_t d = 0; d + patch[0] <= dims[0]; ++d)
    for (std::size_t h = 0; h + patch[1] <= dims[1]; ++h)
      for (std::size_t w = 0; w + patch[2] <= dims[2]; ++w)
        if (box({d, h, w}) == 0.0) background.push_back({d, h, w});

  PatchSet out;
  const bool have_fg = !fg.empty(), have_bg = !background.empty();
  if (!have_fg) out.warning = "mask is empty: all patches are background";
  if (!have_bg && have_fg) out.warning = "no background-only patch exists: all patches contain foreground";
  for (std::size_t i = 0; i < count; ++i) {
    bool want_fg = i % 2 == 0;
    if (!have_fg) want_fg = false;
    if (!have_bg) want_fg = true;
    Triple o{0, 0, 0};
    if (want_fg) {
      const std::size_t v = fg[uniform_int(rng, 0, fg.size() - 1)];
      const Triple p{v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]};
      for (int a = 0; a < 3; ++a) {
        const std::size_t lo = p[a] + 1 >= patch[a] ? p[a] + 1 - patch[a] : 0;
        const std::size_t hi = std::min(p[a], dims[a] - patch[a]);
        o[a] = uniform_int(rng, lo, hi);
      }
    } else if (have_bg) {
      o = background[uniform_int(rng, 0, background.size() - 1)];
    } else {
      for (int a = 0; a < 3; ++a) o[a] = uniform_int(rng, 0, dims[a] - patch[a]);
    }
    out.patches.push_back(crop(s, o, patch));
    out.origins.push_back(o);
    out.foreground.push_back(want_fg);
  }
  return out;
}

}  // namespace refseg
