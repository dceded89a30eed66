#include "refseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <nlohmann/json.hpp>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims != b.dims) {
    throw InputError("mask dims differ: " + shape_str({a.dims[0], a.dims[1], a.dims[2]}) + " vs " +
                     shape_str({b.dims[0], b.dims[1], b.dims[2]}));
  }
}

// One pass of the lower-envelope squared distance transform along a line.
// f holds squared distances of the line (inf where unreachable); `step` is
// the voxel spacing along the line.
void edt_line(std::vector<double>& f, double step, std::vector<double>& out, std::vector<std::size_t>& v, std::vector<double>& z) {
  const std::size_t n = f.size();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q] < kInf) {
      first = q;
      break;
    }
  if (first == n) {
    out.assign(n, kInf);
    return;
  }
  const double s2 = step * step;
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!(f[q] < kInf)) continue;
    const double qd = static_cast<double>(q);
    while (true) {
      const double vd = static_cast<double>(v[k]);
      const double s = ((f[q] + s2 * qd * qd) - (f[v[k]] + s2 * vd * vd)) / (2.0 * s2 * (qd - vd));
      if (s <= z[k]) {
        if (k == 0) {
          v[0] = q;
          z[0] = -kInf;
          z[1] = kInf;
          break;
        }
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
      break;
    }
  }
  out.assign(n, 0.0);
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = (static_cast<double>(q) - static_cast<double>(v[k])) * step;
    out[q] = d * d + f[v[k]];
  }
}

std::vector<double> directed(const BinaryMask& from_surface, const std::vector<double>& dist) {
  std::vector<double> out;
  for (std::size_t i = 0; i < from_surface.bits.size(); ++i)
    if (from_surface.bits[i]) out.push_back(dist[i]);
  return out;
}

}  // namespace

BinaryMask::BinaryMask(Triple d, std::array<double, 3> sp) : dims(d), bits(d[0] * d[1] * d[2], 0), spacing(sp) {
  for (double s : spacing)
    if (!(s > 0)) throw InputError("mask spacing must be positive");
}

BinaryMask BinaryMask::from_tensor(const Tensor& t, double threshold) {
  const Shape& s = t.shape();
  if (s.size() < 3) throw DimensionError("mask tensor needs at least 3 axes, got " + shape_str(s));
  const std::size_t n = s.size();
  if (t.numel() != s[n - 3] * s[n - 2] * s[n - 1]) throw DimensionError("mask tensor must hold a single volume, got " + shape_str(s));
  BinaryMask m({s[n - 3], s[n - 2], s[n - 1]});
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) m.bits[i] = d[i] > threshold ? 1 : 0;
  return m;
}

std::size_t BinaryMask::count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1})); }

Tensor BinaryMask::to_tensor() const {
  std::vector<double> v(bits.begin(), bits.end());
  return Tensor({dims[0], dims[1], dims[2]}, std::move(v));
}

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  require_same(pred, gt);
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    p += pred.bits[i];
    g += gt.bits[i];
    both += pred.bits[i] & gt.bits[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

BinaryMask surface_voxels(const BinaryMask& mask) {
  BinaryMask s(mask.dims, mask.spacing);
  const auto [D, H, W] = mask.dims;
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        if (!mask.at(d, h, w)) continue;
        const bool edge = d == 0 || h == 0 || w == 0 || d + 1 == D || h + 1 == H || w + 1 == W;
        if (edge || !mask.at(d - 1, h, w) || !mask.at(d + 1, h, w) || !mask.at(d, h - 1, w) || !mask.at(d, h + 1, w) ||
            !mask.at(d, h, w - 1) || !mask.at(d, h, w + 1)) {
          s.set(d, h, w);
        }
      }
  return s;
}

std::vector<double> distance_to(const BinaryMask& target) {
  const auto [D, H, W] = target.dims;
  std::vector<double> g(target.bits.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = target.bits[i] ? 0.0 : kInf;
  std::vector<double> line, out, z;
  std::vector<std::size_t> v;
  // width, height, depth passes
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h) {
      line.assign(g.begin() + static_cast<std::ptrdiff_t>(target.index(d, h, 0)), g.begin() + static_cast<std::ptrdiff_t>(target.index(d, h, 0) + W));
      edt_line(line, target.spacing[2], out, v, z);
      std::copy(out.begin(), out.end(), g.begin() + static_cast<std::ptrdiff_t>(target.index(d, h, 0)));
    }
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t w = 0; w < W; ++w) {
      line.resize(H);
      for (std::size_t h = 0; h < H; ++h) line[h] = g[target.index(d, h, w)];
      edt_line(line, target.spacing[1], out, v, z);
      for (std::size_t h = 0; h < H; ++h) g[target.index(d, h, w)] = out[h];
    }
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      line.resize(D);
      for (std::size_t d = 0; d < D; ++d) line[d] = g[target.index(d, h, w)];
      edt_line(line, target.spacing[0], out, v, z);
      for (std::size_t d = 0; d < D; ++d) g[target.index(d, h, w)] = out[d];
    }
  for (auto& x : g) x = std::sqrt(x);
  return g;
}

double nsd(const BinaryMask& pred, const BinaryMask& gt, double tau) {
  require_same(pred, gt);
  if (!(tau > 0)) throw InputError("NSD tolerance must be positive");
  const BinaryMask sp = surface_voxels(pred);
  const BinaryMask sg = surface_voxels(gt);
  const std::size_t np = sp.count(), ng = sg.count();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  auto within = [tau](const std::vector<double>& d) {
    return static_cast<double>(std::count_if(d.begin(), d.end(), [tau](double x) { return x <= tau; })) / static_cast<double>(d.size());
  };
  const double p_to_g = within(directed(sp, distance_to(sg)));
  const double g_to_p = within(directed(sg, distance_to(sp)));
  return 0.5 * (p_to_g + g_to_p);
}

double percentile_of(std::vector<double>& values, double percentile) {
  if (values.empty()) throw EvaluationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = percentile / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return values[lo];
  return values[lo] + frac * (values[hi] - values[lo]);
}

double hausdorff(const BinaryMask& pred, const BinaryMask& gt, double percentile) {
  require_same(pred, gt);
  if (!(percentile > 0 && percentile <= 100)) throw InputError("percentile must lie in (0, 100]");
  const BinaryMask sp = surface_voxels(pred);
  const BinaryMask sg = surface_voxels(gt);
  if (sp.count() == 0 || sg.count() == 0) throw EvaluationError("Hausdorff distance is undefined for an empty mask");
  auto a = directed(sp, distance_to(sg));
  auto b = directed(sg, distance_to(sp));
  return std::max(percentile_of(a, percentile), percentile_of(b, percentile));
}

MetricRow evaluate_case(const std::string& case_id, const std::string& cls, const BinaryMask& pred, const BinaryMask& gt, double tau,
                        double percentile) {
  MetricRow r;
  r.case_id = case_id;
  r.cls = cls;
  r.dice = dice(pred, gt);
  r.nsd = nsd(pred, gt, tau);
  const bool pe = pred.count() == 0, ge = gt.count() == 0;
  if (pe) r.flags.push_back("empty-pred");
  if (ge) r.flags.push_back("empty-gt");
  if (pe || ge) {
    r.hd = std::numeric_limits<double>::quiet_NaN();
    r.flags.push_back("hd-undefined");
  } else {
    r.hd = hausdorff(pred, gt, percentile);
  }
  return r;
}

std::string format_report_table(const std::vector<MetricRow>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-24s %-10s %8s %8s %8s  %s\n", "case", "class", "dice", "nsd", "hd", "flags");
  out += buf;
  for (const auto& r : rows) {
    std::string flags;
    for (const auto& f : r.flags) flags += (flags.empty() ? "" : ",") + f;
    if (std::isnan(r.hd)) {
      std::snprintf(buf, sizeof buf, "%-24s %-10s %8.4f %8.4f %8s  %s\n", r.case_id.c_str(), r.cls.c_str(), r.dice, r.nsd, "nan", flags.c_str());
    } else {
      std::snprintf(buf, sizeof buf, "%-24s %-10s %8.4f %8.4f %8.4f  %s\n", r.case_id.c_str(), r.cls.c_str(), r.dice, r.nsd, r.hd, flags.c_str());
    }
    out += buf;
  }
  return out;
}

std::string format_report_jsonl(const std::vector<MetricRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["case_id"] = r.case_id;
    j["class"] = r.cls;
    j["dice"] = r.dice;
    j["nsd"] = r.nsd;
    j["hd"] = std::isnan(r.hd) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.hd);
    j["flags"] = r.flags;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace refseg
