#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "refseg/conv.hpp"
#include "refseg/tensor.hpp"

namespace refseg {

struct BinaryMask {
  Triple dims{0, 0, 0};
  std::vector<std::uint8_t> bits;  // row-major (d, h, w), 0 or 1
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  BinaryMask() = default;
  explicit BinaryMask(Triple d, std::array<double, 3> sp = {1.0, 1.0, 1.0});
  /// Voxels of `t` (shape [..., D, H, W]) strictly above `threshold`.
  static BinaryMask from_tensor(const Tensor& t, double threshold = 0.5);

  std::size_t size() const { return bits.size(); }
  std::size_t count() const;
  std::size_t index(std::size_t d, std::size_t h, std::size_t w) const { return (d * dims[1] + h) * dims[2] + w; }
  bool at(std::size_t d, std::size_t h, std::size_t w) const { return bits[index(d, h, w)] != 0; }
  void set(std::size_t d, std::size_t h, std::size_t w, bool v = true) { bits[index(d, h, w)] = v ? 1 : 0; }
  Tensor to_tensor() const;
};

/// 2|P & G| / (|P| + |G|), 1 when both are empty.
double dice(const BinaryMask& pred, const BinaryMask& gt);

/// Foreground voxels with at least one background 6-neighbour (outside the
/// volume counts as background).
BinaryMask surface_voxels(const BinaryMask& mask);

/// Distance (in spacing units) from every voxel to the nearest voxel of
/// `target`; +inf everywhere when `target` is empty. Exact Euclidean.
std::vector<double> distance_to(const BinaryMask& target);

/// Mean of the two directed fractions of surface voxels lying within `tau`
/// of the other surface. 1 when both surfaces are empty.
double nsd(const BinaryMask& pred, const BinaryMask& gt, double tau = 1.0);

/// max of the two directed surface-distance percentiles (linear
/// interpolation between order statistics). Both masks must be non-empty.
double hausdorff(const BinaryMask& pred, const BinaryMask& gt, double percentile = 100.0);

/// Linear-interpolated percentile of `values` (which it sorts).
double percentile_of(std::vector<double>& values, double percentile);

struct MetricRow {
  std::string case_id;
  std::string cls;
  double dice = 0.0;
  double nsd = 0.0;
  double hd = 0.0;
  std::vector<std::string> flags;
};

/// Computes every metric, flagging instead of throwing when one is undefined.
MetricRow evaluate_case(const std::string& case_id, const std::string& cls, const BinaryMask& pred, const BinaryMask& gt, double tau = 1.0,
                        double percentile = 100.0);

std::string format_report_table(const std::vector<MetricRow>& rows);
/// One JSON object per line; undefined values are written as null.
std::string format_report_jsonl(const std::vector<MetricRow>& rows);

}  // namespace refseg
