#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gdkvm/seg_metrics.hpp"

namespace gdkvm {

inline constexpr std::size_t kDefaultDisks = 20;

struct DiskProfile {
  double length = 0;                             // long-axis length L, pixels
  std::vector<double> diam_4c;                   // one diameter per disk
  std::optional<std::vector<double>> diam_2c;    // present only for biplane

  std::size_t n_disks() const { return diam_4c.size(); }
  bool biplane() const { return diam_2c.has_value(); }
};

// Long axis from the principal axis of the pixel-centre second moments; L is
// the pixel-centre extent along it plus one pixel. Each of the n equal slabs
// is measured at its mid-height along the perpendicular, between the
// outermost 0.5 crossings of the bilinearly interpolated mask.
// Throws UndefinedMetricError for an empty or disconnected (8-connectivity)
// mask and std::invalid_argument for n == 0.
DiskProfile extract_disks(const MaskGrid& mask, std::size_t n = kDefaultDisks);

// Pairs two single-view profiles with equal disk counts; L is the longer of
// the two axes.
DiskProfile combine_views(const DiskProfile& four_chamber, const DiskProfile& two_chamber);

// (pi/4) sum D_i^2 L/n. std::invalid_argument for a biplane profile.
double simpson_single(const DiskProfile& p);
// (pi/4) sum D4_i D2_i L/n. std::invalid_argument without a second view,
// DimensionError when the views have different disk counts.
double simpson_biplane(const DiskProfile& p);

// (v_ed - v_es) / v_ed * 100. std::invalid_argument for v_ed <= 0.
double ejection_fraction(double v_ed, double v_es);

struct Agreement {
  double corr = 0;
  double bias = 0;  // mean(pred - truth)
  double std = 0;   // sample standard deviation of pred - truth
};

// DimensionError for unequal lengths or fewer than two pairs,
// UndefinedMetricError when either series has zero variance.
Agreement agreement_stats(const std::vector<double>& pred, const std::vector<double>& truth);

struct EfRow {
  std::string case_id;
  double v_ed = 0;
  double v_es = 0;
  double ef_pred = 0;
  double ef_truth = 0;
};

// case_id,v_ed,v_es,ef_pred,ef_truth rows, then a final
// "summary,<corr>,<bias>,<std>," row (nan where agreement is undefined).
void write_ef_csv(std::ostream& os, const std::vector<EfRow>& rows);

}  // namespace gdkvm
