#include "gdkvm/clinical.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "gdkvm/csv.hpp"
#include "gdkvm/error.hpp"

namespace gdkvm {

namespace {

bool connected(const MaskGrid& m) {
  const std::size_t h = m.height(), w = m.width();
  std::vector<std::uint8_t> seen(h * w, 0);
  std::vector<std::size_t> stack;
  std::size_t start = h * w;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (m.bits()[i]) {
      start = i;
      break;
    }
  }
  if (start == h * w) return false;
  stack.push_back(start);
  seen[start] = 1;
  std::size_t reached = 0;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    ++reached;
    const long y = static_cast<long>(i / w), x = static_cast<long>(i % w);
    for (long dy = -1; dy <= 1; ++dy) {
      for (long dx = -1; dx <= 1; ++dx) {
        const long ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        if (m.bits()[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return reached == m.count();
}

// Bilinear interpolation of the 0/1 mask at (y, x) in pixel-centre
// coordinates; zero outside the grid.
double sample(const MaskGrid& m, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double ty = y - fy, tx = x - fx;
  auto px = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(m.height()) || xx >= static_cast<long>(m.width())) return 0.0;
    return m.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) ? 1.0 : 0.0;
  };
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  return (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x0 + 1)) +
         ty * ((1 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1));
}

double bisect(const MaskGrid& m, double cy, double cx, double uy, double ux, double outside, double inside) {
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (outside + inside);
    if (sample(m, cy + mid * uy, cx + mid * ux) >= 0.5) {
      inside = mid;
    } else {
      outside = mid;
    }
  }
  return 0.5 * (outside + inside);
}

void validate(const DiskProfile& p) {
  if (p.diam_4c.empty()) throw std::invalid_argument("disk profile has no disks");
  if (!(p.length > 0)) throw std::invalid_argument("disk profile: long-axis length must be positive");
  auto check = [](const std::vector<double>& d) {
    for (double v : d) {
      if (!(v >= 0)) throw std::invalid_argument("disk profile: diameters must be non-negative");
    }
  };
  check(p.diam_4c);
  if (p.diam_2c) check(*p.diam_2c);
}

}  // namespace

DiskProfile extract_disks(const MaskGrid& mask, std::size_t n) {
  if (n == 0) throw std::invalid_argument("extract_disks: need at least one disk");
  if (mask.empty()) throw UndefinedMetricError("extract_disks: empty mask");
  if (!connected(mask)) throw UndefinedMetricError("extract_disks: mask is not connected");

  double my = 0, mx = 0, cnt = 0;
  for (std::size_t y = 0; y < mask.height(); ++y) {
    for (std::size_t x = 0; x < mask.width(); ++x) {
      if (!mask.at(y, x)) continue;
      my += static_cast<double>(y);
      mx += static_cast<double>(x);
      cnt += 1;
    }
  }
  my /= cnt;
  mx /= cnt;
  double syy = 0, sxx = 0, sxy = 0;
  for (std::size_t y = 0; y < mask.height(); ++y) {
    for (std::size_t x = 0; x < mask.width(); ++x) {
      if (!mask.at(y, x)) continue;
      const double dy = static_cast<double>(y) - my, dx = static_cast<double>(x) - mx;
      syy += dy * dy;
      sxx += dx * dx;
      sxy += dx * dy;
    }
  }
  // Major eigenvector of [[sxx, sxy], [sxy, syy]] in (x, y) order.
  const double theta = 0.5 * std::atan2(2 * sxy, sxx - syy);
  const double ux = std::cos(theta), uy = std::sin(theta);
  const double px = -uy, py = ux;

  double tmin = std::numeric_limits<double>::infinity(), tmax = -tmin;
  for (std::size_t y = 0; y < mask.height(); ++y) {
    for (std::size_t x = 0; x < mask.width(); ++x) {
      if (!mask.at(y, x)) continue;
      const double t = (static_cast<double>(x) - mx) * ux + (static_cast<double>(y) - my) * uy;
      tmin = std::min(tmin, t);
      tmax = std::max(tmax, t);
    }
  }
  DiskProfile profile;
  profile.length = tmax - tmin + 1.0;
  const double slab = profile.length / static_cast<double>(n);
  const double reach = std::hypot(static_cast<double>(mask.height()), static_cast<double>(mask.width())) + 2.0;
  constexpr double step = 0.25;
  const long samples = static_cast<long>(std::ceil(reach / step));

  for (std::size_t i = 0; i < n; ++i) {
    const double t = tmin - 0.5 + (static_cast<double>(i) + 0.5) * slab;
    const double cx = mx + t * ux, cy = my + t * uy;
    long first = samples + 1, last = -samples - 1;
    for (long s = -samples; s <= samples; ++s) {
      const double d = static_cast<double>(s) * step;
      if (sample(mask, cy + d * py, cx + d * px) >= 0.5) {
        first = std::min(first, s);
        last = std::max(last, s);
      }
    }
    if (first > last) {
      profile.diam_4c.push_back(0.0);
      continue;
    }
    const double lo = bisect(mask, cy, cx, py, px, static_cast<double>(first - 1) * step, static_cast<double>(first) * step);
    const double hi = bisect(mask, cy, cx, py, px, static_cast<double>(last + 1) * step, static_cast<double>(last) * step);
    profile.diam_4c.push_back(hi - lo);
  }
  return profile;
}

DiskProfile combine_views(const DiskProfile& four_chamber, const DiskProfile& two_chamber) {
  if (four_chamber.biplane() || two_chamber.biplane()) throw std::invalid_argument("combine_views: single-view profiles required");
  if (four_chamber.n_disks() != two_chamber.n_disks()) {
    throw DimensionError("combine_views: disk counts differ (" + std::to_string(four_chamber.n_disks()) + " vs " +
                         std::to_string(two_chamber.n_disks()) + ")");
  }
  DiskProfile p;
  p.length = std::max(four_chamber.length, two_chamber.length);
  p.diam_4c = four_chamber.diam_4c;
  p.diam_2c = two_chamber.diam_4c;
  return p;
}

double simpson_single(const DiskProfile& p) {
  if (p.biplane()) throw std::invalid_argument("simpson_single: profile carries two views; use simpson_biplane");
  validate(p);
  double acc = 0;
  for (double d : p.diam_4c) acc += d * d;
  return std::numbers::pi / 4.0 * acc * (p.length / static_cast<double>(p.n_disks()));
}

double simpson_biplane(const DiskProfile& p) {
  if (!p.biplane()) throw std::invalid_argument("simpson_biplane: profile has a single view");
  if (p.diam_2c->size() != p.diam_4c.size()) {
    throw DimensionError("simpson_biplane: " + std::to_string(p.diam_4c.size()) + " four-chamber vs " +
                         std::to_string(p.diam_2c->size()) + " two-chamber diameters");
  }
  validate(p);
  double acc = 0;
  for (std::size_t i = 0; i < p.diam_4c.size(); ++i) acc += p.diam_4c[i] * (*p.diam_2c)[i];
  return std::numbers::pi / 4.0 * acc * (p.length / static_cast<double>(p.n_disks()));
}

double ejection_fraction(double v_ed, double v_es) {
  if (!(v_ed > 0)) throw std::invalid_argument("ejection_fraction: end-diastolic volume must be positive");
  return (v_ed - v_es) / v_ed * 100.0;
}

Agreement agreement_stats(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size()) throw DimensionError("agreement_stats: series lengths differ");
  if (pred.size() < 2) throw DimensionError("agreement_stats: need at least two pairs");
  const double n = static_cast<double>(pred.size());
  double mp = 0, mt = 0, md = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mt += truth[i];
    md += pred[i] - truth[i];
  }
  mp /= n;
  mt /= n;
  md /= n;
  double spp = 0, stt = 0, spt = 0, sdd = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = pred[i] - mp, b = truth[i] - mt, d = (pred[i] - truth[i]) - md;
    spp += a * a;
    stt += b * b;
    spt += a * b;
    sdd += d * d;
  }
  if (spp == 0 || stt == 0) throw UndefinedMetricError("agreement_stats: correlation undefined for zero variance");
  return {spt / std::sqrt(spp * stt), md, std::sqrt(sdd / (n - 1))};
}

void write_ef_csv(std::ostream& os, const std::vector<EfRow>& rows) {
  os << "case_id,v_ed,v_es,ef_pred,ef_truth\n";
  std::vector<double> pred, truth;
  for (const auto& r : rows) {
    os << r.case_id << ',' << format_number(r.v_ed) << ',' << format_number(r.v_es) << ',' << format_number(r.ef_pred)
       << ',' << format_number(r.ef_truth) << '\n';
    pred.push_back(r.ef_pred);
    truth.push_back(r.ef_truth);
  }
  Agreement a{std::nan(""), std::nan(""), std::nan("")};
  try {
    a = agreement_stats(pred, truth);
  } catch (const std::exception&) {
  }
  os << "summary," << format_number(a.corr) << ',' << format_number(a.bias) << ',' << format_number(a.std) << ",\n";
}

}  // namespace gdkvm
