#include "gdkvm/seg_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "gdkvm/csv.hpp"
#include "gdkvm/error.hpp"

namespace gdkvm {

MaskGrid::MaskGrid(std::size_t height, std::size_t width) : height_(height), width_(width), bits_(height * width, 0) {
  if (height == 0 || width == 0) throw DimensionError("MaskGrid: dimensions must be >= 1");
}

MaskGrid MaskGrid::from_tensor(const ByteTensor& t) {
  if (t.rank() != 2 && !(t.rank() == 3 && t.dim(2) == 1)) {
    throw DimensionError("MaskGrid: expected H x W or H x W x 1, got " + shape_string(t.shape()));
  }
  MaskGrid m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.size(); ++i) m.bits_[i] = t[i] != 0;
  return m;
}

template <typename T>
MaskGrid MaskGrid::threshold(const BasicTensor<T>& t, T level) {
  if (t.rank() != 2 && !(t.rank() == 3 && t.dim(2) == 1)) {
    throw DimensionError("MaskGrid::threshold: expected H x W or H x W x 1, got " + shape_string(t.shape()));
  }
  MaskGrid m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.size(); ++i) m.bits_[i] = t[i] > level;
  return m;
}

template MaskGrid MaskGrid::threshold(const BasicTensor<float>&, float);
template MaskGrid MaskGrid::threshold(const BasicTensor<double>&, double);

std::size_t MaskGrid::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::vector<std::pair<std::size_t, std::size_t>> MaskGrid::boundary() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t y = 0; y < height_; ++y) {
    for (std::size_t x = 0; x < width_; ++x) {
      if (!at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == height_ || x + 1 == width_ || !at(y - 1, x) || !at(y + 1, x) ||
                        !at(y, x - 1) || !at(y, x + 1);
      if (edge) out.emplace_back(y, x);
    }
  }
  return out;
}

ByteTensor MaskGrid::to_tensor() const { return ByteTensor({height_, width_}, bits_); }

namespace {

void require_same_grid(const MaskGrid& a, const MaskGrid& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw DimensionError(std::string(what) + ": mask sizes differ (" + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()) + ")");
  }
}

struct Overlap {
  std::size_t a = 0, b = 0, both = 0;
};

Overlap overlap(const MaskGrid& a, const MaskGrid& b) {
  Overlap o;
  for (std::size_t i = 0; i < a.bits().size(); ++i) {
    o.a += a.bits()[i];
    o.b += b.bits()[i];
    o.both += a.bits()[i] & b.bits()[i];
  }
  return o;
}

// Felzenszwalb & Huttenlocher lower envelope of parabolas, in place.
void edt_1d(const double* f, std::size_t n, std::size_t stride, double* out, std::vector<std::size_t>& v,
            std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q * stride] < inf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    for (std::size_t q = 0; q < n; ++q) out[q * stride] = inf;
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    const double fq = f[q * stride];
    if (!(fq < inf)) continue;
    while (true) {
      const double p = static_cast<double>(v[k]);
      const double qd = static_cast<double>(q);
      const double s = ((fq + qd * qd) - (f[v[k] * stride] + p * p)) / (2 * qd - 2 * p);
      if (s <= z[k]) {
        if (k == 0) {
          v[0] = q;
          z[1] = inf;
          break;
        }
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = inf;
      break;
    }
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = static_cast<double>(q) - static_cast<double>(v[k]);
    out[q * stride] = d * d + f[v[k] * stride];
  }
}

}  // namespace

std::vector<double> squared_distance_transform(std::size_t height, std::size_t width,
                                               const std::vector<std::uint8_t>& sites) {
  if (sites.size() != height * width) throw DimensionError("squared_distance_transform: site grid size");
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> f(height * width), tmp(height * width);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = sites[i] ? 0.0 : inf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t x = 0; x < width; ++x) edt_1d(f.data() + x, height, width, tmp.data() + x, v, z);
  for (std::size_t y = 0; y < height; ++y) edt_1d(tmp.data() + y * width, width, 1, f.data() + y * width, v, z);
  return f;
}

double dice(const MaskGrid& a, const MaskGrid& b) {
  require_same_grid(a, b, "dice");
  const Overlap o = overlap(a, b);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.a + o.b);
}

double iou(const MaskGrid& a, const MaskGrid& b) {
  require_same_grid(a, b, "iou");
  const Overlap o = overlap(a, b);
  const std::size_t uni = o.a + o.b - o.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(o.both) / static_cast<double>(uni);
}

namespace {

struct Directed {
  double max = 0;
  double mean = 0;
};

// Distances from each boundary pixel of `from` to the boundary of `to`.
Directed directed_distances(const MaskGrid& from, const MaskGrid& to) {
  const auto to_boundary = to.boundary();
  std::vector<std::uint8_t> sites(to.height() * to.width(), 0);
  for (auto [y, x] : to_boundary) sites[y * to.width() + x] = 1;
  const std::vector<double> d2 = squared_distance_transform(to.height(), to.width(), sites);
  Directed r;
  const auto from_boundary = from.boundary();
  double sum = 0;
  for (auto [y, x] : from_boundary) {
    const double d = std::sqrt(d2[y * from.width() + x]);
    r.max = std::max(r.max, d);
    sum += d;
  }
  r.mean = sum / static_cast<double>(from_boundary.size());
  return r;
}

void require_nonempty(const MaskGrid& a, const MaskGrid& b, const char* what) {
  require_same_grid(a, b, what);
  if (a.empty() || b.empty()) throw UndefinedMetricError(std::string(what) + ": undefined for an empty mask");
}

}  // namespace

double hausdorff(const MaskGrid& a, const MaskGrid& b, double spacing) {
  require_nonempty(a, b, "hausdorff");
  return std::max(directed_distances(a, b).max, directed_distances(b, a).max) * spacing;
}

double asd(const MaskGrid& a, const MaskGrid& b, double spacing) {
  require_nonempty(a, b, "asd");
  return (directed_distances(a, b).mean + directed_distances(b, a).mean) / 2.0 * spacing;
}

FrameScores score_frame(const std::string& sequence_id, std::size_t frame, const MaskGrid& pred,
                        const MaskGrid& truth, double spacing) {
  FrameScores s{sequence_id, frame, dice(pred, truth), iou(pred, truth)};
  if (pred.empty() && truth.empty()) return s;
  if (pred.empty() || truth.empty()) {
    const double diag = std::hypot(static_cast<double>(truth.height()), static_cast<double>(truth.width()));
    s.hd = s.asd = diag * spacing;
    return s;
  }
  const Directed ab = directed_distances(pred, truth);
  const Directed ba = directed_distances(truth, pred);
  s.hd = std::max(ab.max, ba.max) * spacing;
  s.asd = (ab.mean + ba.mean) / 2.0 * spacing;
  return s;
}

MeanScores mean_scores(const std::vector<FrameScores>& rows) {
  MeanScores m;
  for (const auto& r : rows) {
    m.dice += r.dice;
    m.iou += r.iou;
    m.hd += r.hd;
    m.asd += r.asd;
  }
  m.count = rows.size();
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    m.dice /= n;
    m.iou /= n;
    m.hd /= n;
    m.asd /= n;
  }
  return m;
}

void write_eval_csv(std::ostream& os, const std::vector<FrameScores>& rows) {
  os << "sequence_id,frame,dice,iou,hd,asd\n";
  for (const auto& r : rows) {
    os << r.sequence_id << ',' << r.frame << ',' << format_number(r.dice) << ',' << format_number(r.iou) << ','
       << format_number(r.hd) << ',' << format_number(r.asd) << '\n';
  }
  const MeanScores m = mean_scores(rows);
  os << "mean,," << format_number(m.dice) << ',' << format_number(m.iou) << ',' << format_number(m.hd) << ','
     << format_number(m.asd) << '\n';
}

}  // namespace gdkvm
