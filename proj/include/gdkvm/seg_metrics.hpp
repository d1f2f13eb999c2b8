#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "gdkvm/tensor_io.hpp"

namespace gdkvm {

class MaskGrid {
 public:
  MaskGrid() = default;
  MaskGrid(std::size_t height, std::size_t width);
  // Accepts H x W or H x W x 1; any nonzero byte is foreground.
  static MaskGrid from_tensor(const ByteTensor& t);
  // Foreground where value > threshold.
  template <typename T>
  static MaskGrid threshold(const BasicTensor<T>& t, T level);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  bool at(std::size_t y, std::size_t x) const { return bits_[y * width_ + x] != 0; }
  void set(std::size_t y, std::size_t x, bool on) { bits_[y * width_ + x] = on ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  // Foreground pixels with a 4-neighbour that is background or off-grid,
  // in raster order.
  std::vector<std::pair<std::size_t, std::size_t>> boundary() const;
  ByteTensor to_tensor() const;  // H x W, values 0/1

  friend bool operator==(const MaskGrid& a, const MaskGrid& b) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Both empty -> 1. DimensionError on size mismatch.
double dice(const MaskGrid& a, const MaskGrid& b);
double iou(const MaskGrid& a, const MaskGrid& b);

// Exact symmetric Hausdorff distance between boundaries, in pixels times
// spacing. UndefinedMetricError when either mask is empty.
double hausdorff(const MaskGrid& a, const MaskGrid& b, double spacing = 1.0);
// Mean of the two directed mean boundary distances.
double asd(const MaskGrid& a, const MaskGrid& b, double spacing = 1.0);

// Squared Euclidean distance from every pixel to the nearest site, exact
// for integer grids. Sites are the nonzero entries of the mask.
std::vector<double> squared_distance_transform(std::size_t height, std::size_t width,
                                               const std::vector<std::uint8_t>& sites);

struct FrameScores {
  std::string sequence_id;
  std::size_t frame = 0;
  double dice = 0;
  double iou = 0;
  double hd = 0;
  double asd = 0;
};

// Scores a predicted mask against truth for evaluation tables. When exactly
// one mask is empty the boundary distances are set to the image diagonal
// (times spacing); both empty scores a perfect 0.
FrameScores score_frame(const std::string& sequence_id, std::size_t frame, const MaskGrid& pred,
                        const MaskGrid& truth, double spacing = 1.0);

struct MeanScores {
  double dice = 0;
  double iou = 0;
  double hd = 0;
  double asd = 0;
  std::size_t count = 0;
};

MeanScores mean_scores(const std::vector<FrameScores>& rows);

// sequence_id,frame,dice,iou,hd,asd followed by a "mean" row.
void write_eval_csv(std::ostream& os, const std::vector<FrameScores>& rows);

}  // namespace gdkvm
