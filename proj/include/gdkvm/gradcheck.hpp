#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gdkvm/autograd.hpp"
#include "gdkvm/optim.hpp"

namespace gdkvm {

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
  double max_abs_gradient = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst() const;
  bool passed(double tolerance) const { return worst() <= tolerance; }
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-5);

using LossBuilder = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

// Records build(tape, params) once, takes analytic gradients, then perturbs
// every element by +-h and replays the tape for central differences.
// stride > 1 checks every stride-th element only.
GradCheckReport finite_difference_check(const ParameterSet<double>& params, const LossBuilder& build,
                                        double h = kGradCheckStep, std::size_t stride = 1);

}  // namespace gdkvm
