#include "gdkvm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace gdkvm {

double GradCheckReport::worst() const {
  double w = 0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport finite_difference_check(const ParameterSet<double>& params, const LossBuilder& build, double h,
                                        std::size_t stride) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p.value));
  const ad::Var<double> root = build(tape, vars);
  tape.backward(root);

  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    GradCheckEntry entry{params[i].name};
    const Tensor64 analytic = tape.has_grad(vars[i].id) ? tape.grad(vars[i].id) : Tensor64(params[i].value.shape());
    Tensor64 probe = params[i].value;
    for (std::size_t j = 0; j < probe.size(); j += std::max<std::size_t>(stride, 1)) {
      const double x = probe[j];
      probe[j] = x + h;
      tape.set_value(vars[i].id, probe);
      tape.replay();
      const double up = tape.value(root.id)[0];
      probe[j] = x - h;
      tape.set_value(vars[i].id, probe);
      tape.replay();
      const double down = tape.value(root.id)[0];
      probe[j] = x;
      const double numeric = (up - down) / (2 * h);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[j], numeric));
      entry.max_abs_gradient = std::max(entry.max_abs_gradient, std::abs(analytic[j]));
      ++entry.checked;
    }
    tape.set_value(vars[i].id, probe);
    report.entries.push_back(entry);
  }
  tape.replay();
  return report;
}

}  // namespace gdkvm
