#include "xmusic/gradcheck.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace xmusic {

namespace {

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         (a.empty() ||
          std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

}  // namespace

GradCheckReport gradient_check(const std::function<double()>& loss_fn,
                               const std::vector<Parameter*>& params,
                               double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) {
    throw std::invalid_argument("gradient_check: h must lie in [1e-6, 1e-4], got " +
                                std::to_string(h));
  }
  if (params.empty()) throw std::invalid_argument("gradient_check: no parameters");
  for (const Parameter* p : params) {
    if (p == nullptr) throw std::invalid_argument("gradient_check: null parameter");
  }

  for (Parameter* p : params) p->zero_grad();
  const double loss_a = loss_fn();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad.data);

  for (Parameter* p : params) p->zero_grad();
  const double loss_b = loss_fn();
  if (std::memcmp(&loss_a, &loss_b, sizeof(double)) != 0) {
    throw std::runtime_error(
        "gradient_check invalid: loss differs between identical calls");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!bitwise_equal(analytic[i], params[i]->grad.data)) {
      throw std::runtime_error(
          "gradient_check invalid: gradient of '" + params[i]->name +
          "' differs between identical calls");
    }
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (std::size_t ci = 0; ci < p.value.size(); ++ci) {
      const double saved = p.value.data[ci];
      p.value.data[ci] = saved + h;
      for (Parameter* q : params) q->zero_grad();
      const double lp = loss_fn();
      p.value.data[ci] = saved - h;
      for (Parameter* q : params) q->zero_grad();
      const double lm = loss_fn();
      p.value.data[ci] = saved;

      const double central = (lp - lm) / (2.0 * h);
      const double rel = std::fabs(analytic[pi][ci] - central) /
                         std::max(1.0, std::fabs(central));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p.name;
        report.worst_coord = static_cast<int>(ci);
        report.analytic = analytic[pi][ci];
        report.central = central;
      }
    }
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    params[pi]->grad.data = analytic[pi];
  }
  return report;
}

}  // namespace xmusic
