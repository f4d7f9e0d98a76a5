#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "udissect/graph.hpp"

namespace udissect {

struct GradCheckReport {
  double max_deviation = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;
};

/// |a - n| / max(1, |a|, |n|): relative for gradients of magnitude above one,
/// absolute below, where central differences carry O(step^2) absolute error.
inline double gradient_deviation(double analytic, double numeric) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

/// Compares the analytic gradient of a scalar root with respect to `leaf`
/// against central differences. At most `max_elements` entries are probed,
/// spread evenly over the tensor. The leaf's grad buffer is overwritten.
template <class T>
GradCheckReport gradient_check(Graph<T>& graph, Var root, Tensor<T>& leaf, T step,
                               std::size_t max_elements = 0) {
  require(step > T(0), ErrorKind::InvalidArgument, "finite-difference step must be positive");
  graph.evaluate(root);
  leaf.zero_grad();
  graph.backpropagate(root);
  require(leaf.requires_grad(), ErrorKind::InvalidArgument, "leaf does not require grad");
  const std::vector<T> analytic(leaf.grad().begin(), leaf.grad().end());

  const std::size_t n = leaf.size();
  const std::size_t count = (max_elements == 0 || max_elements >= n) ? n : max_elements;
  GradCheckReport report;
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t i = count == n ? j : (j * n) / count;
    const T saved = leaf[i];
    leaf[i] = saved + step;
    const double up = double(graph.evaluate(root)[0]);
    leaf[i] = saved - step;
    const double down = double(graph.evaluate(root)[0]);
    leaf[i] = saved;
    const double numeric = (up - down) / (2.0 * double(step));
    const double dev = gradient_deviation(double(analytic[i]), numeric);
    if (dev > report.max_deviation || report.checked == 0) {
      report.max_deviation = dev;
      report.worst_index = i;
      report.analytic_at_worst = double(analytic[i]);
      report.numeric_at_worst = numeric;
    }
    ++report.checked;
  }
  graph.evaluate(root);
  return report;
}

template <class T>
bool finite_difference_check(Graph<T>& graph, Var root, Tensor<T>& leaf, T step, T tolerance,
                             std::size_t max_elements = 0) {
  return gradient_check(graph, root, leaf, step, max_elements).max_deviation <= double(tolerance);
}

}  // namespace udissect
