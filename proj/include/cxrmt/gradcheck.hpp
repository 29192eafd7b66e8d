#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "cxrmt/rng.hpp"
#include "cxrmt/tensor.hpp"

namespace cxrmt {

struct GradCheckOptions {
  double step = 1e-4;
  // 0 checks every element; otherwise a seeded random subset of this size.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
};

// Max over checked elements of |analytic - central difference| / max(1, |analytic|).
// x must be a leaf with requires_grad set; f must rebuild its graph on each call.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         const GradCheckOptions& opt = {}) {
  if (!x.is_leaf() || !x.requires_grad()) throw Error("grad_check: x must be a requires_grad leaf");
  if (!(opt.step > 0.0)) throw PreconditionError("grad_check: step must be positive");
  x.zero_grad();
  backward(f(x));
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());

  std::vector<std::size_t> order(x.numel());
  std::iota(order.begin(), order.end(), 0);
  if (opt.max_elements != 0 && opt.max_elements < order.size()) {
    Rng rng(opt.seed);
    rng.shuffle(order.begin(), order.end());
    order.resize(opt.max_elements);
    std::sort(order.begin(), order.end());
  }

  auto values = x.mutable_data();
  double worst = 0.0;
  for (std::size_t i : order) {
    const double keep = values[i];
    values[i] = keep + opt.step;
    const double up = f(x).item();
    values[i] = keep - opt.step;
    const double down = f(x).item();
    values[i] = keep;
    const double numeric = (up - down) / (2.0 * opt.step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace cxrmt
