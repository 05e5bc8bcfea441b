#pragma once

#include <functional>
#include <vector>

#include "chandiv/autograd.hpp"

namespace chandiv {

// Compares reverse-mode gradients of a scalar function against central
// differences. Returns max over components of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Array<double>& x,
                  double eps = 1e-5);

// Same check over several leaves at once; `f` reads the leaves it closes over.
// Leaf values are perturbed in place and restored afterwards.
double grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> leaves, double eps = 1e-5);

}  // namespace chandiv
