#include "chandiv/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace chandiv {

namespace {

double scalar_of(const Tensor<double>& t) {
    if (t.size() != 1) throw ContractError("grad_check: function must be scalar-valued, got " + shape_str(t.shape()));
    return t.value()[0];
}

}  // namespace

double grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> leaves, double eps) {
    if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
    for (auto& leaf : leaves) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    backward(f());

    double worst = 0.0;
    for (auto& leaf : leaves) {
        Array<double> analytic = leaf.has_grad() ? leaf.grad() : Array<double>(leaf.shape());
        auto& values = leaf.value();
        for (std::size_t i = 0; i < values.size(); ++i) {
            double saved = values[i];
            values[i] = saved + eps;
            double up = scalar_of(f());
            values[i] = saved - eps;
            double down = scalar_of(f());
            values[i] = saved;
            double numeric = (up - down) / (2.0 * eps);
            double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return worst;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Array<double>& x, double eps) {
    Tensor<double> leaf(x, true);
    return grad_check([&] { return f(leaf); }, {leaf}, eps);
}

}  // namespace chandiv
