#include "chandiv/tensor.hpp"

#include <numeric>
#include <unordered_set>

#include "chandiv/autograd.hpp"

namespace chandiv {

std::size_t shape_numel(const Shape& shape) {
    if (shape.empty()) return 0;
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

template <typename T>
std::vector<detail::Node<T>*> recorded_order(const Tensor<T>& root) {
    using Node = detail::Node<T>;
    std::vector<Node*> order;
    if (!root.defined()) return order;
    std::unordered_set<Node*> visited;

    // Iterative post-order walk.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
        throw ContractError("loss does not depend on any tensor that requires grad");
    }
    auto order = recorded_order(loss);
    for (auto* node : order) {
        if (node->backward) node->grad = Array<T>();
    }
    loss.node()->accumulate(Array<T>(loss.shape(), T(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(node->grad);
    }
}

template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template std::vector<detail::Node<float>*> recorded_order<float>(const Tensor<float>&);
template std::vector<detail::Node<double>*> recorded_order<double>(const Tensor<double>&);

}  // namespace chandiv
