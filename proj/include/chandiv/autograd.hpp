#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "chandiv/tensor.hpp"

namespace chandiv {

namespace detail {

template <typename T>
struct Node {
    Array<T> value;
    Array<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    // Recorded inputs; the backward rule only touches these.
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Array<T>& grad_out)> backward;

    Array<T>& ensure_grad() {
        if (grad.empty()) grad = Array<T>(value.shape());
        return grad;
    }

    void accumulate(const Array<T>& g) {
        auto& dst = ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
};

}  // namespace detail

// Handle to a node of the differentiation graph. Copies alias the same node,
// so a parameter tensor held by a layer and by the optimizer is one object.
template <typename T>
class Tensor {
   public:
    using Node = detail::Node<T>;

    Tensor() = default;

    explicit Tensor(Array<T> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Tensor from_node(std::shared_ptr<Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Array<T>& value() const { return node_->value; }
    Array<T>& value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rank() const { return node_->value.rank(); }
    std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    bool is_leaf() const { return !node_->backward; }
    const char* op_name() const { return node_->op; }

    bool has_grad() const { return !node_->grad.empty(); }
    const Array<T>& grad() const { return node_->grad; }
    Array<T>& grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad = Array<T>(); }

    Tensor detach() const { return Tensor(node_->value, false); }

    const std::shared_ptr<Node>& node() const { return node_; }

   private:
    std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Gradients add onto whatever the
// leaves already hold; call zero_grad between steps.
template <typename T>
void backward(const Tensor<T>& loss);

// Nodes reachable from `root` in execution order (parents before children).
template <typename T>
std::vector<detail::Node<T>*> recorded_order(const Tensor<T>& root);

extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);
extern template std::vector<detail::Node<float>*> recorded_order<float>(const Tensor<float>&);
extern template std::vector<detail::Node<double>*> recorded_order<double>(const Tensor<double>&);

}  // namespace chandiv
