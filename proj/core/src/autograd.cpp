#include "retain/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace retain::ag {

Tensor& Node::grad() {
    if (grad_.data.empty()) grad_ = Tensor(value.shape, 0.0f);
    return grad_;
}

void Node::zero_grad() { grad_ = Tensor(); }

Var leaf(Tensor value, bool requires_grad, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

void backward(const Var& loss) {
    if (!loss) throw std::invalid_argument("backward: null node");
    if (loss->value.numel() != 1) throw std::invalid_argument("backward requires a scalar loss, got " + loss->value.shape_str());
    if (!loss->requires_grad) return;

    // Iterative post-order DFS over grad-requiring nodes; the resulting list
    // is a topological order (inputs before consumers).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Node* p = node->parents[next_child++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Leaf gradients accumulate across calls; interior nodes are per-pass
    // scratch and start each pass at zero (otherwise a second pass would
    // compound through them).
    for (Node* n : order)
        if (!n->parents.empty()) n->zero_grad();

    loss->grad().data[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

}  // namespace retain::ag
