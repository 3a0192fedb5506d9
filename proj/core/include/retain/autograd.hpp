#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "retain/tensor.hpp"

namespace retain::ag {

class Node;
using Var = std::shared_ptr<Node>;

// One vertex of the compute graph: a forward value, its (lazily allocated)
// gradient buffer, and the rule that pushes the gradient to its parents.
// Forward values are frozen once created; ops never mutate their inputs.
class Node {
  public:
    Tensor value;
    bool requires_grad = false;
    std::string name;  // set for parameters, used in diagnostics

    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // reads this->grad(), accumulates into parents

    Tensor& grad();  // allocates a zero tensor of value's shape on first use
    bool has_grad() const { return !grad_.data.empty(); }
    void zero_grad();

  private:
    Tensor grad_;
};

Var leaf(Tensor value, bool requires_grad, std::string name = "");
Var constant(Tensor value);

// Reverse pass from a scalar loss. Gradients accumulate across calls until
// zero_grad is invoked on the leaves; callers owning parameters should clear
// them between steps.
void backward(const Var& loss);

}  // namespace retain::ag
