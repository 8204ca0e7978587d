#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "kepil/numerics/tensor.hpp"

namespace kepil::num {

// A named leaf tensor owned by a model. Non-trainable parameters enter a
// graph as constants and never receive gradients.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

// Insertion-ordered parameter collection with stable addresses.
class ParamStore {
public:
    Parameter& add(std::string name, Tensor value, bool trainable = true);
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;

    std::size_t size() const { return params_.size(); }
    std::size_t total_elements() const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.cbegin(); }
    auto end() const { return params_.cend(); }

    void set_trainable_prefix(const std::string& prefix, bool trainable);

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, Parameter*> index_;
};

struct GradReport {
    std::map<std::string, Tensor> grads;
    std::optional<double> max_rel_error;

    const Tensor* find(const std::string& name) const {
        auto it = grads.find(name);
        return it == grads.end() ? nullptr : &it->second;
    }
};

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    bool requires_grad() const;
};

enum class GradMode { On, Off };

// Append-only tape of tensor operations. Node ids are a topological order:
// an op may only reference nodes that already exist, so a cycle cannot be
// expressed; record() rejects any forward reference.
class Graph {
public:
    // Receives the gradient of the node's output; pushes parent gradients
    // with accumulate().
    using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

    explicit Graph(GradMode mode = GradMode::On) : mode_(mode) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    GradMode mode() const { return mode_; }

    Var constant(Tensor value);
    // Binds a parameter once per graph; repeated calls return the same node.
    Var parameter(Parameter& p);
    Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    // Adds g to the gradient of v. Only valid during backward().
    void accumulate(Var v, const Tensor& g);
    void accumulate(Var v, Tensor&& g);

    // Reverse-mode sweep from a scalar node. Gradients of trainable
    // parameters are returned by name.
    GradReport backward(Var loss);

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    void check_own(Var v, const char* what) const;

    GradMode mode_;
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<bool> has_grad_;
    std::unordered_map<const Parameter*, std::size_t> bound_;
    bool in_backward_ = false;
};

} // namespace kepil::num
