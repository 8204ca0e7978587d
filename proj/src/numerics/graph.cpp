#include "kepil/numerics/graph.hpp"

#include "kepil/errors.hpp"

namespace kepil::num {

Parameter& ParamStore::add(std::string name, Tensor value, bool trainable) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter>(Parameter{name, std::move(value), trainable});
    Parameter& ref = *p;
    index_[ref.name] = &ref;
    params_.push_back(std::move(p));
    return ref;
}

Parameter* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
}

const Parameter* ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
}

Parameter& ParamStore::at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw LookupError("unknown parameter: " + name);
}

const Parameter& ParamStore::at(const std::string& name) const {
    if (auto* p = find(name)) return *p;
    throw LookupError("unknown parameter: " + name);
}

std::size_t ParamStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
}

void ParamStore::set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& p : params_)
        if (p->name.rfind(prefix, 0) == 0) p->trainable = trainable;
}

const Tensor& Var::value() const { return graph->value(*this); }
bool Var::requires_grad() const { return graph->requires_grad(*this); }

void Graph::check_own(Var v, const char* what) const {
    if (v.graph != this) throw GraphError(std::string(what) + ": variable belongs to another graph");
    if (v.id >= nodes_.size())
        throw GraphError(std::string(what) + ": reference to node " + std::to_string(v.id) +
                         " which does not exist yet (would create a cycle)");
}

Var Graph::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var{this, it->second};
    const bool trainable = p.trainable && mode_ == GradMode::On;
    nodes_.push_back(Node{p.value, {}, {}, trainable ? &p : nullptr, trainable});
    bound_[&p] = nodes_.size() - 1;
    return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
    if (in_backward_) throw GraphError("cannot record operations during backward()");
    Node node;
    node.value = std::move(value);
    node.parents.reserve(parents.size());
    for (const auto& p : parents) {
        check_own(p, "record");
        node.parents.push_back(p.id);
        node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::value(Var v) const {
    check_own(v, "value");
    return nodes_[v.id].value;
}

bool Graph::requires_grad(Var v) const {
    check_own(v, "requires_grad");
    return nodes_[v.id].requires_grad;
}

void Graph::accumulate(Var v, const Tensor& g) {
    if (!in_backward_) throw GraphError("accumulate() outside backward()");
    check_own(v, "accumulate");
    if (!nodes_[v.id].requires_grad) return;
    if (g.shape() != nodes_[v.id].value.shape())
        throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match node shape " +
                         shape_str(nodes_[v.id].value.shape()));
    if (!has_grad_[v.id]) {
        grads_[v.id] = g;
        has_grad_[v.id] = true;
        return;
    }
    auto dst = grads_[v.id].values();
    auto src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Graph::accumulate(Var v, Tensor&& g) {
    if (!in_backward_) throw GraphError("accumulate() outside backward()");
    check_own(v, "accumulate");
    if (nodes_[v.id].requires_grad && !has_grad_[v.id] && g.shape() == nodes_[v.id].value.shape()) {
        grads_[v.id] = std::move(g);
        has_grad_[v.id] = true;
        return;
    }
    accumulate(v, static_cast<const Tensor&>(g));
}

GradReport Graph::backward(Var loss) {
    check_own(loss, "backward");
    if (nodes_[loss.id].value.size() != 1)
        throw ShapeError("backward: loss must be a scalar, got shape " +
                         shape_str(nodes_[loss.id].value.shape()));
    GradReport report;
    grads_.assign(nodes_.size(), Tensor{});
    has_grad_.assign(nodes_.size(), false);
    in_backward_ = true;
    try {
        if (nodes_[loss.id].requires_grad) {
            grads_[loss.id] = Tensor(nodes_[loss.id].value.shape(), 1.0);
            has_grad_[loss.id] = true;
        }
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            if (!has_grad_[i]) continue;
            Node& n = nodes_[i];
            for (auto p : n.parents)
                if (p >= i) throw GraphError("graph is not acyclic at node " + std::to_string(i));
            if (n.backward) n.backward(*this, grads_[i]);
            if (n.param) {
                auto [it, inserted] = report.grads.try_emplace(n.param->name, grads_[i]);
                if (!inserted) {
                    auto dst = it->second.values();
                    auto src = grads_[i].values();
                    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
                }
            }
            if (!n.param) grads_[i] = Tensor{};  // release intermediate storage
        }
    } catch (...) {
        in_backward_ = false;
        throw;
    }
    in_backward_ = false;
    // Reachable trainable leaves that got no gradient flow still get zeros.
    for (std::size_t i = 0; i <= loss.id; ++i) {
        const Node& n = nodes_[i];
        if (n.param && !report.grads.count(n.param->name))
            report.grads.emplace(n.param->name, Tensor(n.value.shape()));
    }
    grads_.clear();
    has_grad_.clear();
    return report;
}

} // namespace kepil::num
