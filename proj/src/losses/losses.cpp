#include "kepil/losses/losses.hpp"

#include <string>

#include "kepil/errors.hpp"
#include "kepil/numerics/ops.hpp"

namespace kepil::losses {

namespace ops = num::ops;
using num::Tensor;

void LossWeights::validate() const {
    if (!(tau > 0.0)) throw DomainError("tau must be positive, got " + std::to_string(tau));
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw DomainError("loss weights must be nonnegative");
    if (lambda1 == 0 && lambda2 == 0 && lambda3 == 0) throw DomainError("at least one loss weight must be positive");
}

namespace {

void check_pair(Var a, Var b, double tau, const char* what) {
    if (!(tau > 0.0)) throw DomainError(std::string(what) + ": tau must be positive");
    if (a.value().rank() != 2 || b.value().rank() != 2 || a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(what) + ": views must have equal shapes");
    if (a.rows() == 0) throw DomainError(std::string(what) + ": empty batch");
}

std::vector<std::size_t> diagonal_targets(std::size_t n) {
    std::vector<std::size_t> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = i;
    return t;
}

// One direction: anchors a, candidates b.
Var info_nce(Var a_norm, Var b_norm, double tau, bool mixed) {
    const std::size_t n = a_norm.rows();
    Var logits = ops::scale(ops::matmul_nt(a_norm, b_norm), 1.0 / tau);
    if (!mixed) return ops::cross_entropy_rows(logits, diagonal_targets(n));
    Var self = ops::scale(ops::matmul_nt(a_norm, a_norm), 1.0 / tau);
    Var both = ops::concat_cols({logits, self});
    std::vector<std::vector<bool>> exclude(n, std::vector<bool>(2 * n, false));
    for (std::size_t i = 0; i < n; ++i) exclude[i][n + i] = true;
    return ops::cross_entropy_rows(both, diagonal_targets(n), exclude);
}

Var contrastive(Var x, Var y, double tau, bool symmetric, bool mixed) {
    Var xn = ops::l2_normalize_rows(x);
    Var yn = ops::l2_normalize_rows(y);
    Var forward = info_nce(xn, yn, tau, mixed);
    if (!symmetric) return forward;
    Var backward = info_nce(yn, xn, tau, mixed);
    return ops::scale(ops::add(forward, backward), 0.5);
}

} // namespace

Var l_sc(Var view1, Var view2, double tau, const ContrastiveOptions& options) {
    check_pair(view1, view2, tau, "l_sc");
    return contrastive(view1, view2, tau, options.symmetric, options.mixed_denominator);
}

Var l_ic(Var img_cls, Var txt_cls, double tau, bool symmetric) {
    check_pair(img_cls, txt_cls, tau, "l_ic");
    return contrastive(img_cls, txt_cls, tau, symmetric, false);
}

std::size_t LabelMatrix::count(Label l) const {
    std::size_t n = 0;
    for (auto c : cells_) n += c == l;
    return n;
}

Var l_cls(Var probs, const LabelMatrix& labels) {
    const Tensor& p = probs.value();
    if (p.rank() != 2 || p.rows() != labels.rows() || p.cols() != labels.cols())
        throw ShapeError("l_cls: probabilities " + num::shape_str(p.shape()) + " do not match labels " +
                         std::to_string(labels.rows()) + "x" + std::to_string(labels.cols()));
    auto& g = *probs.graph;
    const std::size_t active = labels.rows() * labels.cols() - labels.count(Label::Masked);
    if (active == 0) return g.constant(Tensor::scalar(0.0));
    const num::Shape shape = p.shape();  // p dangles once nodes are added
    Tensor wpos(shape), wneg(shape);
    const double inv = -1.0 / static_cast<double>(active);
    for (std::size_t r = 0; r < labels.rows(); ++r)
        for (std::size_t c = 0; c < labels.cols(); ++c) {
            if (labels(r, c) == Label::Positive) wpos(r, c) = inv;
            if (labels(r, c) == Label::Negative) wneg(r, c) = inv;
        }
    Var pc = ops::clamp(probs, kProbClamp, 1.0 - kProbClamp);
    Var one_minus = ops::sub(g.constant(Tensor(shape, 1.0)), pc);
    Var pos = ops::sum(ops::mul(g.constant(std::move(wpos)), ops::log(pc)));
    Var neg = ops::sum(ops::mul(g.constant(std::move(wneg)), ops::log(one_minus)));
    return ops::add(pos, neg);
}

Var total_loss(num::Graph& g, std::optional<Var> cls, std::optional<Var> ic, std::optional<Var> sc,
               const LossWeights& w) {
    std::optional<Var> acc;
    auto term = [&](std::optional<Var> v, double lambda) {
        if (!v) return;
        Var t = ops::scale(*v, lambda);
        acc = acc ? ops::add(*acc, t) : t;
    };
    term(cls, w.lambda1);
    term(ic, w.lambda2);
    term(sc, w.lambda3);
    return acc ? *acc : g.constant(Tensor::scalar(0.0));
}

} // namespace kepil::losses
