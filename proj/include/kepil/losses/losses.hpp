#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "kepil/numerics/graph.hpp"

namespace kepil::losses {

using num::Var;

struct LossWeights {
    double lambda1 = 1.0;  // classification
    double lambda2 = 1.0;  // image-report contrastive
    double lambda3 = 1.0;  // dual-view semantic contrastive
    double tau = 0.07;

    void validate() const;  // DomainError: tau <= 0, negative lambda, all lambdas 0

    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct ContrastiveOptions {
    bool symmetric = true;            // average both directions
    bool mixed_denominator = false;   // anchors also compete against the other first-view rows
};

// Dual-view InfoNCE over cosine similarities. Row i of view1 and view2 form
// the positive pair; the other rows of the opposite view are negatives.
Var l_sc(Var view1, Var view2, double tau, const ContrastiveOptions& options = {});

// Image/report InfoNCE; same form, image rows as anchors (plus the reverse
// direction when symmetric).
Var l_ic(Var img_cls, Var txt_cls, double tau, bool symmetric = true);

enum class Label : std::uint8_t { Negative = 0, Positive = 1, Masked = 2 };

class LabelMatrix {
public:
    LabelMatrix() = default;
    LabelMatrix(std::size_t rows, std::size_t cols, Label fill = Label::Masked)
        : rows_(rows), cols_(cols), cells_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    Label operator()(std::size_t r, std::size_t c) const { return cells_[r * cols_ + c]; }
    Label& operator()(std::size_t r, std::size_t c) { return cells_[r * cols_ + c]; }
    std::size_t count(Label l) const;

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<Label> cells_;
};

inline constexpr double kProbClamp = 1e-12;

// Mean binary cross-entropy over cells that are not Masked; probabilities are
// clamped into [1e-12, 1 - 1e-12]. All cells Masked gives a constant 0.
Var l_cls(Var probs, const LabelMatrix& labels);

// lambda1 * cls + lambda2 * ic + lambda3 * sc; missing components count as 0.
Var total_loss(num::Graph& g, std::optional<Var> cls, std::optional<Var> ic, std::optional<Var> sc,
               const LossWeights& w);

} // namespace kepil::losses
