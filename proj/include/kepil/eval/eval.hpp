#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kepil/knowledge/kb.hpp"
#include "kepil/knowledge/resources.hpp"
#include "kepil/model/model.hpp"
#include "kepil/synthworld/dataset.hpp"
#include "kepil/variantgen/variants.hpp"

namespace kepil::eval {

// --- metrics ---

// Rank-sum AUC with average ranks for ties (ties count 0.5). DomainError
// when the labels hold only one class or the lengths differ.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);
// Direct pair counting, O(n^2); the reference for auc().
double auc_pairs(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct BinaryCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double f1() const;        // 0 when there are no positive predictions and no positives
    double accuracy() const;
};
// Predicted positive when score >= threshold.
BinaryCounts confusion(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold);

struct ThresholdChoice {
    double threshold = 0.5;
    double f1 = 0.0;
};
// Threshold (one of the scores) maximising F1; the smallest on ties.
ThresholdChoice best_f1_threshold(std::span<const double> scores, std::span<const std::uint8_t> labels);

// --- zero-shot inference ---

// Probabilities for one image, one per prompt, in prompt order.
std::vector<double> zero_shot_infer(model::Model& m, const num::Tensor& image,
                                    const std::vector<knowledge::EnrichedPrompt>& prompts);
// N x S probabilities for prompt texts over the samples, scored in batches.
num::Tensor score_samples(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                          const std::vector<std::string>& prompt_texts, std::size_t batch = 64);
num::Tensor score_with_queries(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                               const num::Tensor& queries, std::size_t batch = 64);

struct FindingMetrics {
    std::string finding;
    bool defined = false;  // both classes present
    std::size_t positives = 0, negatives = 0;
    double auc = 0, f1 = 0, accuracy = 0;     // threshold 0.5
    double best_threshold = 0.5, f1_best = 0;  // threshold maximising F1 (validation split when given)
};

struct ZeroShotResult {
    std::vector<std::string> findings;
    num::Tensor scores;  // N x S
    std::vector<FindingMetrics> metrics;
    double macro_auc = 0, macro_f1 = 0, macro_accuracy = 0, macro_f1_best = 0;
    std::size_t defined = 0;
};

struct EvalOptions {
    knowledge::PromptTier tier = knowledge::PromptTier::Full;
    // Threshold selection for f1_best; the evaluated split itself when null.
    const std::vector<synth::SyntheticSample>* validation = nullptr;
};

// Labels of `finding` across the samples (from the world's finding order).
std::vector<std::uint8_t> finding_labels(const std::vector<synth::SyntheticSample>& samples,
                                         const synth::WorldSpec& world, const std::string& finding);

// Macro averages cover only findings with both classes present.
ZeroShotResult evaluate_zero_shot(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                                  const synth::WorldSpec& world, const std::vector<std::string>& findings,
                                  const knowledge::KnowledgeBase& kb, const EvalOptions& options = {},
                                  const knowledge::DescriptorSchema& schema = knowledge::Resources::defaults().schema);

struct TierResult {
    knowledge::PromptTier tier;
    double macro_auc = 0;
};
std::vector<TierResult> prompt_tier_eval(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                                         const synth::WorldSpec& world, const std::vector<std::string>& findings,
                                         const knowledge::KnowledgeBase& kb,
                                         const std::vector<knowledge::PromptTier>& tiers,
                                         const knowledge::DescriptorSchema& schema =
                                             knowledge::Resources::defaults().schema);

// --- robustness ---

struct DispersionStats {
    double intra = 0;       // mean pairwise cosine within a finding's variants
    double inter = 0;       // mean pairwise cosine across findings
    double separation = 0;  // intra - inter
};
// groups[i]: rows are embeddings of finding i. Needs two rows in some group
// and at least two groups.
DispersionStats dispersion(const std::vector<num::Tensor>& groups);

struct VariantScore {
    std::string finding;
    bool skipped = false;  // family cannot change this prompt
    std::size_t n_variants = 0;
    double canonical_auc = 0;
    double variant_auc = 0;  // mean over variants
    double delta = 0;        // variant - canonical
};

struct FamilyReport {
    variantgen::VariantKind kind;
    std::vector<VariantScore> findings;
    double mean_delta = 0;  // over findings that were not skipped
    std::vector<double> delta_series;  // per finding delta, in finding order (skipped -> NaN)
    DispersionStats dispersion;
    bool any_applied = false;
};

struct RobustnessReport {
    std::vector<std::string> findings;
    std::vector<double> canonical_auc;
    std::vector<FamilyReport> families;
    DispersionStats dispersion;  // pooled over every family's variants
    double mean_delta = 0;       // mean of family mean deltas
};

struct RobustnessOptions {
    knowledge::PromptTier tier = knowledge::PromptTier::Full;
    bool protect_names = true;  // variants never edit the finding name
};

// Every finding must have both classes in the samples.
RobustnessReport robustness_eval(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                                 const synth::WorldSpec& world, const std::vector<std::string>& findings,
                                 const knowledge::KnowledgeBase& kb,
                                 const std::vector<variantgen::VariantKind>& families, std::size_t n_variants,
                                 std::uint64_t seed, const RobustnessOptions& options = {},
                                 const knowledge::Resources& res = knowledge::Resources::defaults());

} // namespace kepil::eval
