#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kepil/knowledge/kb.hpp"
#include "kepil/knowledge/report.hpp"
#include "kepil/knowledge/resources.hpp"
#include "kepil/losses/losses.hpp"
#include "kepil/model/model.hpp"
#include "kepil/synthworld/dataset.hpp"

namespace kepil::train {

// Which adapter branch receives the dual-view semantic contrastive loss.
enum class ScPlacement { None, Report, Prompt, Both };
const char* to_string(ScPlacement p);
ScPlacement parse_placement(const std::string& s);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double grad_clip = 1.0;  // global gradient norm cap; 0 disables
    losses::LossWeights weights;
    bool symmetric = true;
    bool mixed_denominator = false;
    ScPlacement placement = ScPlacement::Report;
    bool enriched_prompts = true;       // Full-tier training queries; name-only otherwise
    bool text_augmentation = false;     // perturb report text instead of the dual-view loss
    double augmentation_rate = 0.5;
    std::size_t top_m = 16;             // query vocabulary size
    std::size_t freeze_text_after = 0;  // freeze the text encoder after this many epochs; 0 = never
    std::uint64_t seed = 0;

    void validate() const;  // ValidationError naming the field
    std::map<std::string, std::string> to_kv() const;
    static TrainConfig from_kv(const std::map<std::string, std::string>& kv);

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Report preprocessing shared by training and evaluation.
knowledge::StandardizedReport standardize_report(const knowledge::RawReport& report,
                                                 const knowledge::Resources& res = knowledge::Resources::defaults());

// Query vocabulary: the most frequent extracted entities that have a
// knowledge-base record, at most m of them.
std::vector<std::string> query_vocabulary(const std::vector<knowledge::StandardizedReport>& corpus,
                                          const knowledge::KnowledgeBase& kb, std::size_t m);

// Present -> Positive, Absent -> Negative, Uncertain or unmentioned -> Masked.
losses::LabelMatrix label_matrix(const std::vector<const knowledge::StandardizedReport*>& reports,
                                 const std::vector<std::string>& queries);

// Tokenizer over the training report serializations plus every prompt tier
// of every knowledge-base record.
model::Tokenizer build_tokenizer(const std::vector<knowledge::StandardizedReport>& corpus,
                                 const knowledge::KnowledgeBase& kb, const knowledge::DescriptorSchema& schema);

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0, cls = 0, ic = 0, sc = 0;
};

struct TrainResult {
    model::Model model;
    std::vector<std::string> queries;
    std::vector<EpochLog> log;
};

using ProgressFn = std::function<void(const EpochLog&)>;

// Trains a fresh model on the samples. Throws DivergenceError on a
// non-finite loss.
TrainResult train_model(const model::ModelConfig& model_config, const TrainConfig& config,
                        const std::vector<synth::SyntheticSample>& samples, const knowledge::KnowledgeBase& kb,
                        const knowledge::Resources& res = knowledge::Resources::defaults(),
                        const ProgressFn& progress = {});

// Value of the full training objective on one batch, used by gradient checks.
num::Var batch_objective(num::Graph& g, model::Model& m, const TrainConfig& config,
                         const std::vector<const num::Tensor*>& images,
                         const std::vector<std::vector<std::size_t>>& report_ids,
                         const std::vector<std::vector<std::size_t>>& prompt_ids, const losses::LabelMatrix& labels,
                         std::uint64_t step_seed, EpochLog* parts = nullptr);

} // namespace kepil::train
