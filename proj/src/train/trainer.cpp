#include "kepil/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "kepil/errors.hpp"
#include "kepil/numerics/ops.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/util/strings.hpp"
#include "kepil/variantgen/variants.hpp"

namespace kepil::train {

namespace ops = num::ops;
using knowledge::Status;
using losses::Label;
using num::Graph;
using num::Tensor;
using num::Var;

const char* to_string(ScPlacement p) {
    switch (p) {
        case ScPlacement::None: return "none";
        case ScPlacement::Report: return "report";
        case ScPlacement::Prompt: return "prompt";
        case ScPlacement::Both: return "both";
    }
    return "?";
}

ScPlacement parse_placement(const std::string& s) {
    if (s == "none") return ScPlacement::None;
    if (s == "report") return ScPlacement::Report;
    if (s == "prompt") return ScPlacement::Prompt;
    if (s == "both") return ScPlacement::Both;
    throw ValidationError("train.sc_placement: expected none|report|prompt|both, got '" + s + "'");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ValidationError("train." + field + ": " + why);
    };
    if (epochs == 0) fail("epochs", "must be at least 1");
    if (batch_size < 2) fail("batch_size", "must be at least 2 (contrastive losses need negatives)");
    if (!(learning_rate > 0.0)) fail("learning_rate", "must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must lie in [0, 1)");
    if (!(grad_clip >= 0.0)) fail("grad_clip", "must be nonnegative");
    if (!(weights.tau > 0.0)) fail("tau", "must be positive");
    if (weights.lambda1 < 0) fail("lambda1", "must be nonnegative");
    if (weights.lambda2 < 0) fail("lambda2", "must be nonnegative");
    if (weights.lambda3 < 0) fail("lambda3", "must be nonnegative");
    if (weights.lambda1 == 0 && weights.lambda2 == 0 && weights.lambda3 == 0)
        fail("lambda1", "at least one loss weight must be positive");
    if (!(augmentation_rate >= 0.0 && augmentation_rate <= 1.0)) fail("augmentation_rate", "must lie in [0, 1]");
    if (top_m == 0) fail("top_m", "must be at least 1");
}

std::map<std::string, std::string> TrainConfig::to_kv() const {
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    return {{"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"learning_rate", util::format_double(learning_rate)},
            {"momentum", util::format_double(momentum)},
            {"grad_clip", util::format_double(grad_clip)},
            {"lambda1", util::format_double(weights.lambda1)},
            {"lambda2", util::format_double(weights.lambda2)},
            {"lambda3", util::format_double(weights.lambda3)},
            {"tau", util::format_double(weights.tau)},
            {"symmetric", b(symmetric)},
            {"mixed_denominator", b(mixed_denominator)},
            {"sc_placement", to_string(placement)},
            {"enriched_prompts", b(enriched_prompts)},
            {"text_augmentation", b(text_augmentation)},
            {"augmentation_rate", util::format_double(augmentation_rate)},
            {"top_m", std::to_string(top_m)},
            {"freeze_text_after", std::to_string(freeze_text_after)},
            {"seed", std::to_string(seed)}};
}

TrainConfig TrainConfig::from_kv(const std::map<std::string, std::string>& kv) {
    TrainConfig c;
    for (const auto& [k, v] : kv) {
        const std::string field = "train." + k;
        if (k == "epochs") c.epochs = util::parse_size(field, v);
        else if (k == "batch_size") c.batch_size = util::parse_size(field, v);
        else if (k == "learning_rate") c.learning_rate = util::parse_double(field, v);
        else if (k == "momentum") c.momentum = util::parse_double(field, v);
        else if (k == "grad_clip") c.grad_clip = util::parse_double(field, v);
        else if (k == "lambda1") c.weights.lambda1 = util::parse_double(field, v);
        else if (k == "lambda2") c.weights.lambda2 = util::parse_double(field, v);
        else if (k == "lambda3") c.weights.lambda3 = util::parse_double(field, v);
        else if (k == "tau") c.weights.tau = util::parse_double(field, v);
        else if (k == "symmetric") c.symmetric = util::parse_bool(field, v);
        else if (k == "mixed_denominator") c.mixed_denominator = util::parse_bool(field, v);
        else if (k == "sc_placement") c.placement = parse_placement(v);
        else if (k == "enriched_prompts") c.enriched_prompts = util::parse_bool(field, v);
        else if (k == "text_augmentation") c.text_augmentation = util::parse_bool(field, v);
        else if (k == "augmentation_rate") c.augmentation_rate = util::parse_double(field, v);
        else if (k == "top_m") c.top_m = util::parse_size(field, v);
        else if (k == "freeze_text_after") c.freeze_text_after = util::parse_size(field, v);
        else if (k == "seed") c.seed = util::parse_u64(field, v);
        else throw ValidationError(field + ": unknown key");
    }
    return c;
}

knowledge::StandardizedReport standardize_report(const knowledge::RawReport& report, const knowledge::Resources& res) {
    return knowledge::standardize(knowledge::extract_entities(report, res.lexicon, res.cues));
}

std::vector<std::string> query_vocabulary(const std::vector<knowledge::StandardizedReport>& corpus,
                                          const knowledge::KnowledgeBase& kb, std::size_t m) {
    if (m == 0) throw DomainError("query vocabulary size must be at least 1");
    std::set<std::string> distinct;
    for (const auto& r : corpus)
        for (const auto& it : r.items) distinct.insert(it.entity);
    if (distinct.empty()) throw ValidationError("query vocabulary: the report corpus mentions no entities");
    auto vocab = knowledge::build_vocabulary(corpus, distinct.size());
    std::vector<std::string> out;
    for (const auto& e : vocab.entries)
        if (kb.contains(e) && out.size() < m) out.push_back(e);
    if (out.empty()) throw ValidationError("query vocabulary: no extracted entity has a knowledge-base record");
    return out;
}

losses::LabelMatrix label_matrix(const std::vector<const knowledge::StandardizedReport*>& reports,
                                 const std::vector<std::string>& queries) {
    losses::LabelMatrix m(reports.size(), queries.size(), Label::Masked);
    for (std::size_t b = 0; b < reports.size(); ++b)
        for (std::size_t s = 0; s < queries.size(); ++s) {
            bool present = false, absent = false;
            for (const auto& it : reports[b]->items) {
                if (it.entity != queries[s]) continue;
                present |= it.status == Status::Present;
                absent |= it.status == Status::Absent;
            }
            // a report asserting both is contradictory: leave it masked
            if (present != absent) m(b, s) = present ? Label::Positive : Label::Negative;
        }
    return m;
}

namespace {

std::vector<std::string> kb_prompt_texts(const knowledge::KnowledgeBase& kb, const knowledge::DescriptorSchema& schema) {
    std::vector<std::string> out;
    for (const auto& [name, e] : kb.entries())
        for (auto tier : {knowledge::PromptTier::NameOnly, knowledge::PromptTier::NamePlusDefinition,
                          knowledge::PromptTier::Full})
            out.push_back(knowledge::enrich_prompt(e.finding, kb, tier, schema).text);
    return out;
}

} // namespace

model::Tokenizer build_tokenizer(const std::vector<knowledge::StandardizedReport>& corpus,
                                 const knowledge::KnowledgeBase& kb, const knowledge::DescriptorSchema& schema) {
    std::vector<std::string> texts;
    for (const auto& r : corpus) texts.push_back(r.serialize());
    for (auto& t : kb_prompt_texts(kb, schema)) texts.push_back(std::move(t));
    return model::Tokenizer::build(texts);
}

Var batch_objective(Graph& g, model::Model& m, const TrainConfig& config, const std::vector<const Tensor*>& images,
                    const std::vector<std::vector<std::size_t>>& report_ids,
                    const std::vector<std::vector<std::size_t>>& prompt_ids, const losses::LabelMatrix& labels,
                    std::uint64_t step_seed, EpochLog* parts) {
    using model::AdapterMode;
    using model::Branch;
    const bool sc_report = config.placement == ScPlacement::Report || config.placement == ScPlacement::Both;
    const bool sc_prompt = config.placement == ScPlacement::Prompt || config.placement == ScPlacement::Both;
    const double tau = config.weights.tau;
    const losses::ContrastiveOptions copt{config.symmetric, config.mixed_denominator};

    auto img = m.encode_images(g, images);
    Var img_cls = m.image_cls(g, img);

    Var report_cls = m.encode_texts(g, report_ids);
    Var report_v1 = m.adapt(g, report_cls, Branch::Report, AdapterMode::training(num::derive_seed(step_seed, 1)));
    Var ic = losses::l_ic(img_cls, report_v1, tau, config.symmetric);

    std::vector<Var> sc_terms;
    if (sc_report) {
        Var v2 = m.adapt(g, report_cls, Branch::Report, AdapterMode::training(num::derive_seed(step_seed, 2)));
        sc_terms.push_back(losses::l_sc(report_v1, v2, tau, copt));
    }

    Var prompt_cls = m.encode_texts(g, prompt_ids);
    Var queries;
    if (sc_prompt) {
        queries = m.adapt(g, prompt_cls, Branch::Prompt, AdapterMode::training(num::derive_seed(step_seed, 3)));
        Var v2 = m.adapt(g, prompt_cls, Branch::Prompt, AdapterMode::training(num::derive_seed(step_seed, 4)));
        sc_terms.push_back(losses::l_sc(queries, v2, tau, copt));
    } else {
        queries = m.adapt(g, prompt_cls, Branch::Prompt, AdapterMode::eval());
    }
    Var probs = m.classify(g, m.kqm_attend(g, queries, img), images.size(), prompt_ids.size());
    Var cls = losses::l_cls(probs, labels);

    std::optional<Var> sc;
    if (sc_terms.size() == 1) sc = sc_terms[0];
    if (sc_terms.size() == 2) sc = ops::scale(ops::add(sc_terms[0], sc_terms[1]), 0.5);

    if (parts) {
        parts->cls = cls.value()(0, 0);
        parts->ic = ic.value()(0, 0);
        parts->sc = sc ? sc->value()(0, 0) : 0.0;
    }
    return losses::total_loss(g, cls, ic, sc, config.weights);
}

TrainResult train_model(const model::ModelConfig& model_config, const TrainConfig& config,
                        const std::vector<synth::SyntheticSample>& samples, const knowledge::KnowledgeBase& kb,
                        const knowledge::Resources& res, const ProgressFn& progress) {
    config.validate();
    if (samples.size() < 2) throw ValidationError("training needs at least 2 samples");

    std::vector<knowledge::StandardizedReport> reports;
    reports.reserve(samples.size());
    for (const auto& s : samples) reports.push_back(standardize_report(s.report, res));

    auto queries = query_vocabulary(reports, kb, config.top_m);
    model::Model m(model_config, build_tokenizer(reports, kb, res.schema), config.seed);

    const auto tier = config.enriched_prompts ? knowledge::PromptTier::Full : knowledge::PromptTier::NameOnly;
    std::vector<std::vector<std::size_t>> prompt_ids;
    for (const auto& q : queries) prompt_ids.push_back(m.tokenize(knowledge::enrich_prompt(q, kb, tier, res.schema).text));

    std::vector<std::string> serialized;
    std::vector<std::vector<std::size_t>> report_ids;
    for (const auto& r : reports) {
        serialized.push_back(r.serialize());
        report_ids.push_back(m.tokenize(serialized.back()));
    }

    const auto frozen_from_start = model_config.text_encoder_frozen;
    std::map<std::string, Tensor> velocity;
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    variantgen::VariantOptions vopt;
    vopt.protected_terms = {knowledge::kSepToken};
    vopt.synonyms = &res.synonyms;
    vopt.abbreviations = &res.abbreviations;
    const variantgen::VariantKind aug_kinds[] = {variantgen::VariantKind::Typo, variantgen::VariantKind::Omission,
                                                 variantgen::VariantKind::Punctuation, variantgen::VariantKind::Synonym};

    TrainResult result{std::move(m), queries, {}};
    model::Model& model = result.model;
    std::uint64_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        if (!frozen_from_start && config.freeze_text_after > 0 && epoch == config.freeze_text_after)
            model.set_text_encoder_frozen(true);
        num::Rng order_rng(num::derive_seed(config.seed, 0x6570000000ULL + epoch));
        order_rng.shuffle(order);
        EpochLog log{epoch + 1, 0, 0, 0, 0};
        std::size_t batches = 0;
        // drop a trailing batch of one: contrastive losses need negatives
        for (std::size_t start = 0; start + 1 < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const std::uint64_t step_seed = num::derive_seed(config.seed, 0x7374657000000000ULL + step++);
            std::vector<const Tensor*> images;
            std::vector<std::vector<std::size_t>> ids;
            std::vector<const knowledge::StandardizedReport*> batch_reports;
            num::Rng aug_rng(num::derive_seed(step_seed, 5));
            for (std::size_t i = start; i < end; ++i) {
                const std::size_t k = order[i];
                images.push_back(&samples[k].image);
                batch_reports.push_back(&reports[k]);
                if (config.text_augmentation && !serialized[k].empty() && aug_rng.uniform() < config.augmentation_rate) {
                    const auto kind = aug_kinds[aug_rng.below(4)];
                    const auto vseed = aug_rng.next_u64();
                    try {
                        auto v = variantgen::gen_variants(serialized[k], variantgen::default_family(kind), 1, vseed, vopt);
                        ids.push_back(model.tokenize(v.front().text));
                        continue;
                    } catch (const InapplicableError&) {
                    }
                }
                ids.push_back(report_ids[k]);
            }
            const auto labels = label_matrix(batch_reports, queries);

            Graph g;
            EpochLog parts;
            std::optional<Var> loss;
            try {
                loss = batch_objective(g, model, config, images, ids, prompt_ids, labels, step_seed, &parts);
            } catch (const DomainError& e) {
                // inputs were valid at the start, so this is overflow feeding NaN into a log or similar
                throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) + ": " + e.what());
            }
            const double lv = loss->value()(0, 0);
            if (!std::isfinite(lv))
                throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) + ": loss is " +
                                      std::to_string(lv));
            auto grads = g.backward(*loss);

            double scale = 1.0;
            if (config.grad_clip > 0) {
                double norm2 = 0;
                for (const auto& [name, gr] : grads.grads)
                    for (double v : gr.values()) norm2 += v * v;
                const double norm = std::sqrt(norm2);
                if (!std::isfinite(norm)) throw DivergenceError("training diverged: non-finite gradient");
                if (norm > config.grad_clip) scale = config.grad_clip / norm;
            }
            for (auto& p : model.params()) {
                if (!p->trainable) continue;
                const Tensor* gr = grads.find(p->name);
                if (!gr) continue;
                auto [it, fresh] = velocity.try_emplace(p->name, Tensor::zeros_like(p->value));
                auto vel = it->second.values();
                auto val = p->value.values();
                auto gv = gr->values();
                bool finite = true;
                for (std::size_t i = 0; i < val.size(); ++i) {
                    vel[i] = config.momentum * vel[i] + scale * gv[i];
                    val[i] -= config.learning_rate * vel[i];
                    finite &= std::isfinite(val[i]);
                }
                if (!finite)
                    throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) +
                                          ": parameter '" + p->name + "' is no longer finite");
            }
            log.loss += lv;
            log.cls += parts.cls;
            log.ic += parts.ic;
            log.sc += parts.sc;
            ++batches;
        }
        const double n = static_cast<double>(std::max<std::size_t>(1, batches));
        log.loss /= n;
        log.cls /= n;
        log.ic /= n;
        log.sc /= n;
        result.log.push_back(log);
        if (progress) progress(log);
    }
    return result;
}

} // namespace kepil::train
