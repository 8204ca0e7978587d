#include "kepil/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "kepil/errors.hpp"
#include "kepil/numerics/random.hpp"

namespace kepil::eval {

using num::Tensor;

namespace {

void check_binary(std::span<const double> scores, std::span<const std::uint8_t> labels, const char* what) {
    if (scores.size() != labels.size())
        throw ShapeError(std::string(what) + ": " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
    std::size_t pos = 0;
    for (auto l : labels) {
        if (l > 1) throw DomainError(std::string(what) + ": labels must be 0 or 1");
        pos += l;
    }
    if (pos == 0 || pos == labels.size())
        throw DomainError(std::string(what) + ": undefined with a single class present");
}

} // namespace

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_binary(scores, labels, "auc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // twice the rank sum of positives, kept in integers (average ranks of tied
    // runs are half-integers)
    std::uint64_t twice_rank_sum = 0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const std::uint64_t twice_avg_rank = (i + 1) + j;  // ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k)
            if (labels[idx[k]]) {
                twice_rank_sum += twice_avg_rank;
                ++pos;
            }
        i = j;
    }
    const std::uint64_t neg = n - pos;
    // 2U = 2R - pos (pos + 1)
    const std::uint64_t twice_u = twice_rank_sum - pos * (pos + 1);
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

double auc_pairs(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_binary(scores, labels, "auc");
    std::uint64_t twice_wins = 0, pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) twice_wins += 2;
            else if (scores[i] == scores[j]) twice_wins += 1;
        }
    }
    return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pairs));
}

double BinaryCounts::f1() const {
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

double BinaryCounts::accuracy() const {
    const std::size_t n = tp + fp + tn + fn;
    return n == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(n);
}

BinaryCounts confusion(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold) {
    if (scores.size() != labels.size()) throw ShapeError("confusion: scores and labels differ in length");
    BinaryCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        if (labels[i]) (pred ? c.tp : c.fn)++;
        else (pred ? c.fp : c.tn)++;
    }
    return c;
}

ThresholdChoice best_f1_threshold(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_binary(scores, labels, "best_f1_threshold");
    std::vector<double> cand(scores.begin(), scores.end());
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    // sweep thresholds upwards, counting predictions >= threshold
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::size_t total_pos = 0;
    for (auto l : labels) total_pos += l;
    BinaryCounts c{total_pos, scores.size() - total_pos, 0, 0};  // threshold below every score
    ThresholdChoice best{cand.front(), c.f1()};
    std::size_t k = 0;
    for (std::size_t t = 1; t < cand.size(); ++t) {
        while (k < idx.size() && scores[idx[k]] < cand[t]) {
            if (labels[idx[k]]) {
                --c.tp;
                ++c.fn;
            } else {
                --c.fp;
                ++c.tn;
            }
            ++k;
        }
        if (c.f1() > best.f1) best = {cand[t], c.f1()};
    }
    return best;
}

Tensor score_with_queries(model::Model& m, const std::vector<synth::SyntheticSample>& samples, const Tensor& queries,
                          std::size_t batch) {
    if (samples.empty()) throw ShapeError("score: no samples");
    if (batch == 0) batch = 1;
    Tensor out({samples.size(), queries.rows()});
    for (std::size_t start = 0; start < samples.size(); start += batch) {
        const std::size_t end = std::min(samples.size(), start + batch);
        std::vector<const Tensor*> imgs;
        for (std::size_t i = start; i < end; ++i) imgs.push_back(&samples[i].image);
        Tensor s = m.score(imgs, queries);
        for (std::size_t i = start; i < end; ++i)
            std::copy(s.row(i - start).begin(), s.row(i - start).end(), out.row(i).begin());
    }
    return out;
}

Tensor score_samples(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                     const std::vector<std::string>& prompt_texts, std::size_t batch) {
    return score_with_queries(m, samples, m.prompt_queries(prompt_texts), batch);
}

std::vector<double> zero_shot_infer(model::Model& m, const Tensor& image,
                                    const std::vector<knowledge::EnrichedPrompt>& prompts) {
    if (prompts.empty()) throw ShapeError("zero_shot_infer: no prompts");
    std::vector<std::string> texts;
    for (const auto& p : prompts) texts.push_back(p.text);
    Tensor s = m.score({&image}, m.prompt_queries(texts));
    return {s.values().begin(), s.values().end()};
}

std::vector<std::uint8_t> finding_labels(const std::vector<synth::SyntheticSample>& samples,
                                         const synth::WorldSpec& world, const std::string& finding) {
    const std::size_t f = world.index_of(finding);
    std::vector<std::uint8_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        if (s.labels.size() != world.findings.size())
            throw ShapeError("sample label vector does not match the world");
        out.push_back(s.labels[f]);
    }
    return out;
}

namespace {

std::vector<double> column(const Tensor& t, std::size_t c) {
    std::vector<double> out(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) out[r] = t(r, c);
    return out;
}

bool both_classes(const std::vector<std::uint8_t>& labels) {
    std::size_t pos = 0;
    for (auto l : labels) pos += l;
    return pos > 0 && pos < labels.size();
}

std::vector<std::string> prompt_texts(const std::vector<std::string>& findings, const knowledge::KnowledgeBase& kb,
                                      knowledge::PromptTier tier, const knowledge::DescriptorSchema& schema) {
    std::vector<std::string> out;
    for (const auto& f : findings) out.push_back(knowledge::enrich_prompt(f, kb, tier, schema).text);
    return out;
}

} // namespace

ZeroShotResult evaluate_zero_shot(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                                  const synth::WorldSpec& world, const std::vector<std::string>& findings,
                                  const knowledge::KnowledgeBase& kb, const EvalOptions& options,
                                  const knowledge::DescriptorSchema& schema) {
    if (findings.empty()) throw ShapeError("evaluate: no findings");
    ZeroShotResult r;
    r.findings = findings;
    const auto texts = prompt_texts(findings, kb, options.tier, schema);
    const Tensor queries = m.prompt_queries(texts);
    r.scores = score_with_queries(m, samples, queries);
    Tensor val_scores;
    if (options.validation) val_scores = score_with_queries(m, *options.validation, queries);
    for (std::size_t s = 0; s < findings.size(); ++s) {
        FindingMetrics fm;
        fm.finding = findings[s];
        const auto labels = finding_labels(samples, world, findings[s]);
        for (auto l : labels) (l ? fm.positives : fm.negatives)++;
        fm.defined = fm.positives > 0 && fm.negatives > 0;
        if (fm.defined) {
            const auto scores = column(r.scores, s);
            fm.auc = auc(scores, labels);
            const auto c = confusion(scores, labels, 0.5);
            fm.f1 = c.f1();
            fm.accuracy = c.accuracy();
            ThresholdChoice t{0.5, 0.0};
            if (options.validation) {
                const auto vl = finding_labels(*options.validation, world, findings[s]);
                if (both_classes(vl)) t = best_f1_threshold(column(val_scores, s), vl);
            } else {
                t = best_f1_threshold(scores, labels);
            }
            fm.best_threshold = t.threshold;
            fm.f1_best = confusion(scores, labels, t.threshold).f1();
            r.macro_auc += fm.auc;
            r.macro_f1 += fm.f1;
            r.macro_accuracy += fm.accuracy;
            r.macro_f1_best += fm.f1_best;
            ++r.defined;
        }
        r.metrics.push_back(fm);
    }
    if (r.defined == 0) throw DomainError("evaluate: no finding has both classes in this split");
    const double n = static_cast<double>(r.defined);
    r.macro_auc /= n;
    r.macro_f1 /= n;
    r.macro_accuracy /= n;
    r.macro_f1_best /= n;
    return r;
}

std::vector<TierResult> prompt_tier_eval(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                                         const synth::WorldSpec& world, const std::vector<std::string>& findings,
                                         const knowledge::KnowledgeBase& kb,
                                         const std::vector<knowledge::PromptTier>& tiers,
                                         const knowledge::DescriptorSchema& schema) {
    for (const auto& f : findings)
        if (!kb.contains(f)) throw LookupError("prompt_tier_eval: no knowledge-base record for '" + f + "'");
    std::vector<TierResult> out;
    for (auto t : tiers) {
        EvalOptions o;
        o.tier = t;
        out.push_back({t, evaluate_zero_shot(m, samples, world, findings, kb, o, schema).macro_auc});
    }
    return out;
}

DispersionStats dispersion(const std::vector<Tensor>& groups) {
    if (groups.size() < 2) throw DomainError("dispersion: needs at least two groups");
    std::vector<Tensor> unit;
    std::size_t d = 0;
    bool any_pair = false;
    for (const auto& g : groups) {
        if (g.rank() != 2 || g.rows() == 0) throw ShapeError("dispersion: empty group");
        if (d == 0) d = g.cols();
        if (g.cols() != d) throw ShapeError("dispersion: groups differ in width");
        any_pair |= g.rows() >= 2;
        Tensor u = g;
        for (std::size_t r = 0; r < u.rows(); ++r) {
            auto row = u.row(r);
            double n = 0;
            for (double v : row) n += v * v;
            n = std::sqrt(n);
            if (n > 0)
                for (double& v : row) v /= n;
        }
        unit.push_back(std::move(u));
    }
    if (!any_pair) throw DomainError("dispersion: no group has two embeddings");
    auto dot = [d](std::span<const double> a, std::span<const double> b) {
        double s = 0;
        for (std::size_t i = 0; i < d; ++i) s += a[i] * b[i];
        return s;
    };
    double intra = 0, inter = 0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t a = 0; a < unit.size(); ++a) {
        for (std::size_t i = 0; i < unit[a].rows(); ++i)
            for (std::size_t j = i + 1; j < unit[a].rows(); ++j) {
                intra += dot(unit[a].row(i), unit[a].row(j));
                ++n_intra;
            }
        for (std::size_t b = a + 1; b < unit.size(); ++b)
            for (std::size_t i = 0; i < unit[a].rows(); ++i)
                for (std::size_t j = 0; j < unit[b].rows(); ++j) {
                    inter += dot(unit[a].row(i), unit[b].row(j));
                    ++n_inter;
                }
    }
    DispersionStats s;
    s.intra = intra / static_cast<double>(n_intra);
    s.inter = inter / static_cast<double>(n_inter);
    s.separation = s.intra - s.inter;
    return s;
}

RobustnessReport robustness_eval(model::Model& m, const std::vector<synth::SyntheticSample>& samples,
                                 const synth::WorldSpec& world, const std::vector<std::string>& findings,
                                 const knowledge::KnowledgeBase& kb,
                                 const std::vector<variantgen::VariantKind>& families, std::size_t n_variants,
                                 std::uint64_t seed, const RobustnessOptions& options,
                                 const knowledge::Resources& res) {
    if (findings.empty()) throw ShapeError("robustness: no findings");
    if (families.empty()) throw ShapeError("robustness: no variant families");
    if (n_variants == 0) throw DomainError("robustness: n_variants must be at least 1");
    RobustnessReport rep;
    rep.findings = findings;
    std::vector<std::vector<std::uint8_t>> labels;
    for (const auto& f : findings) {
        labels.push_back(finding_labels(samples, world, f));
        if (!both_classes(labels.back()))
            throw DomainError("robustness: finding '" + f + "' does not have both classes in the samples");
    }
    const auto canonical = prompt_texts(findings, kb, options.tier, res.schema);
    const Tensor canon_scores = score_samples(m, samples, canonical);
    for (std::size_t f = 0; f < findings.size(); ++f) rep.canonical_auc.push_back(auc(column(canon_scores, f), labels[f]));

    std::vector<std::vector<std::vector<double>>> pooled(findings.size());  // finding -> embeddings
    std::size_t family_index = 0;
    double delta_sum = 0;
    std::size_t delta_count = 0;
    for (auto kind : families) {
        FamilyReport fr;
        fr.kind = kind;
        std::vector<std::string> texts;
        std::vector<std::size_t> owner;
        for (std::size_t f = 0; f < findings.size(); ++f) {
            variantgen::VariantOptions vo;
            if (options.protect_names) vo.protected_terms = {findings[f]};
            vo.synonyms = &res.synonyms;
            vo.abbreviations = &res.abbreviations;
            VariantScore vs;
            vs.finding = findings[f];
            vs.canonical_auc = rep.canonical_auc[f];
            try {
                const auto vars = variantgen::gen_variants(canonical[f], variantgen::default_family(kind), n_variants,
                                                           num::derive_seed(seed, family_index * 1000003ULL + f), vo);
                for (const auto& v : vars) {
                    texts.push_back(v.text);
                    owner.push_back(f);
                }
                vs.n_variants = vars.size();
            } catch (const InapplicableError&) {
                vs.skipped = true;
            }
            fr.findings.push_back(vs);
        }
        if (!texts.empty()) {
            const Tensor q = m.prompt_queries(texts);
            const Tensor s = score_with_queries(m, samples, q);
            std::vector<Tensor> groups;
            std::vector<std::vector<std::size_t>> rows_of(findings.size());
            for (std::size_t i = 0; i < texts.size(); ++i) rows_of[owner[i]].push_back(i);
            for (std::size_t f = 0; f < findings.size(); ++f) {
                auto& vs = fr.findings[f];
                if (vs.skipped) continue;
                double sum = 0;
                Tensor g({rows_of[f].size(), q.cols()});
                for (std::size_t k = 0; k < rows_of[f].size(); ++k) {
                    const std::size_t i = rows_of[f][k];
                    sum += auc(column(s, i), labels[f]);
                    std::copy(q.row(i).begin(), q.row(i).end(), g.row(k).begin());
                    pooled[f].emplace_back(q.row(i).begin(), q.row(i).end());
                }
                vs.variant_auc = sum / static_cast<double>(rows_of[f].size());
                vs.delta = vs.variant_auc - vs.canonical_auc;
                groups.push_back(std::move(g));
            }
            fr.any_applied = true;
            double total = 0;
            std::size_t n = 0;
            for (const auto& vs : fr.findings)
                if (!vs.skipped) {
                    total += vs.delta;
                    ++n;
                }
            fr.mean_delta = total / static_cast<double>(n);
            delta_sum += fr.mean_delta;
            ++delta_count;
            bool pair = false;
            for (const auto& g : groups) pair |= g.rows() >= 2;
            if (groups.size() >= 2 && pair) fr.dispersion = dispersion(groups);
        }
        for (const auto& vs : fr.findings)
            fr.delta_series.push_back(vs.skipped ? std::numeric_limits<double>::quiet_NaN() : vs.delta);
        rep.families.push_back(std::move(fr));
        ++family_index;
    }
    rep.mean_delta = delta_count ? delta_sum / static_cast<double>(delta_count) : 0.0;
    std::vector<Tensor> groups;
    for (const auto& emb : pooled) {
        if (emb.empty()) continue;
        Tensor g({emb.size(), emb.front().size()});
        for (std::size_t k = 0; k < emb.size(); ++k) std::copy(emb[k].begin(), emb[k].end(), g.row(k).begin());
        groups.push_back(std::move(g));
    }
    bool pair = false;
    for (const auto& g : groups) pair |= g.rows() >= 2;
    if (groups.size() >= 2 && pair) rep.dispersion = dispersion(groups);
    return rep;
}

} // namespace kepil::eval
