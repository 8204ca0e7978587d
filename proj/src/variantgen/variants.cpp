#include "kepil/variantgen/variants.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>

#include "kepil/errors.hpp"
#include "kepil/knowledge/kb.hpp"
#include "kepil/knowledge/text.hpp"
#include "kepil/numerics/random.hpp"

namespace kepil::variantgen {

using num::Rng;

const char* to_string(VariantKind k) {
    switch (k) {
        case VariantKind::Typo: return "typo";
        case VariantKind::Omission: return "omission";
        case VariantKind::Punctuation: return "punctuation";
        case VariantKind::Synonym: return "synonym";
        case VariantKind::Abbreviation: return "abbreviation";
        case VariantKind::Reorder: return "reorder";
    }
    return "?";
}

VariantKind parse_kind(const std::string& s) {
    for (auto k : kAllKinds)
        if (s == to_string(k)) return k;
    throw ValidationError("unknown variant family '" + s + "'");
}

double default_intensity(VariantKind k) {
    switch (k) {
        case VariantKind::Typo: return 0.1;
        case VariantKind::Omission: return 0.15;
        case VariantKind::Punctuation: return 0.2;
        default: return 1.0;
    }
}

VariantFamily default_family(VariantKind k) { return {k, default_intensity(k)}; }

namespace {

constexpr std::size_t kCoinScale = std::size_t{1} << 20;
constexpr int kAttempts = 64;
constexpr char kMarks[] = {'.', ',', ';', ':'};

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

// Integer-only coin so that the stream consumed does not depend on float details.
bool coin(Rng& rng, double p) {
    const auto threshold = static_cast<std::size_t>(std::llround(p * static_cast<double>(kCoinScale)));
    return rng.below(kCoinScale) < threshold;
}

std::size_t ceil_frac(double intensity, std::size_t count) {
    return static_cast<std::size_t>(std::ceil(intensity * static_cast<double>(count) - 1e-12));
}

// Text as words separated by the original whitespace runs.
struct Layout {
    std::vector<std::string> gaps;  // gaps.size() == words.size() + 1
    std::vector<std::string> words;
    std::vector<std::size_t> begins;  // byte offset of each word in the source
    std::vector<int> occurrence;      // protected-phrase id per word, -1 if free

    std::string render() const {
        std::string out = gaps[0];
        for (std::size_t i = 0; i < words.size(); ++i) out += words[i] + gaps[i + 1];
        return out;
    }

    void erase(std::size_t i) {
        words.erase(words.begin() + static_cast<std::ptrdiff_t>(i));
        occurrence.erase(occurrence.begin() + static_cast<std::ptrdiff_t>(i));
        begins.erase(begins.begin() + static_cast<std::ptrdiff_t>(i));
        gaps.erase(gaps.begin() + static_cast<std::ptrdiff_t>(i == 0 ? 1 : i));
    }
};

Layout layout(const std::string& text, const std::vector<std::string>& protected_terms) {
    Layout l;
    std::size_t i = 0;
    std::string gap;
    while (i < text.size()) {
        if (std::isspace(static_cast<unsigned char>(text[i]))) {
            gap += text[i++];
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        l.gaps.push_back(gap);
        gap.clear();
        l.words.push_back(text.substr(i, j - i));
        l.begins.push_back(i);
        i = j;
    }
    l.gaps.push_back(gap);
    l.occurrence.assign(l.words.size(), -1);

    const std::string low = lower(text);
    int id = 0;
    for (const auto& term : protected_terms) {
        const std::string t = knowledge::normalize_text(term);
        if (t.empty()) continue;
        for (std::size_t pos = low.find(t); pos != std::string::npos; pos = low.find(t, pos + 1)) {
            const std::size_t end = pos + t.size();
            if (pos > 0 && is_word_char(low[pos - 1])) continue;
            if (end < low.size() && is_word_char(low[end])) continue;
            for (std::size_t w = 0; w < l.words.size(); ++w) {
                const std::size_t wb = l.begins[w], we = wb + l.words[w].size();
                if (wb < end && pos < we) l.occurrence[w] = id;
            }
            ++id;
        }
    }
    return l;
}

// Bounds of the part of a word that is neither leading nor trailing punctuation.
std::pair<std::size_t, std::size_t> core(const std::string& w) {
    std::size_t b = 0, e = w.size();
    while (b < e && !is_word_char(w[b])) ++b;
    while (e > b && !is_word_char(w[e - 1])) --e;
    return {b, e};
}

char random_letter(Rng& rng) { return static_cast<char>('a' + rng.below(26)); }

void typo_word(std::string& word, double intensity, Rng& rng) {
    auto [b, e] = core(word);
    std::string w = word.substr(b, e - b);
    std::size_t budget = std::max<std::size_t>(1, ceil_frac(intensity, w.size()));
    enum Op { Substitute, Delete, Insert, Transpose };
    while (budget > 0) {
        std::vector<Op> ops{Insert};
        if (w.size() >= 2) {
            ops.push_back(Substitute);
            ops.push_back(Delete);
        }
        if (w.size() >= 3 && budget >= 2) ops.push_back(Transpose);
        switch (ops[rng.below(ops.size())]) {
            case Insert: {
                const std::size_t pos = 1 + rng.below(w.size());
                w.insert(w.begin() + static_cast<std::ptrdiff_t>(pos), random_letter(rng));
                budget -= 1;
                break;
            }
            case Substitute: {
                const std::size_t pos = 1 + rng.below(w.size() - 1);
                char c = static_cast<char>('a' + rng.below(25));
                if (c >= w[pos]) ++c;  // never the same letter
                w[pos] = c;
                budget -= 1;
                break;
            }
            case Delete: {
                const std::size_t pos = 1 + rng.below(w.size() - 1);
                w.erase(w.begin() + static_cast<std::ptrdiff_t>(pos));
                budget -= 1;
                break;
            }
            case Transpose: {
                const std::size_t pos = 1 + rng.below(w.size() - 2);
                std::swap(w[pos], w[pos + 1]);
                budget -= 2;
                break;
            }
        }
    }
    word = word.substr(0, b) + w + word.substr(e);
}

std::optional<std::string> typo(const std::string& prompt, double intensity, Rng& rng,
                                const std::vector<std::string>& protect) {
    Layout l = layout(prompt, protect);
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < l.words.size(); ++i) {
        auto [b, e] = core(l.words[i]);
        if (l.occurrence[i] < 0 && e > b) eligible.push_back(i);
    }
    if (eligible.empty()) return std::nullopt;
    std::vector<std::size_t> chosen;
    for (auto i : eligible)
        if (coin(rng, intensity)) chosen.push_back(i);
    if (chosen.empty()) chosen.push_back(eligible[rng.below(eligible.size())]);
    for (auto i : chosen) typo_word(l.words[i], intensity, rng);
    return l.render();
}

std::optional<std::string> omission(const std::string& prompt, double intensity, Rng& rng,
                                    const std::vector<std::string>& protect) {
    Layout l = layout(prompt, protect);
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < l.words.size(); ++i)
        if (l.occurrence[i] < 0) eligible.push_back(i);
    std::size_t k = std::max<std::size_t>(1, ceil_frac(intensity, l.words.size()));
    k = std::min(k, eligible.size());
    if (eligible.size() == l.words.size()) k = std::min(k, l.words.size() - 1);  // keep one word
    if (k == 0) return std::nullopt;
    rng.shuffle(eligible);
    eligible.resize(k);
    std::sort(eligible.rbegin(), eligible.rend());
    for (auto i : eligible) l.erase(i);
    return l.render();
}

bool is_mark(char c) { return std::find(std::begin(kMarks), std::end(kMarks), c) != std::end(kMarks); }

std::optional<std::string> punctuation(const std::string& prompt, double intensity, Rng& rng,
                                       const std::vector<std::string>& protect) {
    Layout l = layout(prompt, protect);
    // a mark may follow the last word of a protected phrase but not split it
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < l.words.size(); ++i) {
        const bool inside = l.occurrence[i] >= 0 && i + 1 < l.words.size() && l.occurrence[i + 1] == l.occurrence[i];
        if (!inside) eligible.push_back(i);
    }
    if (eligible.empty()) return std::nullopt;
    const std::size_t k = std::max<std::size_t>(1, ceil_frac(intensity, l.words.size()));
    for (std::size_t op = 0; op < k; ++op) {
        std::string& w = l.words[eligible[rng.below(eligible.size())]];
        if (!w.empty() && is_mark(w.back())) {
            if (rng.below(2) == 0) {
                w.pop_back();
            } else {
                std::vector<char> others;
                for (char m : kMarks)
                    if (m != w.back()) others.push_back(m);
                const char c = others[rng.below(others.size())];
                w.back() = c;
            }
        } else {
            w.push_back(kMarks[rng.below(4)]);
        }
    }
    return l.render();
}

struct Match {
    std::size_t begin;
    std::size_t end;
    const std::vector<std::string>* replacements;
};

std::vector<Match> dictionary_matches(const std::string& prompt,
                                      const std::vector<std::pair<std::string, std::vector<std::string>>>& terms) {
    const std::string low = lower(prompt);
    std::vector<Match> out;
    std::size_t i = 0;
    while (i < low.size()) {
        if (i > 0 && is_word_char(low[i - 1])) {
            ++i;
            continue;
        }
        bool hit = false;
        for (const auto& [term, reps] : terms) {  // longest first
            if (low.compare(i, term.size(), term) != 0) continue;
            const std::size_t end = i + term.size();
            if (end < low.size() && is_word_char(low[end])) continue;
            out.push_back({i, end, &reps});
            i = end;
            hit = true;
            break;
        }
        if (!hit) ++i;
    }
    return out;
}

std::optional<std::string> substitute(const std::string& prompt, const VariantFamily& family, Rng& rng,
                                      const knowledge::Dictionary& dict) {
    std::map<std::string, std::vector<std::string>> grouped;
    for (const auto& [term, rep] : dict) grouped[lower(knowledge::trim(term))].push_back(rep);
    std::vector<std::pair<std::string, std::vector<std::string>>> terms(grouped.begin(), grouped.end());
    std::stable_sort(terms.begin(), terms.end(),
                     [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
    auto matches = dictionary_matches(prompt, terms);
    if (matches.empty())
        throw InapplicableError(std::string(to_string(family.kind)) + " variants: no dictionary term occurs in '" +
                                prompt + "'");
    std::vector<std::size_t> chosen;
    for (std::size_t i = 0; i < matches.size(); ++i)
        if (coin(rng, family.intensity)) chosen.push_back(i);
    if (chosen.empty()) chosen.push_back(rng.below(matches.size()));
    std::string out;
    std::size_t at = 0;
    for (auto i : chosen) {
        const auto& m = matches[i];
        std::string rep = (*m.replacements)[rng.below(m.replacements->size())];
        if (std::isupper(static_cast<unsigned char>(prompt[m.begin])) && !rep.empty())
            rep[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(rep[0])));
        out += prompt.substr(at, m.begin - at) + rep;
        at = m.end;
    }
    out += prompt.substr(at);
    return out;
}

std::optional<std::string> reorder(const std::string& prompt, Rng& rng) {
    const std::string lead = lower(knowledge::kFeaturesLead);
    const auto pos = lower(prompt).find(lead);
    if (pos == std::string::npos)
        throw InapplicableError("reorder variants need a prompt with a feature list");
    std::string body = knowledge::trim(prompt.substr(pos + lead.size()));
    if (!body.empty() && body.back() == '.') body.pop_back();
    std::vector<std::string> phrases;
    for (auto& p : knowledge::split(body, ';')) {
        auto t = knowledge::trim(p);
        if (!t.empty()) phrases.push_back(t);
    }
    bool distinct = false;
    for (std::size_t i = 1; i < phrases.size(); ++i) distinct |= phrases[i] != phrases[0];
    if (!distinct) throw InapplicableError("reorder variants need at least two different feature phrases");
    rng.shuffle(phrases);
    return prompt.substr(0, pos + lead.size()) + " " + knowledge::join(phrases, "; ") + ".";
}

} // namespace

std::vector<PromptVariant> gen_variants(const std::string& prompt, const VariantFamily& family, std::size_t n,
                                        std::uint64_t seed, const VariantOptions& options) {
    if (!(family.intensity > 0.0 && family.intensity <= 1.0))
        throw DomainError("variant intensity must lie in (0, 1], got " + std::to_string(family.intensity));
    if (n == 0) throw DomainError("gen_variants: n must be at least 1");
    if (knowledge::trim(prompt).empty()) throw DomainError("gen_variants: empty prompt");

    const auto& res = knowledge::Resources::defaults;
    std::vector<PromptVariant> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t base = num::derive_seed(seed, i);
        bool done = false;
        for (int attempt = 0; attempt < kAttempts && !done; ++attempt) {
            const std::uint64_t s = attempt == 0 ? base : num::derive_seed(base, static_cast<std::uint64_t>(attempt));
            Rng rng(s);
            std::optional<std::string> text;
            switch (family.kind) {
                case VariantKind::Typo: text = typo(prompt, family.intensity, rng, options.protected_terms); break;
                case VariantKind::Omission:
                    text = omission(prompt, family.intensity, rng, options.protected_terms);
                    break;
                case VariantKind::Punctuation:
                    text = punctuation(prompt, family.intensity, rng, options.protected_terms);
                    break;
                case VariantKind::Synonym:
                    text = substitute(prompt, family, rng, options.synonyms ? *options.synonyms : res().synonyms);
                    break;
                case VariantKind::Abbreviation:
                    text = substitute(prompt, family, rng,
                                      options.abbreviations ? *options.abbreviations : res().abbreviations);
                    break;
                case VariantKind::Reorder: text = reorder(prompt, rng); break;
            }
            if (!text)
                throw InapplicableError(std::string(to_string(family.kind)) + " variants: nothing editable in '" +
                                        prompt + "'");
            if (*text != prompt) {
                out.push_back({prompt, *text, family, s});
                done = true;
            }
        }
        if (!done)
            throw InapplicableError(std::string(to_string(family.kind)) + " variants: could not produce a change of '" +
                                    prompt + "'");
    }
    return out;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

} // namespace kepil::variantgen
