#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kepil/knowledge/resources.hpp"

namespace kepil::variantgen {

enum class VariantKind { Typo, Omission, Punctuation, Synonym, Abbreviation, Reorder };

inline constexpr VariantKind kAllKinds[] = {VariantKind::Typo,    VariantKind::Omission,     VariantKind::Punctuation,
                                            VariantKind::Synonym, VariantKind::Abbreviation, VariantKind::Reorder};

const char* to_string(VariantKind k);
VariantKind parse_kind(const std::string& s);

struct VariantFamily {
    VariantKind kind;
    double intensity;  // (0, 1]

    friend bool operator==(const VariantFamily&, const VariantFamily&) = default;
};

// Typo 0.1, Omission 0.15, Punctuation 0.2; 1.0 for the substitution and
// reorder families (every match replaced / full shuffle).
double default_intensity(VariantKind k);
VariantFamily default_family(VariantKind k);

struct PromptVariant {
    std::string source;
    std::string text;
    VariantFamily family;
    std::uint64_t seed;
};

struct VariantOptions {
    // Phrases (usually the finding name) that Typo, Omission and Punctuation
    // must leave intact. Matched case-insensitively on word boundaries.
    std::vector<std::string> protected_terms;
    // Dictionaries for Synonym / Abbreviation; null means the shipped files.
    const knowledge::Dictionary* synonyms = nullptr;
    const knowledge::Dictionary* abbreviations = nullptr;
};

// n variants of prompt, variant i drawn from derive_seed(seed, i). Every
// variant differs from the source. Throws DomainError for an intensity
// outside (0, 1], n == 0 or an empty prompt, and InapplicableError when the
// family cannot change this prompt (no dictionary match, nothing editable,
// fewer than two feature phrases to reorder).
std::vector<PromptVariant> gen_variants(const std::string& prompt, const VariantFamily& family, std::size_t n,
                                        std::uint64_t seed, const VariantOptions& options = {});

// Levenshtein distance over bytes.
std::size_t edit_distance(const std::string& a, const std::string& b);

} // namespace kepil::variantgen
