#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace kepil::knowledge {

inline constexpr const char* kUnspecified = "unspecified";

// Fixed ordered set of descriptor keys plus key aliases.
class DescriptorSchema {
public:
    DescriptorSchema() = default;
    // key -> aliases; order of the list is the rendering order
    explicit DescriptorSchema(std::vector<std::pair<std::string, std::vector<std::string>>> keys);

    // Same file format as the lexicon: "key<TAB>alias<TAB>...".
    static DescriptorSchema load(const std::filesystem::path& path);

    const std::vector<std::string>& keys() const { return keys_; }
    std::optional<std::string> canonical_key(const std::string& key) const;
    std::size_t index_of(const std::string& canonical) const;  // LookupError if unknown

private:
    std::vector<std::string> keys_;
    std::map<std::string, std::string> lookup_;  // key or alias -> canonical key
};

struct Feature {
    std::string key;
    std::string value;

    friend bool operator==(const Feature&, const Feature&) = default;
};

struct KnowledgeEntry {
    std::string finding;
    std::string definition;
    std::vector<Feature> features;
    std::vector<std::string> sources;

    friend bool operator==(const KnowledgeEntry&, const KnowledgeEntry&) = default;
};

// Lowercase/trim every string, rewrite key aliases, fill missing schema keys
// with "unspecified", order features by schema and make the definition end in
// a period. Throws ValidationError for an empty finding or definition, for
// keys outside the schema (all of them are listed) and for keys given twice.
KnowledgeEntry normalize_entry(const KnowledgeEntry& raw, const DescriptorSchema& schema);

class KnowledgeBase {
public:
    void add(KnowledgeEntry entry);  // replaces an existing record with the same finding
    const KnowledgeEntry* find(const std::string& finding) const;
    const KnowledgeEntry& at(const std::string& finding) const;  // LookupError
    bool contains(const std::string& finding) const { return find(finding) != nullptr; }
    std::size_t size() const { return entries_.size(); }
    const std::map<std::string, KnowledgeEntry>& entries() const { return entries_; }

    // Records separated by blank lines:
    //   name: <finding>
    //   definition: <sentence>
    //   features:
    //     <key>: <value>
    //   sources: <a>; <b>
    static KnowledgeBase load(const std::filesystem::path& path);
    static KnowledgeBase parse(const std::string& text);
    std::string to_text() const;
    void save(const std::filesystem::path& path) const;

private:
    std::map<std::string, KnowledgeEntry> entries_;
};

enum class PromptTier { NameOnly, NamePlusDefinition, Full };

const char* to_string(PromptTier t);
PromptTier parse_tier(const std::string& s);

struct EnrichedPrompt {
    std::string finding;
    std::string text;
    PromptTier tier;
};

std::string presence_statement(const std::string& finding);

// Feature phrases "k: v" of an entry in schema order (unknown keys last, in
// their original order).
std::vector<std::string> feature_phrases(const KnowledgeEntry& entry, const DescriptorSchema& schema);

// NameOnly:            "<f> is present in the image."
// NamePlusDefinition:  NameOnly + " " + definition
// Full:                NamePlusDefinition + " Radiographic features: k1: v1; k2: v2."
// Throws LookupError when the finding has no record and the tier needs one.
EnrichedPrompt enrich_prompt(const std::string& finding, const KnowledgeBase& kb, PromptTier tier,
                             const DescriptorSchema& schema);

inline constexpr const char* kFeaturesLead = "Radiographic features:";

} // namespace kepil::knowledge
