#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace kepil::knowledge {

enum class EntityLabel { Anat, Obs };
enum class Status { Present, Absent, Uncertain };

const char* to_string(EntityLabel l);
const char* to_string(Status s);  // "present" / "absent" / "uncertain"
Status parse_status(const std::string& s);

// Canonical entity names with their surface forms. Surfaces are normalised
// and must be unique across the whole lexicon, which keeps longest-match
// extraction independent of entry order.
class Lexicon {
public:
    struct Entry {
        std::string canonical;
        EntityLabel label;
        std::vector<std::string> synonyms;  // surfaces other than the canonical
    };

    void add(std::string canonical, EntityLabel label, std::vector<std::string> synonyms = {});
    // Reads "canonical<TAB>synonym<TAB>..." lines; blank lines and '#' ignored.
    void load(const std::filesystem::path& path, EntityLabel label);

    const std::vector<Entry>& entries() const { return entries_; }
    const Entry* find(const std::string& canonical) const;
    bool empty() const { return entries_.empty(); }

    // surface (as token sequence joined by ' ') -> entry index
    const std::map<std::string, std::size_t>& surfaces() const { return surfaces_; }
    std::size_t max_surface_tokens() const { return max_tokens_; }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> by_name_;
    std::map<std::string, std::size_t> surfaces_;
    std::size_t max_tokens_ = 0;
};

// Negation and uncertainty cue phrases. Same file format as the lexicon:
// each line is one cue group (first phrase is the canonical form).
struct CueLists {
    std::vector<std::vector<std::string>> negation;
    std::vector<std::vector<std::string>> uncertainty;

    static CueLists load(const std::filesystem::path& negation_file,
                         const std::filesystem::path& uncertainty_file);
};

struct RawReport {
    std::string text;
    std::string report_id;
};

struct EntityMention {
    std::string surface;
    std::string entity;  // canonical name
    EntityLabel label;
    Status status;
    std::size_t span_begin = 0;  // character offsets into normalize_text(report.text)
    std::size_t span_end = 0;

    friend bool operator==(const EntityMention&, const EntityMention&) = default;
};

struct ExtractOptions {
    std::size_t cue_window = 5;  // tokens preceding the match that a cue may end in
};

// Rule-based extraction: longest lexicon match at each token position, status
// from the closest cue inside the window that precedes the mention within the
// same sentence. A cue only reaches the nearest following observation;
// anatomy mentions are always Present. Throws ValidationError when the text
// is empty after normalisation or the lexicon is empty.
std::vector<EntityMention> extract_entities(const RawReport& report, const Lexicon& lexicon,
                                            const CueLists& cues, const ExtractOptions& options = {});

struct ReportItem {
    std::string entity;
    EntityLabel label;
    Status status;

    friend bool operator==(const ReportItem&, const ReportItem&) = default;
};

struct StandardizedReport {
    std::vector<ReportItem> items;

    // "e1 s1 [SEP] e2 s2 ..."; empty string for no items.
    std::string serialize() const;
    // Inverse of serialize(); labels come from the lexicon.
    static StandardizedReport parse(const std::string& serialization, const Lexicon& lexicon);

    friend bool operator==(const StandardizedReport&, const StandardizedReport&) = default;
};

inline constexpr const char* kSepToken = "[SEP]";

// Keeps the first occurrence of each (entity, status) pair, in order.
StandardizedReport standardize(const std::vector<EntityMention>& mentions);

struct EntityVocabulary {
    std::vector<std::string> entries;
    std::vector<std::size_t> counts;  // parallel to entries
};

// Top-m entities by occurrence count over the corpus (every status counts),
// ties broken lexicographically. Throws DomainError for m == 0 and
// ValidationError for an empty corpus.
EntityVocabulary build_vocabulary(const std::vector<StandardizedReport>& corpus, std::size_t m);

} // namespace kepil::knowledge
