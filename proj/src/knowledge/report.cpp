#include "kepil/knowledge/report.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>

#include "kepil/errors.hpp"
#include "kepil/knowledge/text.hpp"

namespace kepil::knowledge {

const char* to_string(EntityLabel l) { return l == EntityLabel::Anat ? "ANAT" : "OBS"; }

const char* to_string(Status s) {
    switch (s) {
        case Status::Present: return "present";
        case Status::Absent: return "absent";
        case Status::Uncertain: return "uncertain";
    }
    return "?";
}

Status parse_status(const std::string& s) {
    if (s == "present") return Status::Present;
    if (s == "absent") return Status::Absent;
    if (s == "uncertain") return Status::Uncertain;
    throw ValidationError("unknown status token: " + s);
}

namespace {

std::string surface_key(std::string_view phrase) {
    std::vector<std::string> words;
    for (const auto& t : tokenize(normalize_text(phrase))) words.push_back(t.text);
    return join(words, " ");
}

std::size_t count_tokens(const std::string& key) { return split_whitespace(key).size(); }

std::vector<std::vector<std::string>> read_tab_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::vector<std::string> fields;
        for (auto& f : split(line, '\t')) {
            auto n = trim(f);
            if (!n.empty()) fields.push_back(n);
        }
        rows.push_back(std::move(fields));
    }
    return rows;
}

} // namespace

void Lexicon::add(std::string canonical, EntityLabel label, std::vector<std::string> synonyms) {
    canonical = surface_key(canonical);
    if (canonical.empty()) throw ValidationError("lexicon entry with empty name");
    if (by_name_.count(canonical)) throw ValidationError("duplicate lexicon entry: " + canonical);
    const std::size_t idx = entries_.size();
    std::vector<std::string> syn;
    std::vector<std::string> all{canonical};
    for (auto& s : synonyms) {
        auto k = surface_key(s);
        if (!k.empty() && k != canonical) {
            syn.push_back(k);
            all.push_back(k);
        }
    }
    for (const auto& s : all) {
        if (surfaces_.count(s)) throw ValidationError("surface form '" + s + "' appears twice in the lexicon");
    }
    for (const auto& s : all) {
        surfaces_[s] = idx;
        max_tokens_ = std::max(max_tokens_, count_tokens(s));
    }
    by_name_[canonical] = idx;
    entries_.push_back(Entry{canonical, label, std::move(syn)});
}

void Lexicon::load(const std::filesystem::path& path, EntityLabel label) {
    for (auto& fields : read_tab_lines(path)) {
        std::string canonical = fields.front();
        fields.erase(fields.begin());
        add(std::move(canonical), label, std::move(fields));
    }
}

const Lexicon::Entry* Lexicon::find(const std::string& canonical) const {
    auto it = by_name_.find(canonical);
    return it == by_name_.end() ? nullptr : &entries_[it->second];
}

CueLists CueLists::load(const std::filesystem::path& negation_file,
                        const std::filesystem::path& uncertainty_file) {
    CueLists cues;
    for (auto& f : read_tab_lines(negation_file)) {
        for (auto& s : f) s = surface_key(s);
        cues.negation.push_back(std::move(f));
    }
    for (auto& f : read_tab_lines(uncertainty_file)) {
        for (auto& s : f) s = surface_key(s);
        cues.uncertainty.push_back(std::move(f));
    }
    return cues;
}

namespace {

struct CueMatch {
    std::size_t first_token;
    std::size_t last_token;
    Status status;
};

struct Match {
    std::size_t first_token;
    std::size_t token_count;
    std::size_t entry;
};

int priority(Status s) {
    switch (s) {
        case Status::Uncertain: return 2;
        case Status::Absent: return 1;
        case Status::Present: return 0;
    }
    return 0;
}

} // namespace

std::vector<EntityMention> extract_entities(const RawReport& report, const Lexicon& lexicon,
                                            const CueLists& cues, const ExtractOptions& options) {
    if (lexicon.empty()) throw ValidationError("extract_entities: lexicon is empty");
    const std::string text = normalize_text(report.text);
    if (text.empty()) throw ValidationError("extract_entities: report '" + report.report_id + "' is empty");

    const auto tokens = tokenize(text);
    std::map<std::string, Status> cue_surfaces;
    std::size_t max_cue = 0;
    for (const auto& group : cues.negation)
        for (const auto& s : group) {
            cue_surfaces.emplace(s, Status::Absent);
            max_cue = std::max(max_cue, count_tokens(s));
        }
    for (const auto& group : cues.uncertainty)
        for (const auto& s : group) {
            cue_surfaces[s] = Status::Uncertain;  // a phrase listed in both reads as uncertain
            max_cue = std::max(max_cue, count_tokens(s));
        }

    // Sentence index per token; punctuation that ends a sentence starts the next one.
    std::vector<std::size_t> sentence(tokens.size());
    std::size_t current = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        sentence[i] = current;
        if (tokens[i].punct && is_sentence_end(tokens[i].text[0])) ++current;
    }

    auto phrase_at = [&](std::size_t i, std::size_t n) -> std::optional<std::string> {
        if (i + n > tokens.size()) return std::nullopt;
        std::string s;
        for (std::size_t k = 0; k < n; ++k) {
            if (tokens[i + k].punct) return std::nullopt;
            if (k) s += ' ';
            s += tokens[i + k].text;
        }
        return s;
    };

    std::vector<Match> matches;
    std::vector<CueMatch> cue_matches;
    const std::size_t longest = std::max(lexicon.max_surface_tokens(), max_cue);
    std::size_t i = 0;
    while (i < tokens.size()) {
        std::size_t best_len = 0;
        std::optional<std::size_t> entity;
        std::optional<Status> cue;
        for (std::size_t n = std::min(longest, tokens.size() - i); n >= 1; --n) {
            auto phrase = phrase_at(i, n);
            if (!phrase) continue;
            if (auto it = lexicon.surfaces().find(*phrase); it != lexicon.surfaces().end()) {
                best_len = n;
                entity = it->second;
                break;
            }
            if (auto it = cue_surfaces.find(*phrase); it != cue_surfaces.end()) {
                best_len = n;
                cue = it->second;
                break;
            }
        }
        if (entity) {
            matches.push_back({i, best_len, *entity});
            i += best_len;
        } else if (cue) {
            cue_matches.push_back({i, i + best_len - 1, *cue});
            i += best_len;
        } else {
            ++i;
        }
    }

    std::vector<EntityMention> out;
    out.reserve(matches.size());
    for (std::size_t m = 0; m < matches.size(); ++m) {
        const auto& match = matches[m];
        const auto& entry = lexicon.entries()[match.entry];
        Status status = Status::Present;
        if (entry.label == EntityLabel::Obs) {
            // Cues are consumed by the nearest observation that follows them.
            std::size_t floor_token = 0;
            for (std::size_t p = m; p-- > 0;) {
                if (lexicon.entries()[matches[p].entry].label == EntityLabel::Obs) {
                    floor_token = matches[p].first_token + matches[p].token_count;
                    break;
                }
            }
            std::optional<CueMatch> best;
            for (const auto& c : cue_matches) {
                if (c.last_token >= match.first_token) continue;
                if (c.first_token < floor_token) continue;
                if (sentence[c.first_token] != sentence[match.first_token]) continue;
                if (match.first_token - c.last_token > options.cue_window) continue;
                if (!best || c.last_token > best->last_token ||
                    (c.last_token == best->last_token && priority(c.status) > priority(best->status)))
                    best = c;
            }
            if (best) status = best->status;
        }
        const auto& first = tokens[match.first_token];
        const auto& last = tokens[match.first_token + match.token_count - 1];
        out.push_back(EntityMention{text.substr(first.begin, last.end - first.begin), entry.canonical,
                                    entry.label, status, first.begin, last.end});
    }
    return out;
}

std::string StandardizedReport::serialize() const {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += std::string(" ") + kSepToken + " ";
        out += items[i].entity;
        out += ' ';
        out += to_string(items[i].status);
    }
    return out;
}

StandardizedReport StandardizedReport::parse(const std::string& serialization, const Lexicon& lexicon) {
    StandardizedReport r;
    auto words = split_whitespace(serialization);
    std::vector<std::string> current;
    auto flush = [&]() {
        if (current.size() < 2) throw ValidationError("malformed standardized report: '" + serialization + "'");
        Status s = parse_status(current.back());
        current.pop_back();
        std::string entity = join(current, " ");
        const auto* entry = lexicon.find(entity);
        if (!entry) throw LookupError("entity not in lexicon: " + entity);
        r.items.push_back({entity, entry->label, s});
        current.clear();
    };
    for (const auto& w : words) {
        if (w == kSepToken) {
            flush();
        } else {
            current.push_back(w);
        }
    }
    if (!current.empty()) flush();
    return r;
}

StandardizedReport standardize(const std::vector<EntityMention>& mentions) {
    StandardizedReport r;
    std::set<std::pair<std::string, Status>> seen;
    for (const auto& m : mentions) {
        if (seen.insert({m.entity, m.status}).second) r.items.push_back({m.entity, m.label, m.status});
    }
    return r;
}

EntityVocabulary build_vocabulary(const std::vector<StandardizedReport>& corpus, std::size_t m) {
    if (m == 0) throw DomainError("build_vocabulary: m must be positive");
    if (corpus.empty()) throw ValidationError("build_vocabulary: corpus is empty");
    std::map<std::string, std::size_t> counts;
    for (const auto& r : corpus)
        for (const auto& item : r.items) ++counts[item.entity];
    std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (sorted.size() > m) sorted.resize(m);
    EntityVocabulary v;
    for (auto& [name, count] : sorted) {
        v.entries.push_back(name);
        v.counts.push_back(count);
    }
    return v;
}

} // namespace kepil::knowledge
