#include "kepil/knowledge/kb.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "kepil/errors.hpp"
#include "kepil/knowledge/text.hpp"

namespace kepil::knowledge {

DescriptorSchema::DescriptorSchema(std::vector<std::pair<std::string, std::vector<std::string>>> keys) {
    for (auto& [key, aliases] : keys) {
        auto k = normalize_text(key);
        if (k.empty()) throw ValidationError("descriptor schema: empty key");
        if (lookup_.count(k)) throw ValidationError("descriptor schema: key '" + k + "' defined twice");
        keys_.push_back(k);
        lookup_[k] = k;
        for (auto& a : aliases) {
            auto n = normalize_text(a);
            if (n.empty()) continue;
            if (lookup_.count(n)) throw ValidationError("descriptor schema: alias '" + n + "' defined twice");
            lookup_[n] = k;
        }
    }
}

DescriptorSchema DescriptorSchema::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::pair<std::string, std::vector<std::string>>> keys;
    std::string line;
    while (std::getline(in, line)) {
        auto t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto fields = split(t, '\t');
        std::string key = trim(fields.front());
        fields.erase(fields.begin());
        keys.emplace_back(key, fields);
    }
    return DescriptorSchema(std::move(keys));
}

std::optional<std::string> DescriptorSchema::canonical_key(const std::string& key) const {
    auto it = lookup_.find(normalize_text(key));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
}

std::size_t DescriptorSchema::index_of(const std::string& canonical) const {
    auto it = std::find(keys_.begin(), keys_.end(), canonical);
    if (it == keys_.end()) throw LookupError("descriptor key not in schema: " + canonical);
    return static_cast<std::size_t>(it - keys_.begin());
}

KnowledgeEntry normalize_entry(const KnowledgeEntry& raw, const DescriptorSchema& schema) {
    KnowledgeEntry out;
    out.finding = normalize_text(raw.finding);
    if (out.finding.empty()) throw ValidationError("knowledge entry without a finding name");
    out.definition = normalize_text(raw.definition);
    if (out.definition.empty()) throw ValidationError("knowledge entry '" + out.finding + "' has an empty definition");
    if (out.definition.back() != '.') out.definition += '.';

    std::vector<std::string> unknown;
    std::map<std::string, std::string> values;
    for (const auto& f : raw.features) {
        auto key = schema.canonical_key(f.key);
        if (!key) {
            unknown.push_back(normalize_text(f.key));
            continue;
        }
        if (values.count(*key))
            throw ValidationError("knowledge entry '" + out.finding + "' gives feature '" + *key + "' twice");
        auto v = normalize_text(f.value);
        values[*key] = v.empty() ? kUnspecified : v;
    }
    if (!unknown.empty())
        throw ValidationError("knowledge entry '" + out.finding + "' has feature keys outside the schema: " +
                              join(unknown, ", "));
    for (const auto& key : schema.keys()) {
        auto it = values.find(key);
        out.features.push_back({key, it == values.end() ? std::string(kUnspecified) : it->second});
    }
    for (const auto& s : raw.sources) {
        auto n = normalize_text(s);
        if (!n.empty()) out.sources.push_back(n);
    }
    return out;
}

void KnowledgeBase::add(KnowledgeEntry entry) {
    if (entry.finding.empty()) throw ValidationError("knowledge base record without a name");
    auto name = entry.finding;
    entries_[name] = std::move(entry);
}

const KnowledgeEntry* KnowledgeBase::find(const std::string& finding) const {
    auto it = entries_.find(finding);
    return it == entries_.end() ? nullptr : &it->second;
}

const KnowledgeEntry& KnowledgeBase::at(const std::string& finding) const {
    const auto* e = find(finding);
    if (!e) throw LookupError("no knowledge base record for '" + finding + "'");
    return *e;
}

KnowledgeBase KnowledgeBase::parse(const std::string& text) {
    KnowledgeBase kb;
    std::istringstream in(text);
    std::string line;
    std::optional<KnowledgeEntry> cur;
    bool in_features = false;
    std::size_t lineno = 0;
    auto flush = [&]() {
        if (cur) kb.add(std::move(*cur));
        cur.reset();
        in_features = false;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto t = trim(line);
        if (t.empty()) {
            flush();
            continue;
        }
        if (t[0] == '#') continue;
        const bool indented = std::isspace(static_cast<unsigned char>(line[0]));
        auto colon = t.find(':');
        if (colon == std::string::npos)
            throw ValidationError("knowledge base line " + std::to_string(lineno) + ": expected 'key: value'");
        auto key = trim(t.substr(0, colon));
        auto value = trim(t.substr(colon + 1));
        if (indented && in_features) {
            cur->features.push_back({key, value});
            continue;
        }
        in_features = false;
        if (key == "name") {
            flush();
            cur = KnowledgeEntry{};
            cur->finding = value;
            continue;
        }
        if (!cur)
            throw ValidationError("knowledge base line " + std::to_string(lineno) + ": field before 'name'");
        if (key == "definition") {
            cur->definition = value;
        } else if (key == "features") {
            in_features = true;
        } else if (key == "sources") {
            for (auto& s : split(value, ';')) {
                auto n = trim(s);
                if (!n.empty()) cur->sources.push_back(n);
            }
        } else {
            throw ValidationError("knowledge base line " + std::to_string(lineno) + ": unknown field '" + key + "'");
        }
    }
    flush();
    return kb;
}

KnowledgeBase KnowledgeBase::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string KnowledgeBase::to_text() const {
    std::string out;
    bool first = true;
    for (const auto& [name, e] : entries_) {
        if (!first) out += '\n';
        first = false;
        out += "name: " + e.finding + "\n";
        out += "definition: " + e.definition + "\n";
        out += "features:\n";
        for (const auto& f : e.features) out += "  " + f.key + ": " + f.value + "\n";
        out += "sources: " + join(e.sources, "; ") + "\n";
    }
    return out;
}

void KnowledgeBase::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_text();
    if (!out) throw IoError("write failed: " + path.string());
}

const char* to_string(PromptTier t) {
    switch (t) {
        case PromptTier::NameOnly: return "name";
        case PromptTier::NamePlusDefinition: return "definition";
        case PromptTier::Full: return "full";
    }
    return "?";
}

PromptTier parse_tier(const std::string& s) {
    if (s == "name") return PromptTier::NameOnly;
    if (s == "definition") return PromptTier::NamePlusDefinition;
    if (s == "full") return PromptTier::Full;
    throw ValidationError("unknown prompt tier '" + s + "' (expected name, definition or full)");
}

std::string presence_statement(const std::string& finding) { return finding + " is present in the image."; }

std::vector<std::string> feature_phrases(const KnowledgeEntry& entry, const DescriptorSchema& schema) {
    std::vector<std::pair<std::size_t, std::string>> ordered;
    const std::size_t n = schema.keys().size();
    for (std::size_t i = 0; i < entry.features.size(); ++i) {
        const auto& f = entry.features[i];
        auto key = schema.canonical_key(f.key);
        std::size_t rank = key ? schema.index_of(*key) : n + i;
        ordered.emplace_back(rank, (key ? *key : f.key) + ": " + f.value);
    }
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::string> out;
    for (auto& p : ordered) out.push_back(std::move(p.second));
    return out;
}

EnrichedPrompt enrich_prompt(const std::string& finding, const KnowledgeBase& kb, PromptTier tier,
                             const DescriptorSchema& schema) {
    EnrichedPrompt p{finding, presence_statement(finding), tier};
    if (tier == PromptTier::NameOnly) return p;
    const auto& entry = kb.at(finding);
    p.text += " " + entry.definition;
    if (tier == PromptTier::NamePlusDefinition) return p;
    auto phrases = feature_phrases(entry, schema);
    if (!phrases.empty()) p.text += std::string(" ") + kFeaturesLead + " " + join(phrases, "; ") + ".";
    return p;
}

} // namespace kepil::knowledge
