#include "kepil/synthworld/world.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "kepil/errors.hpp"
#include "kepil/knowledge/text.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/util/strings.hpp"

namespace kepil::synth {

const char* to_string(Split s) {
    switch (s) {
        case Split::Seen: return "seen";
        case Split::Unseen: return "unseen";
        case Split::Rare: return "rare";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "seen") return Split::Seen;
    if (s == "unseen") return Split::Unseen;
    if (s == "rare") return Split::Rare;
    throw ValidationError("unknown finding split '" + s + "'");
}

const std::string& FindingSpec::value(const std::string& key) const {
    for (const auto& d : descriptors)
        if (d.key == key) return d.value;
    throw LookupError("finding '" + name + "' has no descriptor '" + key + "'");
}

DescriptorPool DescriptorPool::standard() {
    return {{{"shape", {"blob", "streak", "ring"}},
             {"texture", {"smooth", "speckled"}},
             {"location", {"right upper zone", "left upper zone", "right lower zone", "left lower zone"}},
             {"contrast", {"faint", "strong"}}}};
}

std::size_t DescriptorPool::combinations() const {
    std::size_t n = 1;
    for (const auto& [k, vals] : keys) n *= vals.size();
    return n;
}

bool DescriptorPool::contains(const Descriptor& d) const {
    for (const auto& [k, vals] : keys)
        if (k == d.key) return std::find(vals.begin(), vals.end(), d.value) != vals.end();
    return false;
}

std::vector<std::size_t> WorldSpec::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < findings.size(); ++i)
        if (findings[i].split == s) out.push_back(i);
    return out;
}

std::vector<std::string> WorldSpec::names(Split s) const {
    std::vector<std::string> out;
    for (auto i : indices(s)) out.push_back(findings[i].name);
    return out;
}

std::size_t WorldSpec::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < findings.size(); ++i)
        if (findings[i].name == name) return i;
    throw LookupError("world has no finding '" + name + "'");
}

const FindingSpec& WorldSpec::finding(const std::string& name) const { return findings[index_of(name)]; }

std::string WorldSpec::to_text() const {
    std::ostringstream out;
    out << "kepil-world 1\n";
    out << "seed " << seed << "\n";
    for (const auto& [k, vals] : pool.keys) out << "key\t" << k << "\t" << knowledge::join(vals, "\t") << "\n";
    for (const auto& f : findings) {
        out << "finding\t" << f.name << "\t" << to_string(f.split) << "\t" << util::format_double(f.prevalence);
        for (const auto& d : f.descriptors) out << "\t" << d.key << "=" << d.value;
        out << "\n";
    }
    return out.str();
}

WorldSpec WorldSpec::parse(const std::string& text) {
    WorldSpec w;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) {
        throw ValidationError("world spec line " + std::to_string(lineno) + ": " + why);
    };
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (!header) {
            if (line != "kepil-world 1") fail("expected header 'kepil-world 1'");
            header = true;
            continue;
        }
        auto f = knowledge::split(line, '\t');
        if (f[0].rfind("seed ", 0) == 0) {
            w.seed = util::parse_u64("seed", f[0].substr(5));
        } else if (f[0] == "key") {
            if (f.size() < 3) fail("key needs at least one value");
            w.pool.keys.emplace_back(f[1], std::vector<std::string>(f.begin() + 2, f.end()));
        } else if (f[0] == "finding") {
            if (f.size() < 5) fail("finding needs name, split, prevalence and descriptors");
            FindingSpec spec;
            spec.name = f[1];
            spec.split = parse_split(f[2]);
            spec.prevalence = util::parse_double("prevalence", f[3]);
            for (std::size_t i = 4; i < f.size(); ++i) {
                auto eq = f[i].find('=');
                if (eq == std::string::npos) fail("descriptor without '='");
                spec.descriptors.push_back({f[i].substr(0, eq), f[i].substr(eq + 1)});
            }
            w.findings.push_back(std::move(spec));
        } else {
            fail("unknown record '" + f[0] + "'");
        }
    }
    if (!header) throw ValidationError("world spec: empty");
    return w;
}

namespace {

using Combo = std::vector<std::size_t>;  // value index per pool key

std::vector<Combo> all_combos(const DescriptorPool& pool) {
    std::vector<Combo> out{{}};
    for (const auto& [k, vals] : pool.keys) {
        std::vector<Combo> next;
        for (const auto& c : out)
            for (std::size_t v = 0; v < vals.size(); ++v) {
                auto cc = c;
                cc.push_back(v);
                next.push_back(std::move(cc));
            }
        out = std::move(next);
    }
    return out;
}

bool covers_all_values(const std::vector<Combo>& seen, const DescriptorPool& pool) {
    for (std::size_t k = 0; k < pool.keys.size(); ++k)
        for (std::size_t v = 0; v < pool.keys[k].second.size(); ++v) {
            bool used = false;
            for (const auto& c : seen) used |= c[k] == v;
            if (!used) return false;
        }
    return true;
}

} // namespace

WorldSpec gen_world(std::uint64_t seed, std::size_t n_findings, std::size_t n_unseen, std::size_t n_rare,
                    const WorldOptions& options, const knowledge::Lexicon& lexicon) {
    if (n_unseen + n_rare >= n_findings)
        throw DomainError("gen_world: n_unseen + n_rare must be smaller than n_findings");
    if (!(options.rare_prevalence > 0 && options.rare_prevalence <= 0.02))
        throw DomainError("gen_world: rare prevalence must lie in (0, 0.02]");
    if (!(options.seen_prevalence_lo > 0 && options.seen_prevalence_lo <= options.seen_prevalence_hi &&
          options.seen_prevalence_hi < 1))
        throw DomainError("gen_world: seen prevalence range must lie inside (0, 1)");
    if (!(options.unseen_prevalence > 0 && options.unseen_prevalence < 1))
        throw DomainError("gen_world: unseen prevalence must lie in (0, 1)");

    WorldSpec w;
    w.seed = seed;
    w.pool = DescriptorPool::standard();
    const std::size_t n_seen = n_findings - n_unseen - n_rare;

    std::vector<std::string> names;
    for (const auto& e : lexicon.entries())
        if (e.label == knowledge::EntityLabel::Obs) names.push_back(e.canonical);
    if (names.size() < n_findings)
        throw DomainError("gen_world: lexicon has only " + std::to_string(names.size()) + " observation names, " +
                          std::to_string(n_findings) + " requested");
    const auto combos = all_combos(w.pool);
    if (combos.size() < n_findings)
        throw DomainError("gen_world: descriptor pool has " + std::to_string(combos.size()) +
                          " combinations, too few for " + std::to_string(n_findings) + " distinct findings");

    num::Rng rng(num::derive_seed(seed, 0x776f726c64ULL));
    rng.shuffle(names);

    // Seen findings: distinct combinations covering every value when possible.
    std::size_t min_values = 0;
    for (const auto& [k, vals] : w.pool.keys) min_values = std::max(min_values, vals.size());
    const bool want_cover = n_seen >= min_values;
    std::vector<Combo> seen;
    std::vector<Combo> shuffled = combos;
    for (int attempt = 0;; ++attempt) {
        if (attempt == 1000)
            throw DomainError("gen_world: cannot pick seen findings covering every descriptor value");
        rng.shuffle(shuffled);
        seen.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_seen));
        if (!want_cover || covers_all_values(seen, w.pool)) break;
    }
    std::set<Combo> used(seen.begin(), seen.end());

    // Unseen: fresh combinations whose every value appears in some seen finding.
    std::vector<Combo> candidates;
    for (const auto& c : shuffled) {
        if (used.count(c)) continue;
        bool composed = true;
        for (std::size_t k = 0; k < c.size(); ++k) {
            bool found = false;
            for (const auto& s : seen) found |= s[k] == c[k];
            composed &= found;
        }
        if (composed) candidates.push_back(c);
    }
    if (candidates.size() < n_unseen) throw DomainError("gen_world: not enough fresh combinations for unseen findings");
    std::vector<Combo> unseen(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n_unseen));
    used.insert(unseen.begin(), unseen.end());

    std::vector<Combo> rare;
    for (const auto& c : shuffled) {
        if (rare.size() == n_rare) break;
        if (!used.count(c)) rare.push_back(c);
    }
    if (rare.size() < n_rare) throw DomainError("gen_world: not enough combinations for rare findings");

    auto make = [&](const Combo& c, Split split, double prevalence) {
        FindingSpec f;
        f.name = names[w.findings.size()];
        f.split = split;
        f.prevalence = prevalence;
        for (std::size_t k = 0; k < c.size(); ++k) f.descriptors.push_back({w.pool.keys[k].first, w.pool.keys[k].second[c[k]]});
        w.findings.push_back(std::move(f));
    };
    for (const auto& c : seen) {
        // prevalence on a 0.01 grid so the text form is exact
        const auto steps = static_cast<std::size_t>(
            std::llround((options.seen_prevalence_hi - options.seen_prevalence_lo) * 100.0));
        const double prev = options.seen_prevalence_lo + static_cast<double>(rng.below(steps + 1)) / 100.0;
        make(c, Split::Seen, prev);
    }
    for (const auto& c : unseen) make(c, Split::Unseen, options.unseen_prevalence);
    for (const auto& c : rare) make(c, Split::Rare, options.rare_prevalence);
    return w;
}

namespace {

std::string shape_definition(const std::string& shape) {
    if (shape == "blob") return "a rounded focal radiographic abnormality";
    if (shape == "streak") return "an elongated linear radiographic abnormality";
    if (shape == "ring") return "a radiographic abnormality with a circular outline and hollow centre";
    return "a focal radiographic abnormality";
}

} // namespace

knowledge::KnowledgeBase world_knowledge_base(const WorldSpec& world, const knowledge::DescriptorSchema& schema) {
    knowledge::KnowledgeBase kb;
    for (const auto& f : world.findings) {
        knowledge::KnowledgeEntry raw;
        raw.finding = f.name;
        std::string shape;
        for (const auto& d : f.descriptors) {
            raw.features.push_back({d.key, d.value});
            if (d.key == "shape") shape = d.value;
        }
        raw.definition = shape_definition(shape);
        raw.sources = {"synthetic world " + std::to_string(world.seed)};
        kb.add(knowledge::normalize_entry(raw, schema));
    }
    return kb;
}

} // namespace kepil::synth
