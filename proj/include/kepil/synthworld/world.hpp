#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kepil/knowledge/kb.hpp"
#include "kepil/knowledge/resources.hpp"

namespace kepil::synth {

enum class Split { Seen, Unseen, Rare };
const char* to_string(Split s);
Split parse_split(const std::string& s);

struct Descriptor {
    std::string key;
    std::string value;

    friend bool operator==(const Descriptor&, const Descriptor&) = default;
};

struct FindingSpec {
    std::string name;
    std::vector<Descriptor> descriptors;  // in pool key order
    double prevalence = 0.0;
    Split split = Split::Seen;

    const std::string& value(const std::string& key) const;  // LookupError if missing

    friend bool operator==(const FindingSpec&, const FindingSpec&) = default;
};

// Descriptor keys and their values. The four locations are the lung zones;
// "right" is the patient's right, drawn on the left of the image.
struct DescriptorPool {
    std::vector<std::pair<std::string, std::vector<std::string>>> keys;

    static DescriptorPool standard();
    std::size_t combinations() const;
    bool contains(const Descriptor& d) const;

    friend bool operator==(const DescriptorPool&, const DescriptorPool&) = default;
};

struct WorldSpec {
    std::uint64_t seed = 0;
    DescriptorPool pool;
    std::vector<FindingSpec> findings;

    std::vector<std::size_t> indices(Split s) const;
    std::vector<std::string> names(Split s) const;
    const FindingSpec& finding(const std::string& name) const;  // LookupError
    std::size_t index_of(const std::string& name) const;        // LookupError

    std::string to_text() const;
    static WorldSpec parse(const std::string& text);  // ValidationError

    friend bool operator==(const WorldSpec&, const WorldSpec&) = default;
};

struct WorldOptions {
    double seen_prevalence_lo = 0.15;
    double seen_prevalence_hi = 0.35;
    double rare_prevalence = 0.02;
    double unseen_prevalence = 0.25;  // used only where unseen findings are allowed (evaluation splits)

    friend bool operator==(const WorldOptions&, const WorldOptions&) = default;
};

// Finding names come from the observation lexicon. Seen findings cover every
// descriptor value; unseen findings are new combinations of values used by
// seen findings; every pair of findings differs in at least one value.
// Throws DomainError when the request cannot be satisfied.
WorldSpec gen_world(std::uint64_t seed, std::size_t n_findings, std::size_t n_unseen, std::size_t n_rare,
                    const WorldOptions& options = {},
                    const knowledge::Lexicon& lexicon = knowledge::Resources::defaults().lexicon);

// One normalised knowledge-base record per finding describing its true
// descriptors.
knowledge::KnowledgeBase world_knowledge_base(const WorldSpec& world,
                                              const knowledge::DescriptorSchema& schema =
                                                  knowledge::Resources::defaults().schema);

} // namespace kepil::synth
