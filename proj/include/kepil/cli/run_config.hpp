#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kepil/knowledge/kb.hpp"
#include "kepil/model/model.hpp"
#include "kepil/synthworld/dataset.hpp"
#include "kepil/synthworld/world.hpp"
#include "kepil/train/trainer.hpp"
#include "kepil/variantgen/variants.hpp"

namespace kepil::cli {

// Sectioned key/value text:
//   # comment
//   [section]
//   key = value
// Sections and keys keep file order; a repeated key is an error.
struct KvSection {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;

    const std::string* find(const std::string& key) const;
};

struct KvFile {
    std::vector<KvSection> sections;

    static KvFile parse(const std::string& text);  // ValidationError with the line number
    std::string to_text() const;
    const KvSection* find(const std::string& name) const;
    KvSection& section(const std::string& name);  // created when missing
};

struct WorldParams {
    std::size_t n_findings = 12;
    std::size_t n_unseen = 2;
    std::size_t n_rare = 2;
    synth::WorldOptions options;

    friend bool operator==(const WorldParams&, const WorldParams&) = default;
};

struct DataParams {
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    std::size_t n_shifted = 500;
    synth::RenderOptions render;
    synth::ReportOptions report;

    friend bool operator==(const DataParams&, const DataParams&) = default;
};

struct EvalParams {
    knowledge::PromptTier tier = knowledge::PromptTier::Full;
    std::size_t n_variants = 5;
    std::vector<variantgen::VariantKind> families{variantgen::VariantKind::Typo, variantgen::VariantKind::Omission,
                                                  variantgen::VariantKind::Punctuation,
                                                  variantgen::VariantKind::Synonym};

    friend bool operator==(const EvalParams&, const EvalParams&) = default;
};

// Everything a run needs. All randomness comes from the three seeds.
struct RunConfig {
    std::uint64_t world_seed = 1;
    std::uint64_t data_seed = 1;
    std::uint64_t train_seed = 1;
    WorldParams world;
    DataParams data;
    model::ModelConfig model;
    train::TrainConfig train;  // train.seed mirrors train_seed
    EvalParams eval;

    void validate() const;  // ValidationError naming section.key

    // Every field is written, defaults included.
    KvFile to_kv() const;
    std::string to_text() const;
    // Applies the entries of kv over the defaults; unknown keys are errors.
    static RunConfig from_kv(const KvFile& kv);
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Parses "name", "def"/"definition" or "full".
knowledge::PromptTier parse_cli_tier(const std::string& s);
std::vector<variantgen::VariantKind> parse_families(const std::string& list);  // comma separated
std::string families_to_string(const std::vector<variantgen::VariantKind>& families);

// World, knowledge base and the train / test / shifted splits of a config.
synth::DatasetBundle build_dataset(const RunConfig& config);

} // namespace kepil::cli
