#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kepil/knowledge/report.hpp"
#include "kepil/numerics/tensor.hpp"
#include "kepil/synthworld/world.hpp"

namespace kepil::synth {

enum class Style : std::uint8_t { Primary = 0, Shifted = 1 };
const char* to_string(Style s);
Style parse_style(const std::string& s);

struct RenderOptions {
    std::size_t height = 32;
    std::size_t width = 32;
    double background = 0.1;
    double noise_sd = 0.05;
    double faint = 0.3;
    double strong = 0.7;
    int jitter = 2;                  // pixels of random displacement of each drawing
    // Shifted style: blend with the inverted image (x -> (1-s) x + s (1-x))
    // followed by horizontal bands.
    double inversion_strength = 0.3;
    double band_amplitude = 0.08;
    std::size_t band_period = 4;

    friend bool operator==(const RenderOptions&, const RenderOptions&) = default;
};

// Per-finding presence, parallel to world.findings; 1 = positive.
using LabelVector = std::vector<std::uint8_t>;

num::Tensor render_image(const LabelVector& labels, const WorldSpec& world, std::uint64_t seed, Style style = Style::Primary,
                         const RenderOptions& options = {});

// Pixel rectangle [r0, r1) x [c0, c1) of a location value.
struct Region {
    std::size_t r0, r1, c0, c1;
};
Region location_region(const std::string& location, std::size_t height, std::size_t width);

// Solvability oracle: does the region of `location` hold a strong-contrast
// drawing? Counts pixels exceeding the region median by 0.85 of the strong
// amplitude (scaled by the inversion blend for the shifted style).
bool strong_finding_oracle(const num::Tensor& image, const std::string& location, Style style,
                           const RenderOptions& options = {});

struct ReportOptions {
    double negative_mention_rate = 0.3;
    double uncertainty_fraction = 0.1;
    double synonym_rate = 0.3;
    bool mention_unseen = true;  // false: unseen findings are never named, not even negated

    friend bool operator==(const ReportOptions&, const ReportOptions&) = default;
};

struct WrittenReport {
    knowledge::RawReport report;
    // (canonical entity, status) in text order, as extract_entities should find them
    std::vector<std::pair<std::string, knowledge::Status>> intended;
};

WrittenReport write_report(const LabelVector& labels, const WorldSpec& world, const ReportOptions& options,
                           std::uint64_t seed, const knowledge::Resources& res = knowledge::Resources::defaults());

inline constexpr const char* kNoFindingsSentence = "no acute findings.";

struct SyntheticSample {
    num::Tensor image;
    knowledge::RawReport report;
    LabelVector labels;
    Style style = Style::Primary;

    friend bool operator==(const SyntheticSample& a, const SyntheticSample& b) {
        return a.image == b.image && a.report.text == b.report.text && a.report.report_id == b.report.report_id &&
               a.labels == b.labels && a.style == b.style;
    }
};

struct DatasetOptions {
    bool include_unseen = true;  // false: unseen findings never occur or get mentioned (training data)
    RenderOptions render;
    ReportOptions report;
    std::string id_prefix = "s";
};

// Sample i uses seed derive_seed(seed, i) for its labels, image and report.
std::vector<SyntheticSample> gen_dataset(const WorldSpec& world, std::size_t n, Style style, std::uint64_t seed,
                                         const DatasetOptions& options = {});

// Binary sample file: versioned header then one record per sample, all
// integers and doubles little-endian.
std::string encode_samples(const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> decode_samples(const std::string& bytes);
void save_samples(const std::filesystem::path& path, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> load_samples(const std::filesystem::path& path);

// A dataset directory: manifest.txt, world.txt, kb.txt and <split>.bin files.
struct DatasetBundle {
    WorldSpec world;
    knowledge::KnowledgeBase kb;
    std::map<std::string, std::vector<SyntheticSample>> splits;

    const std::vector<SyntheticSample>& split(const std::string& name) const;  // LookupError
};

// File name -> bytes of a dataset directory, manifest.txt included.
std::map<std::string, std::string> dataset_files(const DatasetBundle& bundle);
// Returns the file name -> checksum map of what was written.
std::map<std::string, std::string> write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle);
DatasetBundle read_dataset(const std::filesystem::path& dir);  // verifies manifest checksums

} // namespace kepil::synth
