#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "kepil/knowledge/kb.hpp"
#include "kepil/knowledge/report.hpp"

namespace kepil::knowledge {

// term -> replacement, in file order
using Dictionary = std::vector<std::pair<std::string, std::string>>;

Dictionary load_dictionary(const std::filesystem::path& path);

// Everything the text side reads from the data directory.
struct Resources {
    Lexicon lexicon;  // observations (OBS) followed by anatomy (ANAT)
    CueLists cues;
    DescriptorSchema schema;
    Dictionary synonyms;
    Dictionary abbreviations;

    static Resources load(const std::filesystem::path& dir);
    // The data directory compiled into the library, overridable with KEPIL_DATA_DIR.
    static std::filesystem::path default_dir();
    static const Resources& defaults();  // loaded once from default_dir()
};

} // namespace kepil::knowledge
