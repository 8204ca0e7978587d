#include "kepil/knowledge/resources.hpp"

#include <cstdlib>
#include <fstream>

#include "kepil/errors.hpp"
#include "kepil/knowledge/text.hpp"

namespace kepil::knowledge {

Dictionary load_dictionary(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    Dictionary d;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto fields = split(t, '\t');
        if (fields.size() != 2 || trim(fields[0]).empty() || trim(fields[1]).empty())
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected 'term<TAB>replacement'");
        d.emplace_back(trim(fields[0]), trim(fields[1]));
    }
    return d;
}

Resources Resources::load(const std::filesystem::path& dir) {
    Resources r;
    r.lexicon.load(dir / "observations.lex", EntityLabel::Obs);
    r.lexicon.load(dir / "anatomy.lex", EntityLabel::Anat);
    r.cues = CueLists::load(dir / "negation.cues", dir / "uncertainty.cues");
    r.schema = DescriptorSchema::load(dir / "descriptor_schema.txt");
    r.synonyms = load_dictionary(dir / "synonyms.dict");
    r.abbreviations = load_dictionary(dir / "abbreviations.dict");
    return r;
}

std::filesystem::path Resources::default_dir() {
    if (const char* env = std::getenv("KEPIL_DATA_DIR"); env && *env) return env;
#ifdef KEPIL_DATA_DIR
    return KEPIL_DATA_DIR;
#else
    return "data";
#endif
}

const Resources& Resources::defaults() {
    static const Resources r = load(default_dir());
    return r;
}

} // namespace kepil::knowledge
