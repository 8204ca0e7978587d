#include "kepil/cli/run_config.hpp"

#include <sstream>

#include "kepil/errors.hpp"
#include "kepil/knowledge/resources.hpp"
#include "kepil/knowledge/text.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/util/binary_io.hpp"
#include "kepil/util/strings.hpp"

namespace kepil::cli {

using util::format_double;

const std::string* KvSection::find(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return &v;
    return nullptr;
}

KvFile KvFile::parse(const std::string& text) {
    KvFile f;
    std::istringstream in(text);
    std::string raw;
    std::size_t lineno = 0;
    KvSection* current = nullptr;
    auto fail = [&](const std::string& why) {
        throw ValidationError("config line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = knowledge::trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail("unterminated section header");
            const std::string name = knowledge::trim(line.substr(1, line.size() - 2));
            if (name.empty()) fail("empty section name");
            if (f.find(name)) fail("section [" + name + "] appears twice");
            f.sections.push_back({name, {}});
            current = &f.sections.back();
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail("expected 'key = value'");
        if (!current) fail("entry before any [section]");
        const std::string key = knowledge::trim(line.substr(0, eq));
        const std::string value = knowledge::trim(line.substr(eq + 1));
        if (key.empty()) fail("empty key");
        if (current->find(key)) fail("key '" + key + "' repeated in [" + current->name + "]");
        current->entries.emplace_back(key, value);
    }
    return f;
}

std::string KvFile::to_text() const {
    std::ostringstream out;
    bool first = true;
    for (const auto& s : sections) {
        if (!first) out << "\n";
        first = false;
        out << "[" << s.name << "]\n";
        for (const auto& [k, v] : s.entries) out << k << " = " << v << "\n";
    }
    return out.str();
}

const KvSection* KvFile::find(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

KvSection& KvFile::section(const std::string& name) {
    for (auto& s : sections)
        if (s.name == name) return s;
    sections.push_back({name, {}});
    return sections.back();
}

knowledge::PromptTier parse_cli_tier(const std::string& s) {
    if (s == "def") return knowledge::PromptTier::NamePlusDefinition;
    return knowledge::parse_tier(s);
}

std::vector<variantgen::VariantKind> parse_families(const std::string& list) {
    std::vector<variantgen::VariantKind> out;
    for (const auto& part : knowledge::split(list, ',')) {
        const auto name = knowledge::trim(part);
        if (name.empty()) continue;
        out.push_back(variantgen::parse_kind(name));
    }
    if (out.empty()) throw ValidationError("variant family list is empty");
    return out;
}

std::string families_to_string(const std::vector<variantgen::VariantKind>& families) {
    std::vector<std::string> names;
    for (auto k : families) names.push_back(variantgen::to_string(k));
    return knowledge::join(names, ",");
}

void RunConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw ValidationError(field + ": " + why); };
    if (world.n_findings == 0) fail("world.n_findings", "must be at least 1");
    if (world.n_unseen + world.n_rare >= world.n_findings)
        fail("world.n_unseen", "n_unseen + n_rare must be smaller than n_findings");
    const auto& wo = world.options;
    if (!(wo.seen_prevalence_lo > 0 && wo.seen_prevalence_lo <= wo.seen_prevalence_hi && wo.seen_prevalence_hi < 1))
        fail("world.seen_prevalence_lo", "need 0 < lo <= hi < 1");
    if (!(wo.rare_prevalence > 0 && wo.rare_prevalence <= 0.02)) fail("world.rare_prevalence", "must lie in (0, 0.02]");
    if (!(wo.unseen_prevalence > 0 && wo.unseen_prevalence < 1)) fail("world.unseen_prevalence", "must lie in (0, 1)");
    if (data.n_train < 2) fail("data.n_train", "must be at least 2");
    if (data.n_test == 0) fail("data.n_test", "must be at least 1");
    if (data.n_shifted == 0) fail("data.n_shifted", "must be at least 1");
    const auto& r = data.render;
    if (r.height != model.image_height) fail("data.height", "must equal model.image_height");
    if (r.width != model.image_width) fail("data.width", "must equal model.image_width");
    if (r.height < 2 || r.width < 2) fail("data.height", "images must be at least 2x2");
    if (!(r.noise_sd >= 0)) fail("data.noise_sd", "must be nonnegative");
    if (!(r.inversion_strength >= 0 && r.inversion_strength < 0.5))
        fail("data.inversion_strength", "must lie in [0, 0.5)");
    if (r.jitter < 0) fail("data.jitter", "must be nonnegative");
    auto prob = [&](const char* field, double v) {
        if (!(v >= 0 && v <= 1)) fail(std::string("data.") + field, "must lie in [0, 1]");
    };
    prob("negative_mention_rate", data.report.negative_mention_rate);
    prob("uncertainty_fraction", data.report.uncertainty_fraction);
    prob("synonym_rate", data.report.synonym_rate);
    {
        auto m = model;
        m.text_vocab_size = std::max<std::size_t>(m.text_vocab_size, 4);
        m.validate();
    }
    train.validate();
    if (train.seed != train_seed) fail("train.seed", "must equal seeds.train");
    if (eval.n_variants == 0) fail("eval.n_variants", "must be at least 1");
    if (eval.families.empty()) fail("eval.families", "must name at least one family");
}

KvFile RunConfig::to_kv() const {
    KvFile f;
    auto& seeds = f.section("seeds");
    seeds.entries = {{"world", std::to_string(world_seed)},
                     {"data", std::to_string(data_seed)},
                     {"train", std::to_string(train_seed)}};
    auto& w = f.section("world");
    w.entries = {{"n_findings", std::to_string(world.n_findings)},
                 {"n_unseen", std::to_string(world.n_unseen)},
                 {"n_rare", std::to_string(world.n_rare)},
                 {"seen_prevalence_lo", format_double(world.options.seen_prevalence_lo)},
                 {"seen_prevalence_hi", format_double(world.options.seen_prevalence_hi)},
                 {"rare_prevalence", format_double(world.options.rare_prevalence)},
                 {"unseen_prevalence", format_double(world.options.unseen_prevalence)}};
    auto& d = f.section("data");
    const auto& r = data.render;
    d.entries = {{"n_train", std::to_string(data.n_train)},
                 {"n_test", std::to_string(data.n_test)},
                 {"n_shifted", std::to_string(data.n_shifted)},
                 {"height", std::to_string(r.height)},
                 {"width", std::to_string(r.width)},
                 {"background", format_double(r.background)},
                 {"noise_sd", format_double(r.noise_sd)},
                 {"faint", format_double(r.faint)},
                 {"strong", format_double(r.strong)},
                 {"jitter", std::to_string(r.jitter)},
                 {"inversion_strength", format_double(r.inversion_strength)},
                 {"band_amplitude", format_double(r.band_amplitude)},
                 {"band_period", std::to_string(r.band_period)},
                 {"negative_mention_rate", format_double(data.report.negative_mention_rate)},
                 {"uncertainty_fraction", format_double(data.report.uncertainty_fraction)},
                 {"synonym_rate", format_double(data.report.synonym_rate)}};
    auto& m = f.section("model");
    for (const auto& [k, v] : model.to_kv())
        if (k != "text_vocab_size") m.entries.emplace_back(k, v);
    auto& t = f.section("train");
    for (const auto& [k, v] : train.to_kv())
        if (k != "seed") t.entries.emplace_back(k, v);
    auto& e = f.section("eval");
    e.entries = {{"tier", knowledge::to_string(eval.tier)},
                 {"n_variants", std::to_string(eval.n_variants)},
                 {"families", families_to_string(eval.families)}};
    return f;
}

std::string RunConfig::to_text() const { return to_kv().to_text(); }

RunConfig RunConfig::from_kv(const KvFile& kv) {
    RunConfig c;
    std::map<std::string, std::string> model_kv, train_kv;
    for (const auto& s : kv.sections) {
        for (const auto& [k, v] : s.entries) {
            const std::string field = s.name + "." + k;
            auto size = [&] { return util::parse_size(field, v); };
            auto real = [&] { return util::parse_double(field, v); };
            if (s.name == "seeds") {
                if (k == "world") c.world_seed = util::parse_u64(field, v);
                else if (k == "data") c.data_seed = util::parse_u64(field, v);
                else if (k == "train") c.train_seed = util::parse_u64(field, v);
                else throw ValidationError(field + ": unknown key");
            } else if (s.name == "world") {
                if (k == "n_findings") c.world.n_findings = size();
                else if (k == "n_unseen") c.world.n_unseen = size();
                else if (k == "n_rare") c.world.n_rare = size();
                else if (k == "seen_prevalence_lo") c.world.options.seen_prevalence_lo = real();
                else if (k == "seen_prevalence_hi") c.world.options.seen_prevalence_hi = real();
                else if (k == "rare_prevalence") c.world.options.rare_prevalence = real();
                else if (k == "unseen_prevalence") c.world.options.unseen_prevalence = real();
                else throw ValidationError(field + ": unknown key");
            } else if (s.name == "data") {
                auto& r = c.data.render;
                if (k == "n_train") c.data.n_train = size();
                else if (k == "n_test") c.data.n_test = size();
                else if (k == "n_shifted") c.data.n_shifted = size();
                else if (k == "height") r.height = size();
                else if (k == "width") r.width = size();
                else if (k == "background") r.background = real();
                else if (k == "noise_sd") r.noise_sd = real();
                else if (k == "faint") r.faint = real();
                else if (k == "strong") r.strong = real();
                else if (k == "jitter") r.jitter = static_cast<int>(size());
                else if (k == "inversion_strength") r.inversion_strength = real();
                else if (k == "band_amplitude") r.band_amplitude = real();
                else if (k == "band_period") r.band_period = size();
                else if (k == "negative_mention_rate") c.data.report.negative_mention_rate = real();
                else if (k == "uncertainty_fraction") c.data.report.uncertainty_fraction = real();
                else if (k == "synonym_rate") c.data.report.synonym_rate = real();
                else throw ValidationError(field + ": unknown key");
            } else if (s.name == "model") {
                if (k == "text_vocab_size") throw ValidationError(field + ": derived from the training corpus, not configurable");
                model_kv[k] = v;
            } else if (s.name == "train") {
                if (k == "seed") throw ValidationError(field + ": set seeds.train instead");
                train_kv[k] = v;
            } else if (s.name == "eval") {
                if (k == "tier") c.eval.tier = parse_cli_tier(v);
                else if (k == "n_variants") c.eval.n_variants = size();
                else if (k == "families") c.eval.families = parse_families(v);
                else throw ValidationError(field + ": unknown key");
            } else {
                throw ValidationError("unknown config section [" + s.name + "]");
            }
        }
    }
    c.model = model::ModelConfig::from_kv(model_kv);
    c.train = train::TrainConfig::from_kv(train_kv);
    c.train.seed = c.train_seed;
    return c;
}

RunConfig RunConfig::parse(const std::string& text) {
    auto c = from_kv(KvFile::parse(text));
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    try {
        return parse(util::read_file(path));
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void RunConfig::save(const std::filesystem::path& path) const { util::write_file(path, to_text()); }

synth::DatasetBundle build_dataset(const RunConfig& config) {
    config.validate();
    synth::DatasetBundle b;
    b.world = synth::gen_world(config.world_seed, config.world.n_findings, config.world.n_unseen, config.world.n_rare,
                               config.world.options);
    b.kb = synth::world_knowledge_base(b.world);
    synth::DatasetOptions o;
    o.render = config.data.render;
    o.report = config.data.report;
    o.include_unseen = false;
    o.id_prefix = "train";
    b.splits["train"] =
        synth::gen_dataset(b.world, config.data.n_train, synth::Style::Primary, num::derive_seed(config.data_seed, 1), o);
    o.include_unseen = true;
    o.id_prefix = "test";
    b.splits["test"] =
        synth::gen_dataset(b.world, config.data.n_test, synth::Style::Primary, num::derive_seed(config.data_seed, 2), o);
    o.id_prefix = "shifted";
    b.splits["shifted"] = synth::gen_dataset(b.world, config.data.n_shifted, synth::Style::Shifted,
                                             num::derive_seed(config.data_seed, 3), o);
    return b;
}

} // namespace kepil::cli
