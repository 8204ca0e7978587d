#include "kepil/eval/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "kepil/errors.hpp"
#include "kepil/knowledge/text.hpp"
#include "kepil/train/trainer.hpp"
#include "kepil/util/binary_io.hpp"
#include "kepil/util/strings.hpp"

namespace kepil::eval {

namespace {

std::string fixed(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> out;
    for (const auto& part : knowledge::split(text, ',')) {
        const auto s = knowledge::trim(part);
        if (!s.empty()) out.push_back(util::parse_u64("grid.seeds", s));
    }
    if (out.empty()) throw ValidationError("grid.seeds: at least one seed is required");
    return out;
}

std::vector<std::string> parse_split_list(const std::string& text) {
    std::vector<std::string> out;
    for (const auto& part : knowledge::split(text, ',')) {
        const auto s = knowledge::trim(part);
        if (!s.empty()) out.push_back(s);
    }
    return out;
}

void apply_override(cli::KvFile& kv, const std::string& dotted, const std::string& value) {
    const auto dot = dotted.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == dotted.size())
        throw ValidationError("override '" + dotted + "': expected section.key");
    const std::string section = dotted.substr(0, dot), key = dotted.substr(dot + 1);
    auto& s = kv.section(section);
    for (auto& [k, v] : s.entries)
        if (k == key) {
            v = value;
            return;
        }
    s.entries.emplace_back(key, value);  // unknown keys are rejected by from_kv
}

// Sections of `text` that form a run config (everything but [grid] and [cell ...]).
bool is_grid_section(const std::string& name) { return name == "grid" || name.rfind("cell ", 0) == 0; }

} // namespace

const std::vector<std::string>& evaluation_splits() {
    static const std::vector<std::string> s{"seen", "unseen", "rare", "shifted"};
    return s;
}

std::vector<SplitScore> evaluate_splits(model::Model& m, const synth::DatasetBundle& bundle,
                                        const std::vector<std::string>& splits, knowledge::PromptTier tier) {
    EvalOptions o;
    o.tier = tier;
    std::vector<SplitScore> out;
    for (const auto& name : splits) {
        const std::vector<synth::SyntheticSample>* samples = nullptr;
        std::vector<std::string> findings;
        if (name == "shifted") {
            samples = &bundle.split("shifted");
            findings = bundle.world.names(synth::Split::Seen);
        } else {
            samples = &bundle.split("test");
            findings = bundle.world.names(synth::parse_split(name));
        }
        if (findings.empty()) throw DomainError("evaluation split '" + name + "' has no findings in this world");
        try {
            out.push_back({name, evaluate_zero_shot(m, *samples, bundle.world, findings, bundle.kb, o)});
        } catch (const DomainError& e) {
            throw DomainError("evaluation split '" + name + "': " + e.what());
        }
    }
    return out;
}

cli::RunConfig cell_config(const cli::RunConfig& base, const GridCell& cell, std::uint64_t seed) {
    auto kv = base.to_kv();
    for (const auto& [k, v] : cell.overrides) {
        if (k.rfind("seeds.", 0) == 0 || k == "train.seed")
            throw ValidationError("cell '" + cell.name + "': seeds come from the grid, not from cells");
        apply_override(kv, k, v);
    }
    apply_override(kv, "seeds.world", std::to_string(seed));
    apply_override(kv, "seeds.data", std::to_string(seed));
    apply_override(kv, "seeds.train", std::to_string(seed));
    try {
        auto c = cli::RunConfig::from_kv(kv);
        c.validate();
        return c;
    } catch (const ValidationError& e) {
        throw ValidationError("cell '" + cell.name + "': " + e.what());
    }
}

std::string training_key(const cli::RunConfig& config) {
    auto kv = config.to_kv();
    std::erase_if(kv.sections, [](const cli::KvSection& s) { return s.name == "eval"; });
    return kv.to_text();
}

void AblationGrid::validate() const {
    if (cells.empty()) throw ValidationError("grid: no cells");
    if (seeds.empty()) throw ValidationError("grid.seeds: at least one seed is required");
    if (splits.empty()) throw ValidationError("grid.splits: at least one split is required");
    std::set<std::string> names;
    for (const auto& s : splits)
        if (std::find(evaluation_splits().begin(), evaluation_splits().end(), s) == evaluation_splits().end())
            throw ValidationError("grid.splits: unknown split '" + s + "' (expected seen, unseen, rare or shifted)");
    for (const auto& c : cells) {
        if (c.name.empty()) throw ValidationError("grid: empty cell name");
        if (!names.insert(c.name).second) throw ValidationError("grid: cell '" + c.name + "' appears twice");
        for (auto s : seeds) cell_config(base, c, s);
    }
}

AblationGrid AblationGrid::parse(const std::string& text, const std::filesystem::path& base_dir) {
    const auto kv = cli::KvFile::parse(text);
    AblationGrid g;
    cli::KvFile base_kv;
    if (const auto* grid = kv.find("grid")) {
        for (const auto& [k, v] : grid->entries) {
            if (k == "base") base_kv = cli::KvFile::parse(util::read_file(base_dir / v));
            else if (k == "seeds") g.seeds = parse_seeds(v);
            else if (k == "splits") g.splits = parse_split_list(v);
            else throw ValidationError("grid." + k + ": unknown key");
        }
    }
    for (const auto& s : kv.sections) {
        if (s.name == "grid") continue;
        if (s.name.rfind("cell ", 0) == 0) {
            GridCell c;
            c.name = knowledge::trim(s.name.substr(5));
            c.overrides = s.entries;
            g.cells.push_back(std::move(c));
            continue;
        }
        for (const auto& [k, v] : s.entries) apply_override(base_kv, s.name + "." + k, v);
    }
    g.base = cli::RunConfig::from_kv(base_kv);
    g.base.validate();
    g.validate();
    return g;
}

AblationGrid AblationGrid::load(const std::filesystem::path& path) {
    try {
        return parse(util::read_file(path), path.parent_path().empty() ? "." : path.parent_path());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

std::string AblationGrid::to_text() const {
    cli::KvFile kv;
    auto& grid = kv.section("grid");
    std::vector<std::string> s;
    for (auto v : seeds) s.push_back(std::to_string(v));
    grid.entries.emplace_back("seeds", knowledge::join(s, ","));
    grid.entries.emplace_back("splits", knowledge::join(splits, ","));
    for (const auto& sec : base.to_kv().sections)
        if (sec.name != "seeds" && !is_grid_section(sec.name)) kv.sections.push_back(sec);
    for (const auto& c : cells) kv.sections.push_back({"cell " + c.name, c.overrides});
    return kv.to_text();
}

AblationGrid standard_grid(const cli::RunConfig& base) {
    AblationGrid g;
    g.base = base;
    g.cells = {
        {"base", {{"train.enriched_prompts", "false"}, {"train.sc_placement", "none"}, {"eval.tier", "name"}}},
        {"+EP", {{"train.sc_placement", "none"}}},
        {"+EP+Lsc", {{"train.sc_placement", "report"}}},
    };
    for (const char* p : {"0.3", "0.4", "0.5", "0.6"})
        g.cells.push_back({std::string("dropout ") + p, {{"train.sc_placement", "report"}, {"model.adapter_dropout", p}}});
    for (const char* p : {"report", "prompt", "both"})
        g.cells.push_back({std::string("placement ") + p, {{"train.sc_placement", p}}});
    return g;
}

CellSummary AblationResult::summary(const std::string& cell, const std::string& split) const {
    CellSummary s{cell, split, 0, 0, 0};
    std::vector<double> v;
    for (const auto& r : runs) {
        if (r.cell != cell || r.failed) continue;
        for (const auto& sc : r.scores)
            if (sc.split == split) v.push_back(sc.result.macro_auc);
    }
    s.n = v.size();
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

std::string AblationResult::text_table() const {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header{"cell"};
    for (const auto& s : splits) header.push_back(s);
    header.push_back("seeds");
    rows.push_back(header);
    for (const auto& c : cells) {
        std::vector<std::string> row{c};
        std::size_t total = 0, failed = 0;
        for (const auto& r : runs)
            if (r.cell == c) {
                ++total;
                failed += r.failed;
            }
        for (const auto& s : splits) {
            const auto sum = summary(c, s);
            row.push_back(sum.n == 0 ? "failed" : fixed(sum.mean) + " ± " + fixed(sum.std));
        }
        row.push_back(std::to_string(total - failed) + "/" + std::to_string(total));
        rows.push_back(row);
    }
    // Align on display width; "±" is two bytes but one column.
    auto width = [](const std::string& s) {
        std::size_t w = 0;
        for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
        return w;
    };
    std::vector<std::size_t> w(header.size(), 0);
    for (const auto& r : rows)
        for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], width(r[i]));
    std::ostringstream out;
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            out << r[i];
            if (i + 1 < r.size()) out << std::string(w[i] - width(r[i]) + 2, ' ');
        }
        out << "\n";
    }
    return out.str();
}

std::string AblationResult::tsv() const {
    std::ostringstream out;
    out << "cell\tsplit\tfinding\tmetric\tvalue\tseed\n";
    for (const auto& r : runs) {
        if (r.failed) {
            out << r.cell << "\t-\t-\tfailed\t1\t" << r.seed << "\n";
            continue;
        }
        for (const auto& sc : r.scores) {
            auto row = [&](const std::string& finding, const char* metric, double v) {
                out << r.cell << "\t" << sc.split << "\t" << finding << "\t" << metric << "\t"
                    << util::format_double(v) << "\t" << r.seed << "\n";
            };
            const auto& z = sc.result;
            row("macro", "auc", z.macro_auc);
            row("macro", "f1", z.macro_f1);
            row("macro", "accuracy", z.macro_accuracy);
            row("macro", "f1_best", z.macro_f1_best);
            for (const auto& m : z.metrics) {
                if (!m.defined) continue;
                row(m.finding, "auc", m.auc);
                row(m.finding, "f1", m.f1);
                row(m.finding, "accuracy", m.accuracy);
                row(m.finding, "f1_best", m.f1_best);
            }
        }
    }
    return out.str();
}

AblationResult run_ablation(const AblationGrid& grid, const AblationOptions& options) {
    grid.validate();
    auto say = [&](const std::string& s) {
        if (options.log) options.log(s);
    };
    AblationResult res;
    for (const auto& c : grid.cells) res.cells.push_back(c.name);
    res.splits = grid.splits;
    if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir / "models");

    struct Trained {
        std::shared_ptr<model::Model> model;
        std::string error;
        std::string checksum;
    };
    for (auto seed : grid.seeds) {
        // Models and data are shared only within one seed.
        std::map<std::string, Trained> models;
        std::map<std::string, std::shared_ptr<synth::DatasetBundle>> data;
        for (const auto& cell : grid.cells) {
            const auto config = cell_config(grid.base, cell, seed);
            CellRun run;
            run.cell = cell.name;
            run.seed = seed;

            auto kv = config.to_kv();
            cli::KvFile data_kv;
            for (const auto& s : kv.sections)
                if (s.name == "seeds" || s.name == "world" || s.name == "data") data_kv.sections.push_back(s);
            const auto data_key = data_kv.to_text();
            auto& bundle = data[data_key];
            if (!bundle) bundle = std::make_shared<synth::DatasetBundle>(cli::build_dataset(config));

            const auto key = training_key(config);
            auto it = models.find(key);
            if (it != models.end()) {
                run.cached = true;
                say("cell '" + cell.name + "' seed " + std::to_string(seed) + ": reusing trained model");
            } else {
                Trained t;
                const auto file = options.out_dir.empty()
                                      ? std::filesystem::path()
                                      : options.out_dir / "models" /
                                            (util::hex64(util::fnv1a64(key)) + "-s" + std::to_string(seed) + ".ckpt");
                try {
                    if (!file.empty() && std::filesystem::exists(file)) {
                        say("cell '" + cell.name + "' seed " + std::to_string(seed) + ": loading " + file.string());
                        t.model = std::make_shared<model::Model>(model::Model::load(file));
                    } else {
                        say("cell '" + cell.name + "' seed " + std::to_string(seed) + ": training");
                        auto r = train::train_model(config.model, config.train, bundle->split("train"), bundle->kb,
                                                    knowledge::Resources::defaults(), options.progress);
                        t.model = std::make_shared<model::Model>(std::move(r.model));
                        if (!file.empty()) t.model->save(file);
                    }
                    t.checksum = util::hex64(util::fnv1a64(t.model->serialize()));
                } catch (const DivergenceError& e) {
                    t.error = e.what();
                    say("cell '" + cell.name + "' seed " + std::to_string(seed) + ": failed: " + t.error);
                }
                it = models.emplace(key, std::move(t)).first;
            }
            if (!it->second.model) {
                run.failed = true;
                run.error = it->second.error;
            } else {
                run.model_checksum = it->second.checksum;
                run.scores = evaluate_splits(*it->second.model, *bundle, grid.splits, config.eval.tier);
            }
            res.runs.push_back(std::move(run));
        }
    }
    if (!options.out_dir.empty()) {
        util::write_file(options.out_dir / "grid.txt", grid.to_text());
        util::write_file(options.out_dir / "results.txt", res.text_table());
        util::write_file(options.out_dir / "results.tsv", res.tsv());
    }
    return res;
}

} // namespace kepil::eval
