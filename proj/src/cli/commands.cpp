#include "kepil/cli/commands.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include "kepil/errors.hpp"
#include "kepil/eval/ablation.hpp"
#include "kepil/eval/eval.hpp"
#include "kepil/knowledge/text.hpp"
#include "kepil/numerics/gradcheck.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/train/trainer.hpp"
#include "kepil/util/binary_io.hpp"
#include "kepil/util/strings.hpp"

namespace kepil::cli {

namespace fs = std::filesystem;

namespace {

std::string checksum(std::string_view bytes) { return util::hex64(util::fnv1a64(bytes)); }

std::string fixed(double v, int prec = 4) {
    if (std::isnan(v)) return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

// Aligned columns, two spaces apart.
std::string table(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> w;
    for (const auto& r : rows) {
        if (w.size() < r.size()) w.resize(r.size(), 0);
        for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], r[i].size());
    }
    std::ostringstream out;
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            out << r[i];
            if (i + 1 < r.size()) out << std::string(w[i] - r[i].size() + 2, ' ');
        }
        out << "\n";
    }
    return out.str();
}

// Refuses early, before any expensive work, when the directory is in use.
void check_output_dir(const fs::path& dir, ExistingOutput mode) {
    const bool has_run = fs::exists(dir / "run.txt");
    if (mode == ExistingOutput::Verify) {
        if (!has_run) throw IoError(dir.string() + ": nothing to verify (no run.txt)");
        return;
    }
    if (mode == ExistingOutput::Force) return;
    if (has_run)
        throw IoError(dir.string() + " already holds a run; pass --verify to check it or --force to overwrite");
    if (fs::exists(dir) && !fs::is_empty(dir))
        throw IoError(dir.string() + " is not empty; refusing to mix outputs (use --force)");
}

std::optional<RunConfig> config_beside(const fs::path& file) {
    const auto p = file.parent_path() / "config.txt";
    if (!fs::exists(p)) return std::nullopt;
    return RunConfig::load(p);
}

std::vector<std::string> resolve_splits(const std::string& split) {
    if (split == "all") return eval::evaluation_splits();
    const auto& all = eval::evaluation_splits();
    if (std::find(all.begin(), all.end(), split) == all.end())
        throw ValidationError("--split: unknown split '" + split + "' (expected seen, unseen, rare, shifted or all)");
    return {split};
}

struct Finish {
    std::ostream& out;
    std::ostream& err;
    ExistingOutput mode;

    int operator()(const fs::path& dir, const std::string& command, const RunConfig& config,
                   const Artifacts& artifacts) const {
        if (dir.empty()) return kExitOk;
        const bool same = commit_outputs(dir, command, config, artifacts, mode);
        if (mode == ExistingOutput::Verify) {
            if (!same) {
                err << "verify: outputs differ from " << (dir / "run.txt").string() << "\n";
                return kExitMismatch;
            }
            out << "verify: outputs match " << (dir / "run.txt").string() << "\n";
            return kExitOk;
        }
        out << "wrote " << artifacts.size() << " files and run.txt to " << dir.string() << "\n";
        return kExitOk;
    }
};

std::string eval_tsv(const std::vector<eval::SplitScore>& scores, std::uint64_t seed) {
    std::ostringstream out;
    out << "split\tfinding\tmetric\tvalue\tseed\n";
    for (const auto& sc : scores) {
        auto row = [&](const std::string& finding, const char* metric, double v) {
            out << sc.split << "\t" << finding << "\t" << metric << "\t" << util::format_double(v) << "\t" << seed
                << "\n";
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
            row(m.finding, "best_threshold", m.best_threshold);
            row(m.finding, "f1_best", m.f1_best);
        }
    }
    return out.str();
}

std::string eval_table(const std::vector<eval::SplitScore>& scores) {
    std::vector<std::vector<std::string>> rows{
        {"split", "finding", "pos", "neg", "auc", "f1@0.5", "acc@0.5", "thr*", "f1@thr*"}};
    for (const auto& sc : scores) {
        for (const auto& m : sc.result.metrics) {
            if (!m.defined) {
                rows.push_back({sc.split, m.finding, std::to_string(m.positives), std::to_string(m.negatives),
                                "undefined", "", "", "", ""});
                continue;
            }
            rows.push_back({sc.split, m.finding, std::to_string(m.positives), std::to_string(m.negatives),
                            fixed(m.auc), fixed(m.f1), fixed(m.accuracy), fixed(m.best_threshold), fixed(m.f1_best)});
        }
        const auto& z = sc.result;
        rows.push_back({sc.split, "macro (" + std::to_string(z.defined) + ")", "", "", fixed(z.macro_auc),
                        fixed(z.macro_f1), fixed(z.macro_accuracy), "", fixed(z.macro_f1_best)});
    }
    return table(rows);
}

struct RobustnessFiles {
    std::string text, tsv, series;
};

RobustnessFiles robustness_files(const eval::RobustnessReport& r, std::uint64_t seed) {
    RobustnessFiles f;
    std::vector<std::vector<std::string>> rows{{"family", "mean_delta", "intra", "inter", "separation", "applied"}};
    std::ostringstream tsv;
    tsv << "family\tfinding\tmetric\tvalue\tseed\n";
    auto row = [&](const std::string& family, const std::string& finding, const char* metric, double v) {
        tsv << family << "\t" << finding << "\t" << metric << "\t" << util::format_double(v) << "\t" << seed << "\n";
    };
    for (std::size_t i = 0; i < r.findings.size(); ++i) row("canonical", r.findings[i], "auc", r.canonical_auc[i]);
    for (const auto& fam : r.families) {
        const std::string name = variantgen::to_string(fam.kind);
        std::size_t applied = 0;
        for (const auto& v : fam.findings) {
            if (v.skipped) {
                tsv << name << "\t" << v.finding << "\tskipped\t1\t" << seed << "\n";
                continue;
            }
            ++applied;
            row(name, v.finding, "variant_auc", v.variant_auc);
            row(name, v.finding, "delta", v.delta);
        }
        if (fam.any_applied) {
            row(name, "macro", "mean_delta", fam.mean_delta);
            row(name, "macro", "intra", fam.dispersion.intra);
            row(name, "macro", "inter", fam.dispersion.inter);
            row(name, "macro", "separation", fam.dispersion.separation);
        }
        rows.push_back({name, fam.any_applied ? fixed(fam.mean_delta) : "-", fixed(fam.dispersion.intra),
                        fixed(fam.dispersion.inter), fixed(fam.dispersion.separation),
                        std::to_string(applied) + "/" + std::to_string(fam.findings.size())});
    }
    row("pooled", "macro", "mean_delta", r.mean_delta);
    row("pooled", "macro", "intra", r.dispersion.intra);
    row("pooled", "macro", "inter", r.dispersion.inter);
    row("pooled", "macro", "separation", r.dispersion.separation);
    rows.push_back({"pooled", fixed(r.mean_delta), fixed(r.dispersion.intra), fixed(r.dispersion.inter),
                    fixed(r.dispersion.separation), ""});
    f.text = table(rows);
    f.tsv = tsv.str();

    // Wide form for plotting: one row per finding, one column per family.
    std::ostringstream s;
    s << "finding";
    for (const auto& fam : r.families) s << "\t" << variantgen::to_string(fam.kind);
    s << "\n";
    for (std::size_t i = 0; i < r.findings.size(); ++i) {
        s << r.findings[i];
        for (const auto& fam : r.families) {
            const double d = fam.delta_series[i];
            s << "\t" << (std::isnan(d) ? std::string("nan") : util::format_double(d));
        }
        s << "\n";
    }
    f.series = s.str();
    return f;
}

std::string join_args(const std::vector<std::string>& args) {
    std::string s;
    for (const auto& a : args) {
        if (!s.empty()) s += ' ';
        s += a;
    }
    return s;
}

} // namespace

std::string manifest_text(const std::string& command, const RunConfig& config, const Artifacts& artifacts) {
    std::ostringstream out;
    out << "kepil-run 1\n";
    out << "command " << command << "\n";
    out << "seed world " << config.world_seed << "\n";
    out << "seed data " << config.data_seed << "\n";
    out << "seed train " << config.train_seed << "\n";
    out << "config " << checksum(config.to_text()) << "\n";
    for (const auto& [name, bytes] : artifacts)
        out << "artifact " << name << " " << checksum(bytes) << " " << bytes.size() << "\n";
    return out.str();
}

bool commit_outputs(const fs::path& dir, const std::string& command, const RunConfig& config,
                    const Artifacts& artifacts, ExistingOutput mode) {
    const std::string manifest = manifest_text(command, config, artifacts);
    if (mode == ExistingOutput::Verify) {
        // The command line may name other paths; compare everything else.
        auto strip = [](const std::string& text) {
            std::istringstream in(text);
            std::string line, kept;
            while (std::getline(in, line))
                if (line.rfind("command ", 0) != 0) kept += line + "\n";
            return kept;
        };
        return strip(util::read_file(dir / "run.txt")) == strip(manifest);
    }
    check_output_dir(dir, mode);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (const auto& [name, bytes] : artifacts) {
        const auto path = dir / name;
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        util::write_file(path, bytes);
    }
    util::write_file(dir / "run.txt", manifest);
    return true;
}

RunConfig toy_config() {
    RunConfig c;
    c.data.n_train = 8;
    c.data.n_test = 8;
    c.data.n_shifted = 8;
    c.data.render.height = c.data.render.width = 16;
    c.data.render.jitter = 1;
    c.model.image_height = c.model.image_width = 16;
    c.model.patch_size = 8;
    c.model.embed_dim = 4;
    c.model.mlp_hidden = 5;
    c.model.adapter_hidden = 3;
    c.model.max_tokens = 12;
    c.model.encoder_depth = 1;
    c.train.batch_size = 4;
    c.train.epochs = 1;
    c.train.top_m = 4;
    c.train.seed = c.train_seed;
    return c;
}

double objective_grad_check(const RunConfig& config, std::size_t batch) {
    config.validate();
    if (batch < 2) throw ValidationError("gradcheck: batch must be at least 2");
    const auto world = synth::gen_world(config.world_seed, config.world.n_findings, config.world.n_unseen,
                                        config.world.n_rare, config.world.options);
    const auto kb = synth::world_knowledge_base(world);
    synth::DatasetOptions o;
    o.render = config.data.render;
    o.report = config.data.report;
    o.include_unseen = false;
    o.id_prefix = "train";
    // Same per-sample seeds as the training split, so these are its first samples.
    const auto samples =
        synth::gen_dataset(world, batch, synth::Style::Primary, num::derive_seed(config.data_seed, 1), o);

    const auto& res = knowledge::Resources::defaults();
    std::vector<knowledge::StandardizedReport> reports;
    for (const auto& s : samples) reports.push_back(train::standardize_report(s.report, res));
    const auto queries = train::query_vocabulary(reports, kb, config.train.top_m);
    model::Model m(config.model, train::build_tokenizer(reports, kb, res.schema), config.train_seed);
    const auto tier = config.train.enriched_prompts ? knowledge::PromptTier::Full : knowledge::PromptTier::NameOnly;
    std::vector<std::vector<std::size_t>> prompt_ids, report_ids;
    for (const auto& q : queries) prompt_ids.push_back(m.tokenize(knowledge::enrich_prompt(q, kb, tier, res.schema).text));
    for (const auto& r : reports) report_ids.push_back(m.tokenize(r.serialize()));
    std::vector<const num::Tensor*> images;
    std::vector<const knowledge::StandardizedReport*> rp;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        images.push_back(&samples[i].image);
        rp.push_back(&reports[i]);
    }
    const auto labels = train::label_matrix(rp, queries);
    const auto step_seed = num::derive_seed(config.train_seed, 0x7374657000000000ULL);
    auto build = [&](num::Graph& g) {
        return train::batch_objective(g, m, config.train, images, report_ids, prompt_ids, labels, step_seed);
    };
    const auto rep = num::grad_check(build, m.params());
    return rep.max_rel_error.value_or(std::numeric_limits<double>::infinity());
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Knowledge-enhanced zero-shot finding classification on a synthetic imaging world.", "kepil"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    std::string config_path, out_dir, data_dir, checkpoint, split = "all", robust_split = "seen", tier = "full", families, grid_path,
                seeds_list;
    std::size_t n_variants = 0, batch = 4;
    std::uint64_t seed = 1;
    bool force = false, verify = false, standard = false;

    auto mode_flags = [&](CLI::App* sub) {
        auto* f = sub->add_flag("--force", force, "Overwrite an existing output directory");
        auto* v = sub->add_flag("--verify", verify, "Recompute and compare with the run recorded in the output directory");
        f->excludes(v);
    };

    auto* gen = app.add_subcommand("gen-data", "Generate the world, knowledge base and dataset splits");
    gen->add_option("--config", config_path, "Run config file")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", out_dir, "Output directory")->required();
    mode_flags(gen);

    auto* tr = app.add_subcommand("train", "Train a model on the train split of a dataset");
    tr->add_option("--config", config_path, "Run config file")->required()->check(CLI::ExistingFile);
    tr->add_option("--data", data_dir, "Dataset directory from gen-data")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--out", out_dir, "Output directory")->required();
    mode_flags(tr);

    auto* ev = app.add_subcommand("eval", "Zero-shot evaluation of a checkpoint");
    ev->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--split", split, "seen, unseen, rare, shifted or all")->capture_default_str();
    ev->add_option("--tier", tier, "Prompt tier: name, def or full")->capture_default_str();
    ev->add_option("--out", out_dir, "Write metrics.txt / metrics.tsv here");
    mode_flags(ev);

    auto* rb = app.add_subcommand("robustness", "AUC change under prompt variants and embedding dispersion");
    rb->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    rb->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    rb->add_option("--families", families, "Comma-separated variant families (default: the config's)");
    rb->add_option("--n-variants", n_variants, "Variants per finding prompt (default: the config's)");
    rb->add_option("--seed", seed, "Variant generation seed")->capture_default_str();
    rb->add_option("--split", robust_split, "seen, unseen, rare or shifted")->capture_default_str();
    rb->add_option("--tier", tier, "Canonical prompt tier")->capture_default_str();
    rb->add_option("--out", out_dir, "Write robustness.txt / robustness.tsv / delta_series.tsv here");
    mode_flags(rb);

    auto* ab = app.add_subcommand("ablate", "Train and evaluate every cell of an ablation grid");
    ab->add_option("--grid", grid_path, "Grid file")->check(CLI::ExistingFile);
    ab->add_flag("--standard", standard, "Use the built-in grid (base, +EP, +EP+Lsc, dropout and placement rows)");
    ab->add_option("--config", config_path, "Base config for --standard")->check(CLI::ExistingFile);
    ab->add_option("--seeds", seeds_list, "Seeds for --standard, comma separated")->default_str("1");
    ab->add_option("--out", out_dir, "Output directory")->required();
    mode_flags(ab);

    auto* gc = app.add_subcommand("gradcheck", "Check gradients of the full training objective");
    gc->add_option("--config", config_path, "Run config file (default: a toy config)")->check(CLI::ExistingFile);
    gc->add_option("--batch", batch, "Batch size")->capture_default_str();

    std::vector<std::string> argv_store{"kepil"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "kepil: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    const auto mode = verify ? ExistingOutput::Verify : force ? ExistingOutput::Force : ExistingOutput::Refuse;
    const Finish finish{out, err, mode};
    const std::string command = join_args(args);
    try {
        if (gen->parsed()) {
            const auto config = RunConfig::load(config_path);
            check_output_dir(out_dir, mode);
            const auto bundle = build_dataset(config);
            auto files = synth::dataset_files(bundle);
            files["config.txt"] = config.to_text();
            out << "world: " << bundle.world.names(synth::Split::Seen).size() << " seen, "
                << bundle.world.names(synth::Split::Unseen).size() << " unseen, "
                << bundle.world.names(synth::Split::Rare).size() << " rare findings\n";
            for (const auto& [name, samples] : bundle.splits)
                out << "split " << name << ": " << samples.size() << " samples\n";
            return finish(out_dir, command, config, files);
        }
        if (tr->parsed()) {
            const auto config = RunConfig::load(config_path);
            check_output_dir(out_dir, mode);
            if (const auto data_config = config_beside(fs::path(data_dir) / "manifest.txt")) {
                if (data_config->world_seed != config.world_seed || data_config->data_seed != config.data_seed ||
                    !(data_config->world == config.world) || !(data_config->data == config.data))
                    throw ValidationError("config: [seeds] world/data, [world] or [data] differ from the config that "
                                          "generated " + data_dir);
            }
            const auto bundle = synth::read_dataset(data_dir);
            std::ostringstream log;
            log << "epoch\tloss\tcls\tic\tsc\n";
            auto result = train::train_model(config.model, config.train, bundle.split("train"), bundle.kb,
                                             knowledge::Resources::defaults(), [&](const train::EpochLog& l) {
                                                 out << "epoch " << l.epoch << "  loss " << fixed(l.loss) << "  cls "
                                                     << fixed(l.cls) << "  ic " << fixed(l.ic) << "  sc "
                                                     << fixed(l.sc) << std::endl;
                                                 log << l.epoch << "\t" << util::format_double(l.loss) << "\t"
                                                     << util::format_double(l.cls) << "\t"
                                                     << util::format_double(l.ic) << "\t"
                                                     << util::format_double(l.sc) << "\n";
                                             });
            Artifacts files;
            files["model.ckpt"] = result.model.serialize();
            files["queries.txt"] = knowledge::join(result.queries, "\n") + "\n";
            files["log.tsv"] = log.str();
            files["config.txt"] = config.to_text();
            return finish(out_dir, command, config, files);
        }
        if (ev->parsed()) {
            if (!out_dir.empty()) check_output_dir(out_dir, mode);
            auto m = model::Model::load(checkpoint);
            const auto bundle = synth::read_dataset(data_dir);
            const auto train_config = config_beside(checkpoint);
            const auto scores = eval::evaluate_splits(m, bundle, resolve_splits(split), parse_cli_tier(tier));
            const auto text = eval_table(scores);
            out << text;
            Artifacts files;
            files["metrics.txt"] = text;
            files["metrics.tsv"] = eval_tsv(scores, train_config ? train_config->train_seed : 0);
            return finish(out_dir, command, train_config.value_or(RunConfig{}), files);
        }
        if (rb->parsed()) {
            if (!out_dir.empty()) check_output_dir(out_dir, mode);
            auto m = model::Model::load(checkpoint);
            const auto bundle = synth::read_dataset(data_dir);
            const auto train_config = config_beside(checkpoint);
            const RunConfig base = train_config.value_or(RunConfig{});
            const auto fams = families.empty() ? base.eval.families : parse_families(families);
            const std::size_t nv = n_variants == 0 ? base.eval.n_variants : n_variants;
            const auto& samples = bundle.split(robust_split == "shifted" ? "shifted" : "test");
            const auto findings = bundle.world.names(robust_split == "shifted" ? synth::Split::Seen
                                                                               : synth::parse_split(robust_split));
            eval::RobustnessOptions ro;
            ro.tier = parse_cli_tier(tier);
            const auto report = eval::robustness_eval(m, samples, bundle.world, findings, bundle.kb, fams, nv, seed, ro);
            const auto f = robustness_files(report, seed);
            out << f.text;
            return finish(out_dir, command, base, {{"robustness.txt", f.text}, {"robustness.tsv", f.tsv},
                                                   {"delta_series.tsv", f.series}});
        }
        if (ab->parsed()) {
            if (standard == !grid_path.empty()) throw ValidationError("ablate: give exactly one of --grid or --standard");
            eval::AblationGrid grid;
            if (standard) {
                grid = eval::standard_grid(config_path.empty() ? RunConfig{} : RunConfig::load(config_path));
                grid.seeds.clear();
                for (const auto& s : knowledge::split(seeds_list, ','))
                    if (!knowledge::trim(s).empty()) grid.seeds.push_back(util::parse_u64("--seeds", knowledge::trim(s)));
                grid.validate();
            } else {
                grid = eval::AblationGrid::load(grid_path);
            }
            check_output_dir(out_dir, mode);
            eval::AblationOptions ao;
            if (mode != ExistingOutput::Verify) ao.out_dir = out_dir;
            ao.log = [&](const std::string& s) { out << s << std::endl; };
            const auto result = eval::run_ablation(grid, ao);
            out << result.text_table();
            Artifacts files{{"grid.txt", grid.to_text()},
                            {"results.txt", result.text_table()},
                            {"results.tsv", result.tsv()}};
            // The runner has already filled the directory with checkpoints; the early check stands for it.
            const Finish commit{out, err, mode == ExistingOutput::Refuse ? ExistingOutput::Force : mode};
            return commit(out_dir, command, grid.base, files);
        }
        if (gc->parsed()) {
            const auto config = config_path.empty() ? toy_config() : RunConfig::load(config_path);
            const double e = objective_grad_check(config, batch);
            const bool ok = e < 1e-4;
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.3e", e);
            out << "max relative error " << buf << " (threshold 1e-4): " << (ok ? "ok" : "FAILED") << "\n";
            return ok ? kExitOk : kExitMismatch;
        }
    } catch (const Error& e) {
        err << "kepil: " << e.what() << "\n";
        return kExitError;
    } catch (const std::exception& e) {
        err << "kepil: unexpected failure: " << e.what() << "\n";
        return kExitError;
    }
    err << app.help();
    return kExitUsage;
}

} // namespace kepil::cli
