// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit if
// any criterion fails. Criteria 4-8 share one set of trainings per seed.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "kepil/cli/commands.hpp"
#include "kepil/cli/run_config.hpp"
#include "kepil/eval/ablation.hpp"
#include "kepil/eval/eval.hpp"
#include "kepil/knowledge/resources.hpp"
#include "kepil/losses/losses.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/synthworld/dataset.hpp"
#include "kepil/train/trainer.hpp"
#include "kepil/util/binary_io.hpp"

using namespace kepil;
namespace fs = std::filesystem;
using knowledge::PromptTier;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

std::string list(const std::vector<double>& xs, int digits = 4) {
    std::string s;
    for (double x : xs) s += (s.empty() ? "" : ", ") + fmt(x, digits);
    return s;
}

double mean(const std::vector<double>& xs) { return std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size(); }

bool all_at_least(const std::vector<double>& xs, double bar) {
    return std::all_of(xs.begin(), xs.end(), [&](double x) { return x >= bar; });
}

struct Verdicts {
    std::vector<std::pair<bool, std::string>> lines;

    void add(int n, bool pass, const std::string& what) {
        std::string line = std::string(pass ? "PASS" : "FAIL") + " criterion " + std::to_string(n) + ": " + what;
        std::cout << line << std::endl;
        lines.emplace_back(pass, std::move(line));
    }
};

void note(const std::string& s) { std::cout << "  " << s << std::endl; }

// --- 1. gradient of the composed objective ---

void gradient_correctness(Verdicts& v) {
    const auto t0 = Clock::now();
    const double err = cli::objective_grad_check(cli::toy_config(), 4);
    const double t = seconds_since(t0);
    v.add(1, err < 1e-4 && t < 60.0,
          "full-objective gradient check on a 4-sample batch: max relative error " + sci(err) +
              " (< 1e-4), " + fmt(t, 1) + " s (< 60 s)");
}

// --- 2. loss closed forms ---

void loss_closed_forms(Verdicts& v) {
    num::Graph g;
    const auto e = g.constant(num::Tensor({2, 2}, {1, 0, 0, 1}));
    const double want = std::log(1.0 + std::exp(-1.0));
    const double sc = losses::l_sc(e, e, 1.0).value()(0, 0);
    const double ic = losses::l_ic(e, e, 1.0).value()(0, 0);
    const auto half = g.constant(num::Tensor({1, 2}, 0.5));
    losses::LabelMatrix labels(1, 2);
    labels(0, 0) = losses::Label::Positive;
    labels(0, 1) = losses::Label::Negative;
    const double cls = losses::l_cls(half, labels).value()(0, 0);
    const double e_sc = std::abs(sc - want), e_ic = std::abs(ic - want), e_cls = std::abs(cls - std::log(2.0));
    v.add(2, e_sc <= 1e-9 && e_ic <= 1e-9 && e_cls <= 1e-12,
          "closed forms: |l_sc - log(1+e^-1)| = " + sci(e_sc) + ", |l_ic - log(1+e^-1)| = " + sci(e_ic) +
              " (<= 1e-9), |l_cls(0.5) - ln 2| = " + sci(e_cls) + " (<= 1e-12)");
}

// --- 3. fast AUC against pair counting ---

void auc_oracle(Verdicts& v) {
    num::Rng rng(20261016);
    std::size_t agree = 0, total = 0;
    while (total < 1000) {
        const std::size_t n = 2 + rng.below(199);
        std::vector<double> scores(n);
        std::vector<std::uint8_t> labels(n);
        // coarse scores on some instances so ties are common
        const bool coarse = rng.bernoulli(0.5);
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = coarse ? static_cast<double>(rng.below(5)) : rng.normal();
            labels[i] = rng.bernoulli(0.3);
        }
        if (std::count(labels.begin(), labels.end(), 1) == 0 || std::count(labels.begin(), labels.end(), 0) == 0)
            continue;
        ++total;
        agree += eval::auc(scores, labels) == eval::auc_pairs(scores, labels);
    }
    v.add(3, agree == total,
          "fast AUC equals pair counting exactly on " + std::to_string(agree) + "/" + std::to_string(total) +
              " random instances (n <= 200, with ties)");
}

// --- 10. report writer / extractor agreement ---

void parser_round_trip(Verdicts& v) {
    const auto& res = knowledge::Resources::defaults();
    const cli::RunConfig config;
    std::size_t agree = 0, total = 0;
    for (std::uint64_t ws = 0; ws < 10; ++ws) {
        const auto world = synth::gen_world(ws, config.world.n_findings, config.world.n_unseen, config.world.n_rare);
        num::Rng rng(num::derive_seed(ws, 77));
        for (std::uint64_t i = 0; i < 1000; ++i) {
            synth::LabelVector labels(world.findings.size());
            for (auto& x : labels) x = rng.bernoulli(0.3);
            synth::ReportOptions o = config.data.report;
            o.uncertainty_fraction = rng.uniform(0.0, 0.5);
            o.synonym_rate = rng.uniform(0.0, 1.0);
            o.negative_mention_rate = rng.uniform(0.0, 1.0);
            const auto r = synth::write_report(labels, world, o, num::derive_seed(ws, i));
            std::vector<std::pair<std::string, knowledge::Status>> got;
            for (const auto& m : knowledge::extract_entities(r.report, res.lexicon, res.cues))
                got.emplace_back(m.entity, m.status);
            ++total;
            if (got == r.intended)
                ++agree;
            else if (total - agree <= 3)
                note("disagreement: " + r.report.text);
        }
    }
    v.add(10, agree == total,
          "extract_entities recovers the writer's (entity, status) pairs in " + std::to_string(agree) + "/" +
              std::to_string(total) + " generated reports");
}

// --- 4-8. trained models ---

struct SeedResult {
    double seen_full = 0;        // +EP+Lsc (the default config)
    double unseen_full = 0;      // +EP+Lsc
    double unseen_name = 0;      // +EP+Lsc
    double shifted_full = 0;     // +EP+Lsc
    double shifted_name = 0;     // +EP+Lsc
    double base_unseen = 0;      // name-only training, name-only prompts
    double ep_unseen = 0;        // +EP, full prompts
    double ep_drop = 0, lsc_drop = 0;  // mean AUC drop under variant prompts
    double ep_sep = 0, lsc_sep = 0;    // dispersion separation
    double train_seconds = 0;    // +EP+Lsc training time
};

double macro(model::Model& m, const synth::DatasetBundle& b, const std::string& split, PromptTier tier) {
    return eval::evaluate_splits(m, b, {split}, tier).front().result.macro_auc;
}

SeedResult run_seed(std::uint64_t seed) {
    const auto grid = eval::standard_grid(cli::RunConfig{});
    const auto base_cfg = eval::cell_config(grid.base, grid.cells[0], seed);
    const auto ep_cfg = eval::cell_config(grid.base, grid.cells[1], seed);
    const auto lsc_cfg = eval::cell_config(grid.base, grid.cells[2], seed);
    const auto bundle = cli::build_dataset(lsc_cfg);
    const std::vector<variantgen::VariantKind> families{variantgen::VariantKind::Typo,
                                                        variantgen::VariantKind::Omission,
                                                        variantgen::VariantKind::Punctuation,
                                                        variantgen::VariantKind::Synonym};
    const auto seen = bundle.world.names(synth::Split::Seen);

    auto train = [&](const cli::RunConfig& c, double* seconds = nullptr) {
        const auto t0 = Clock::now();
        auto r = train::train_model(c.model, c.train, bundle.split("train"), bundle.kb);
        if (seconds) *seconds = seconds_since(t0);
        return std::move(r.model);
    };
    auto robustness = [&](model::Model& m, const cli::RunConfig& c) {
        return eval::robustness_eval(m, bundle.split("test"), bundle.world, seen, bundle.kb, families,
                                     c.eval.n_variants, seed);
    };

    SeedResult r;
    {
        auto m = train(base_cfg);
        r.base_unseen = macro(m, bundle, "unseen", base_cfg.eval.tier);
    }
    {
        auto m = train(ep_cfg);
        r.ep_unseen = macro(m, bundle, "unseen", PromptTier::Full);
        const auto rob = robustness(m, ep_cfg);
        r.ep_drop = -rob.mean_delta;
        r.ep_sep = rob.dispersion.separation;
    }
    {
        auto m = train(lsc_cfg, &r.train_seconds);
        r.seen_full = macro(m, bundle, "seen", PromptTier::Full);
        r.unseen_full = macro(m, bundle, "unseen", PromptTier::Full);
        r.unseen_name = macro(m, bundle, "unseen", PromptTier::NameOnly);
        r.shifted_full = macro(m, bundle, "shifted", PromptTier::Full);
        r.shifted_name = macro(m, bundle, "shifted", PromptTier::NameOnly);
        const auto rob = robustness(m, lsc_cfg);
        r.lsc_drop = -rob.mean_delta;
        r.lsc_sep = rob.dispersion.separation;
    }
    note("seed " + std::to_string(seed) + ": seen " + fmt(r.seen_full) + ", unseen full " + fmt(r.unseen_full) +
         " / name " + fmt(r.unseen_name) + ", shifted full " + fmt(r.shifted_full) + " / name " +
         fmt(r.shifted_name) + ", unseen base " + fmt(r.base_unseen) + " / +EP " + fmt(r.ep_unseen) +
         ", variant drop +EP " + fmt(r.ep_drop) + " / +EP+Lsc " + fmt(r.lsc_drop) + ", separation +EP " +
         fmt(r.ep_sep) + " / +EP+Lsc " + fmt(r.lsc_sep) + ", training " + fmt(r.train_seconds, 0) + " s");
    return r;
}

void trained_criteria(Verdicts& v) {
    std::vector<SeedResult> rs;
    for (std::uint64_t seed : {1, 2, 3}) rs.push_back(run_seed(seed));
    auto col = [&](double SeedResult::*f) {
        std::vector<double> xs;
        for (const auto& r : rs) xs.push_back(r.*f);
        return xs;
    };

    const auto seen = col(&SeedResult::seen_full);
    const auto secs = col(&SeedResult::train_seconds);
    const double slowest = *std::max_element(secs.begin(), secs.end());
    v.add(4, all_at_least(seen, 0.90) && slowest <= 900.0,
          "seen macro AUC >= 0.90 for every seed (" + list(seen) + "), slowest training " + fmt(slowest, 0) +
              " s (<= 900 s)");

    const auto uf = col(&SeedResult::unseen_full), un = col(&SeedResult::unseen_name);
    v.add(5, all_at_least(uf, 0.75) && mean(un) < mean(uf),
          "unseen Full-prompt macro AUC >= 0.75 for every seed (" + list(uf) + "); NameOnly mean " +
              fmt(mean(un)) + " < Full mean " + fmt(mean(uf)));

    const auto ed = col(&SeedResult::ep_drop), ld = col(&SeedResult::lsc_drop);
    const auto es = col(&SeedResult::ep_sep), ls = col(&SeedResult::lsc_sep);
    v.add(6, mean(ld) < mean(ed) && mean(ls) > mean(es),
          "mean AUC drop under typo/omission/punctuation/synonym prompts +EP+Lsc " + fmt(mean(ld)) + " < +EP " +
              fmt(mean(ed)) + "; separation +EP+Lsc " + fmt(mean(ls)) + " > +EP " + fmt(mean(es)));

    const double b = mean(col(&SeedResult::base_unseen)), e = mean(col(&SeedResult::ep_unseen)), l = mean(uf);
    v.add(7, b <= e && e <= l,
          "unseen mean macro AUC base " + fmt(b) + " <= +EP " + fmt(e) + " <= +EP+Lsc " + fmt(l));

    const auto sf = col(&SeedResult::shifted_full), sn = col(&SeedResult::shifted_name);
    bool full_wins = true;
    for (std::size_t i = 0; i < rs.size(); ++i) full_wins &= sf[i] > sn[i];
    v.add(8, all_at_least(sf, 0.65) && full_wins,
          "shifted-style seen macro AUC with Full prompts >= 0.65 for every seed (" + list(sf) +
              ") and above NameOnly for every seed (" + list(sn) + ")");
}

// --- 9. byte-identical reruns through the command line ---

int cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::dispatch(args, out, err);
    if (code != cli::kExitOk) note("command failed (" + std::to_string(code) + "): " + err.str());
    return code;
}

void determinism(Verdicts& v) {
    const fs::path root = fs::temp_directory_path() / ("kepil-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string cfg = (root / "run.cfg").string();
    cli::RunConfig{}.save(cfg);

    bool ok = true;
    for (const char* run : {"a", "b"}) {
        const auto dir = root / run;
        ok &= cli({"gen-data", "--config", cfg, "--out", (dir / "data").string()}) == cli::kExitOk;
        ok &= cli({"train", "--config", cfg, "--data", (dir / "data").string(), "--out", (dir / "model").string()}) ==
              cli::kExitOk;
        ok &= cli({"eval", "--checkpoint", (dir / "model/model.ckpt").string(), "--data", (dir / "data").string(),
                   "--out", (dir / "eval").string()}) == cli::kExitOk;
    }
    std::size_t same = 0, compared = 0;
    for (const char* f : {"data/train.bin", "data/test.bin", "data/shifted.bin", "model/model.ckpt",
                          "model/log.tsv", "model/queries.txt", "eval/metrics.txt", "eval/metrics.tsv"}) {
        ++compared;
        const auto a = root / "a" / f, b = root / "b" / f;
        if (fs::exists(a) && fs::exists(b) && util::read_file(a) == util::read_file(b))
            ++same;
        else
            note(std::string("differs or missing: ") + f);
    }
    fs::remove_all(root);
    v.add(9, ok && same == compared,
          "two command-line gen-data/train/eval runs of the default config: " + std::to_string(same) + "/" +
              std::to_string(compared) + " files byte-identical (checkpoint, training log, metrics)");
}

} // namespace

// Arguments, when given, select criteria by number (e.g. "1 2 3 10"); the
// default runs all of them.
int main(int argc, char** argv) {
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    struct Step {
        const char* name;
        std::vector<int> criteria;
        std::function<void(Verdicts&)> run;
    };
    const std::vector<Step> steps{{"gradient check", {1}, gradient_correctness},
                                  {"loss closed forms", {2}, loss_closed_forms},
                                  {"AUC oracle", {3}, auc_oracle},
                                  {"parser round trip", {10}, parser_round_trip},
                                  {"trained models", {4, 5, 6, 7, 8}, trained_criteria},
                                  {"determinism", {9}, determinism}};
    Verdicts v;
    for (const auto& step : steps) {
        if (!wanted.empty() &&
            std::none_of(step.criteria.begin(), step.criteria.end(), [&](int c) { return wanted.count(c) > 0; }))
            continue;
        try {
            step.run(v);
        } catch (const std::exception& e) {
            const std::string line = std::string("FAIL ") + step.name + ": " + e.what();
            std::cout << line << std::endl;
            v.lines.emplace_back(false, line);
        }
    }
    std::cout << "\nsummary\n";
    std::size_t failed = 0;
    for (const auto& [pass, line] : v.lines) {
        std::cout << line << "\n";
        failed += !pass;
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
