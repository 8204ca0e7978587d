#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "kepil/cli/run_config.hpp"
#include "kepil/eval/eval.hpp"

namespace kepil::eval {

// Evaluation splits of a dataset bundle:
//   seen / unseen / rare -> the test split restricted to that finding group
//   shifted              -> seen findings on the shifted split
const std::vector<std::string>& evaluation_splits();

struct SplitScore {
    std::string split;
    ZeroShotResult result;
};

// Zero-shot scores of a trained model on the named evaluation splits, using
// config.eval.tier prompts. A split with no defined finding is an error.
std::vector<SplitScore> evaluate_splits(model::Model& m, const synth::DatasetBundle& bundle,
                                        const std::vector<std::string>& splits, knowledge::PromptTier tier);

struct GridCell {
    std::string name;
    // "section.key" -> value, applied over the base config.
    std::vector<std::pair<std::string, std::string>> overrides;
};

// Grid file grammar (sectioned key/value text):
//   [grid]
//   base   = path/to/run.cfg        optional, relative to the grid file
//   seeds  = 1,2,3                  each seed sets the world, data and training seeds
//   splits = seen,unseen,shifted    optional, defaults to evaluation_splits()
//   [cell NAME]
//   train.placement = report        any number of overrides
struct AblationGrid {
    cli::RunConfig base;
    std::vector<GridCell> cells;
    std::vector<std::uint64_t> seeds{1};
    std::vector<std::string> splits = evaluation_splits();

    void validate() const;  // every cell must give a valid config
    static AblationGrid parse(const std::string& text, const std::filesystem::path& base_dir = ".");
    static AblationGrid load(const std::filesystem::path& path);
    std::string to_text() const;  // self-contained: the base config is inlined as overrides
};

// Config of one (cell, seed) job.
cli::RunConfig cell_config(const cli::RunConfig& base, const GridCell& cell, std::uint64_t seed);

// Key identifying a trained model: every config section except [eval].
// Cells whose configs share a key share one trained model.
std::string training_key(const cli::RunConfig& config);

// Enriched prompt / L_sc rows, dropout rows and placement rows.
AblationGrid standard_grid(const cli::RunConfig& base);

struct CellRun {
    std::string cell;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    bool cached = false;  // model reused from an earlier cell
    std::string model_checksum;
    std::vector<SplitScore> scores;
};

struct CellSummary {
    std::string cell, split;
    std::size_t n = 0;  // seeds that finished
    double mean = 0, std = 0;
};

struct AblationResult {
    std::vector<std::string> cells;
    std::vector<std::string> splits;
    std::vector<CellRun> runs;

    // Macro AUC over the seeds that finished; std is the sample standard
    // deviation (0 for a single seed).
    CellSummary summary(const std::string& cell, const std::string& split) const;
    std::string text_table() const;
    // One row per metric: cell, split, finding ("macro" for the averages),
    // metric, value, seed.
    std::string tsv() const;
};

struct AblationOptions {
    // When set, every trained model and the result files go here:
    //   models/<key>-s<seed>.ckpt, results.txt, results.tsv, grid.txt
    std::filesystem::path out_dir;
    std::function<void(const std::string&)> log;
    train::ProgressFn progress;
};

// Training divergence marks the cell failed and the run continues.
AblationResult run_ablation(const AblationGrid& grid, const AblationOptions& options = {});

} // namespace kepil::eval
