#pragma once

#include "statetrace/nn.hpp"
#include "statetrace/sim.hpp"
#include "statetrace/trace.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace statetrace::pipeline {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Where the labeled traces come from: an existing manifest, or a generator
/// configuration that writes a fresh dataset under the experiment directory.
struct DatasetSource {
    std::string manifest;   // when non-empty, load this manifest
    sim::SimConfig simgen;  // otherwise generate with this configuration
};

struct SplitSpec {
    double train = 0.7;
    double val = 0.15;
    double test = 0.15;
};

/// Change-point baseline grid: every search x cost x penalty cell runs on the
/// z-scored test traces (scaling recorded in the summary).
struct CpdBaselineGrid {
    std::vector<std::string> searches{"bottom_up", "window"};
    std::vector<std::string> costs{"l1", "l2", "linear", "kernel"};
    std::vector<double> penalties{100, 500, 1000};
    int jump = 5;
    int window_width = 100;
    int min_size = 2;
};

/// Sliding-window classifier grid: a ridge row per window width plus a CART
/// row per width x depth x feature-budget cell. Training windows above the
/// cap are subsampled deterministically.
struct MlBaselineGrid {
    std::vector<int> windows{3, 5, 10, 15, 20};
    bool ridge = true;
    std::vector<int> cart_max_depths{10, -1};  // negative = unlimited
    std::vector<std::string> cart_max_features{"sqrt"};
    int max_train_windows = 40000;
};

/// Laptop-scale default network: three convolution widths, two GRU layers,
/// a small dense head. Channel and class counts are rewritten from the
/// dataset schema/catalog before any training.
nn::ModelConfig desk_model();

/// Everything one experiment needs. All randomness (generation, split,
/// weight init, batch order, tree feature draws, window subsampling) derives
/// from master_seed through named substreams; seeds nested inside the
/// generator or model blocks are overwritten by those substreams.
struct ExperimentConfig {
    std::uint64_t master_seed = 1;
    DatasetSource dataset;
    SplitSpec split;
    nn::ModelConfig model = desk_model();
    std::vector<std::string> ablations{"cnn_only", "rnn_only"};
    std::vector<double> tau_seconds{1, 3, 5};
    CpdBaselineGrid cpd;
    MlBaselineGrid ml;

    /// Fractions positive and summing to 1 (+-1e-6), all grids and the tau
    /// list non-empty, ablation and grid names resolvable, and exactly one
    /// dataset source in use (manifest path may be empty, never both broken).
    void validate() const;

    static ExperimentConfig from_json_file(const std::filesystem::path& path);
    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
};

// ---------------------------------------------------------------------------
// Experiment run
// ---------------------------------------------------------------------------

/// Artifact names under the experiment directory.
namespace artifact {
inline constexpr const char* dataset_dir = "dataset";
inline constexpr const char* split_csv = "split.csv";
inline constexpr const char* checkpoints_dir = "checkpoints";
inline constexpr const char* cpd_csv = "cpd_baselines.csv";
inline constexpr const char* ml_csv = "ml_baselines.csv";
inline constexpr const char* scores_csv = "model_scores.csv";
inline constexpr const char* timeline_csv = "timeline.csv";
inline constexpr const char* summary_json = "summary.json";
inline constexpr const char* timings_json = "timings.json";
} // namespace artifact

/// Stage names in execution order: dataset, split, models, cpd-baselines,
/// ml-baselines, model-scores, timeline, summary.
const std::vector<std::string>& stage_names();

struct RunOptions {
    bool resume = true;                     // skip stages whose artifacts exist
    int threads = 1;                        // worker pool for independent grid cells
    std::vector<std::string> only_stages;   // empty = all stages
    std::vector<std::string> force_stages;  // run even when artifacts exist
    std::ostream* log = nullptr;            // optional progress lines
};

struct RunReport {
    std::filesystem::path out_dir;
    std::vector<std::string> executed;  // stages that ran this call
    std::vector<std::string> skipped;   // stages satisfied by existing artifacts
    std::map<std::string, double> stage_seconds;
};

/// Run the full experiment: materialize the dataset, split it, train the
/// model plus its ablations, score the change-point and sliding-window
/// baseline grids, score every trained variant, and write the timeline and
/// summary reports. Stages whose artifacts already exist are skipped when
/// resuming, so deleting one artifact and re-running redoes only that stage.
/// A failing stage aborts with an error naming it. Single-threaded runs are
/// byte-reproducible: identical config and seed give identical CSV reports.
RunReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                         const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Hyper-parameter grid search
// ---------------------------------------------------------------------------

/// One scored configuration: change-point precision/recall/F1 per tolerance
/// plus macro classification precision/recall/F1 (12 numbers at three taus).
struct MetricRow {
    std::vector<double> cpd_precision;  // aligned with tau_seconds
    std::vector<double> cpd_recall;
    std::vector<double> cpd_f1;
    double class_precision = 0;
    double class_recall = 0;
    double class_f1 = 0;
};

/// Axes of the model grid. An empty axis keeps the base model's value. The
/// candidate count is the product of the non-empty axis sizes and must stay
/// within max_configs unless allow_large is set.
struct GridAxes {
    std::vector<int> gru_cells;                      // uniform cells per GRU layer
    std::vector<int> conv_filters;                   // uniform filters per conv layer
    std::vector<std::vector<int>> kernel_schedules;  // replaces the conv stack widths
    std::vector<double> learning_rates;
    int max_configs = 64;
    bool allow_large = false;
};

struct GridSearchConfig {
    ExperimentConfig base;
    GridAxes axes;

    static GridSearchConfig from_json_file(const std::filesystem::path& path);
    static GridSearchConfig from_json_text(const std::string& text);
};

struct GridRow {
    nn::ModelConfig config;
    bool is_default = false;  // the base model evaluated alongside the grid
    MetricRow metrics;        // scored on the validation (tuning) split
};

struct GridSearchReport {
    std::vector<GridRow> rows;  // ranked best-first
    int best_index = 0;
    int default_index = 0;
    std::filesystem::path csv_path;
};

/// Train and score every candidate on the tuning split, rank by macro
/// classification F1 (ties: change-point F1 at the 5 s tolerance, then the
/// candidate's canonical JSON text), and write grid_search.csv plus
/// grid_best.json contrasting the best candidate with the default model.
/// The default model is always evaluated and ranked with the candidates, so
/// the tuned best never scores below it on the tuning split.
GridSearchReport grid_search(const GridSearchConfig& config, const std::filesystem::path& out_dir,
                             const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Transfer experiment
// ---------------------------------------------------------------------------

/// Fine-tune a trained checkpoint on k disjoint small folds of a second
/// aircraft variant and compare against training from scratch on the same
/// folds, scoring both on a shared held-out reserve.
struct TransferConfig {
    std::string source_checkpoint;
    sim::SimConfig variant_b;  // defaults to the variant_b preset, 60 flights
    int folds = 5;             // >= 3
    int traces_per_fold = 5;
    int eval_reserve_min = 10;  // held-out traces required beyond the folds
    std::vector<double> tau_seconds{1, 3, 5};
    std::uint64_t master_seed = 1;
    int max_epochs = 40;  // budget for both fine-tuning and scratch training
    int patience = 10;
    double fine_tune_lr = 5e-4;

    void validate() const;
    static TransferConfig from_json_file(const std::filesystem::path& path);
    static TransferConfig from_json_text(const std::string& text);
};

struct TransferReport {
    std::vector<MetricRow> fine_tuned;  // per fold
    std::vector<MetricRow> scratch;     // per fold
    std::vector<bool> freeze_ok;        // frozen weights bit-identical, per fold
    MetricRow mean_fine_tuned;
    MetricRow mean_scratch;
    bool all_freeze_ok = false;
    std::filesystem::path csv_path;
};

/// Errors when folds < 3 or the variant-B dataset is smaller than
/// folds x traces_per_fold + eval_reserve_min. Fold assignment is a seeded
/// shuffle, deterministic in the master seed.
TransferReport transfer_experiment(const TransferConfig& config,
                                   const std::filesystem::path& out_dir,
                                   const RunOptions& options = {});

} // namespace statetrace::pipeline
