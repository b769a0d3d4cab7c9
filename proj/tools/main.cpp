#include "statetrace/eval.hpp"
#include "statetrace/io.hpp"
#include "statetrace/pipeline.hpp"
#include "statetrace/sim.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using nlohmann::json;
namespace fs = std::filesystem;
using namespace statetrace;

struct CommonArgs {
    std::string config;
    std::string out;
    int threads = 1;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, CommonArgs& args, const std::string& default_out,
                bool config_required = true) {
    auto* config = sub->add_option("--config", args.config, "JSON configuration file");
    if (config_required) config->required();
    args.out = default_out;
    sub->add_option("--out", args.out, "output directory");
    sub->add_option("--threads", args.threads, "worker threads for independent grid cells")
        ->check(CLI::PositiveNumber);
    args.seed.reset();
    sub->add_option("--seed", args.seed, "override the configuration's master seed");
}

pipeline::RunOptions run_options(const CommonArgs& args) {
    pipeline::RunOptions opts;
    opts.threads = args.threads;
    opts.log = &std::cerr;
    return opts;
}

pipeline::ExperimentConfig load_experiment(const CommonArgs& args) {
    pipeline::ExperimentConfig cfg = pipeline::ExperimentConfig::from_json_file(args.config);
    if (args.seed) cfg.master_seed = *args.seed;
    return cfg;
}

void print_stage_report(const pipeline::RunReport& report) {
    json j;
    j["out_dir"] = report.out_dir.string();
    j["executed"] = report.executed;
    j["skipped"] = report.skipped;
    std::cout << j.dump(2) << "\n";
}

void run_stages(const CommonArgs& args, const std::vector<std::string>& only,
                const std::vector<std::string>& force = {}) {
    pipeline::ExperimentConfig cfg = load_experiment(args);
    pipeline::RunOptions opts = run_options(args);
    opts.only_stages = only;
    opts.force_stages = force;
    print_stage_report(pipeline::run_experiment(cfg, args.out, opts));
}

/// Predicted sequences can mask trailing zero-padded steps; replace those
/// labels with the last confidently predicted state so every row of the
/// output file carries a state name.
LabelSequence fill_masked_tail(LabelSequence seq) {
    int last = 0;
    for (std::size_t t = 0; t < seq.labels.size(); ++t) {
        if (seq.mask[t])
            last = seq.labels[t];
        else
            seq.labels[t] = last;
    }
    return seq;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"state inference experiments for black-box control systems"};
    app.require_subcommand(1);

    CommonArgs args;

    // --- simgen ---
    auto* simgen = app.add_subcommand("simgen", "generate a labeled flight dataset");
    add_common(simgen, args, "out/dataset");
    simgen->callback([&] {
        sim::SimConfig cfg = sim::SimConfig::from_json_file(args.config);
        if (args.seed) cfg.seed = *args.seed;
        const Dataset ds = sim::generate_dataset(cfg, args.out);
        json j;
        j["manifest"] = (fs::path(args.out) / "manifest.json").string();
        j["traces"] = ds.size();
        j["states"] = ds.catalog.states;
        std::cout << j.dump(2) << "\n";
    });

    // --- train ---
    auto* train = app.add_subcommand("train", "materialize data, split it, and train the models");
    add_common(train, args, "out/experiment");
    train->callback([&] { run_stages(args, {"dataset", "split", "models"}); });

    // --- predict ---
    auto* predict = app.add_subcommand("predict", "label one flight CSV with a trained model");
    std::string model_path, trace_path, pred_out;
    predict->add_option("--model", model_path, "model checkpoint")->required();
    predict->add_option("--trace", trace_path, "flight CSV to label")->required();
    pred_out = "predictions.csv";
    predict->add_option("--out", pred_out, "output CSV path");
    predict->callback([&] {
        const nn::ModelCheckpoint ckpt = nn::ModelCheckpoint::load(model_path);
        const FlightCsv flight = read_flight_csv(trace_path, ckpt.schema, ckpt.sample_period);
        const LabelSequence pred = fill_masked_tail(nn::predict_states(ckpt, flight.trace));
        write_flight_csv(pred_out, flight.trace, ckpt.catalog, pred);
        json j;
        j["out"] = pred_out;
        j["steps"] = flight.trace.length();
        j["change_points"] = extract_change_points(pred).change_times().size();
        std::cout << j.dump(2) << "\n";
    });

    // --- eval ---
    auto* evalcmd =
        app.add_subcommand("eval", "score predicted label files against a labeled dataset");
    std::string data_manifest, pred_dir;
    std::vector<double> taus{1, 3, 5};
    evalcmd->add_option("--data", data_manifest, "dataset manifest with ground truth")->required();
    evalcmd->add_option("--pred", pred_dir, "directory of <trace_id>.csv prediction files")
        ->required();
    evalcmd->add_option("--tau", taus, "tolerance margins in seconds");
    evalcmd->callback([&] {
        const Dataset ds = load_dataset(data_manifest);
        std::vector<LabelSequence> truths, preds;
        std::vector<std::vector<int>> truth_times, pred_times;
        for (const Dataset::Item& item : ds.items) {
            const fs::path file = fs::path(pred_dir) / (item.id + ".csv");
            const FlightCsv flight = read_flight_csv(file, ds.schema, ds.sample_period);
            if (flight.state_names.empty())
                throw std::runtime_error("prediction file has no state column: " + file.string());
            if (static_cast<int>(flight.state_names.size()) != item.trace.length())
                throw std::runtime_error("prediction length mismatch for trace " + item.id);
            LabelSequence p;
            for (const std::string& name : flight.state_names)
                p.labels.push_back(ds.catalog.id_of(name));
            p.mask.assign(p.labels.size(), 1);
            truths.push_back(expand_annotation(item.annotation, item.trace.length()));
            truth_times.push_back(item.annotation.change_times());
            pred_times.push_back(extract_change_points(p).change_times());
            preds.push_back(std::move(p));
        }
        const eval::ClassificationReport cr = eval::classification_report(truths, preds, ds.catalog);
        json j;
        j["classification"] = {{"macro_precision", cr.macro_precision},
                               {"macro_recall", cr.macro_recall},
                               {"macro_f1", cr.macro_f1}};
        json cpd = json::array();
        for (double tau : taus) {
            const auto margin = eval::ToleranceMargin::from_seconds(tau, ds.sample_period);
            long tp = 0, fp = 0, fn = 0;
            for (std::size_t i = 0; i < truth_times.size(); ++i) {
                const auto s = eval::cpd_score_times(truth_times[i], pred_times[i], margin);
                tp += s.tp;
                fp += s.fp;
                fn += s.fn;
            }
            const auto s = eval::ScoreReport::from_counts(tp, fp, fn);
            cpd.push_back({{"tau_seconds", tau},
                           {"precision", s.precision},
                           {"recall", s.recall},
                           {"f1", s.f1}});
        }
        j["cpd"] = cpd;
        std::cout << j.dump(2) << "\n";
    });

    // --- cpd-baseline ---
    auto* cpdb = app.add_subcommand("cpd-baseline", "run the change-point baseline grid");
    add_common(cpdb, args, "out/experiment");
    cpdb->callback([&] { run_stages(args, {"dataset", "split", "cpd-baselines"}); });

    // --- ml-baseline ---
    auto* mlb = app.add_subcommand("ml-baseline", "run the sliding-window classifier grid");
    add_common(mlb, args, "out/experiment");
    mlb->callback([&] { run_stages(args, {"dataset", "split", "ml-baselines"}); });

    // --- grid-search ---
    auto* grid = app.add_subcommand("grid-search", "train and rank a model configuration grid");
    bool allow_large = false;
    add_common(grid, args, "out/grid");
    grid->add_flag("--allow-large", allow_large, "lift the configuration-count cap");
    grid->callback([&] {
        pipeline::GridSearchConfig cfg = pipeline::GridSearchConfig::from_json_file(args.config);
        if (args.seed) cfg.base.master_seed = *args.seed;
        if (allow_large) cfg.axes.allow_large = true;
        const pipeline::GridSearchReport report =
            pipeline::grid_search(cfg, args.out, run_options(args));
        const pipeline::GridRow& best = report.rows.front();
        json j;
        j["csv"] = report.csv_path.string();
        j["candidates"] = static_cast<int>(report.rows.size());
        j["best"] = {{"model", json::parse(best.config.to_json_text())},
                     {"class_f1", best.metrics.class_f1}};
        j["default_rank"] = report.default_index + 1;
        std::cout << j.dump(2) << "\n";
    });

    // --- transfer ---
    auto* transfer =
        app.add_subcommand("transfer", "fine-tune on a second variant vs training from scratch");
    std::string source_override;
    add_common(transfer, args, "out/transfer");
    transfer->add_option("--model", source_override, "override the source checkpoint path");
    transfer->callback([&] {
        pipeline::TransferConfig cfg = pipeline::TransferConfig::from_json_file(args.config);
        if (args.seed) cfg.master_seed = *args.seed;
        if (!source_override.empty()) cfg.source_checkpoint = source_override;
        const pipeline::TransferReport report =
            pipeline::transfer_experiment(cfg, args.out, run_options(args));
        json j;
        j["csv"] = report.csv_path.string();
        j["mean_fine_tuned_class_f1"] = report.mean_fine_tuned.class_f1;
        j["mean_scratch_class_f1"] = report.mean_scratch.class_f1;
        j["all_freeze_ok"] = report.all_freeze_ok;
        std::cout << j.dump(2) << "\n";
    });

    // --- report ---
    auto* reportcmd = app.add_subcommand(
        "report", "run any missing stages and rebuild the score tables and summary");
    add_common(reportcmd, args, "out/experiment");
    reportcmd->callback([&] {
        run_stages(args, {}, {"model-scores", "timeline", "summary"});
        std::ifstream in(fs::path(args.out) / pipeline::artifact::summary_json);
        std::cout << in.rdbuf();
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
