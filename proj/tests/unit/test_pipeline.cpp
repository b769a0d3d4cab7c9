#include "doctest.h"

#include "statetrace/io.hpp"
#include "statetrace/pipeline.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace statetrace;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kTinyExperimentJson = R"json({
  "master_seed": 3,
  "dataset": {"simgen": {"count": 10, "min_length": 200, "max_length": 2000,
                         "plan": {"min_commands": 3, "max_commands": 5}}},
  "split": {"train": 0.6, "val": 0.2, "test": 0.2},
  "model": {"conv_stack": [[6, 3]], "gru_stack": [8], "dense_hidden": 8,
            "batch_size": 4, "max_epochs": 6, "patience": 6, "learning_rate": 0.003},
  "ablations": ["cnn_only"],
  "tau_seconds": [1, 3, 5],
  "cpd": {"searches": ["bottom_up"], "costs": ["l2"], "penalties": [100]},
  "ml": {"windows": [3], "ridge": true, "cart_max_depths": [3],
         "cart_max_features": ["sqrt"], "max_train_windows": 5000}
})json";

fs::path tests_root() {
    static const fs::path root = fs::temp_directory_path() / "statetrace_pipeline_tests";
    return root;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const fs::path& path) {
    std::istringstream in(slurp(path));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

/// One completed tiny experiment shared by the tests below; built on first use.
struct Fixture {
    pipeline::ExperimentConfig cfg;
    fs::path dir;
    pipeline::RunReport first_run;
};

const Fixture& fixture() {
    static const Fixture fx = [] {
        Fixture f;
        f.cfg = pipeline::ExperimentConfig::from_json_text(kTinyExperimentJson);
        f.dir = tests_root() / "exp";
        fs::remove_all(f.dir);
        f.first_run = pipeline::run_experiment(f.cfg, f.dir);
        return f;
    }();
    return fx;
}

std::string fixture_manifest() {
    return (fixture().dir / pipeline::artifact::dataset_dir / "manifest.json").string();
}

} // namespace

TEST_CASE("experiment config merges partial blocks onto defaults and validates") {
    const auto cfg = pipeline::ExperimentConfig::from_json_text(kTinyExperimentJson);
    CHECK(cfg.master_seed == 3);
    CHECK(cfg.model.conv_stack == std::vector<nn::ConvSpec>{{6, 3}});
    CHECK(cfg.model.gru_stack == std::vector<int>{8});
    CHECK(cfg.model.batch_size == 4);
    CHECK(cfg.ablations == std::vector<std::string>{"cnn_only"});
    CHECK(cfg.cpd.searches == std::vector<std::string>{"bottom_up"});
    CHECK(cfg.ml.windows == std::vector<int>{3});
    CHECK(cfg.dataset.simgen.count == 10);

    // A partial model block only overrides the named fields.
    const auto partial = pipeline::ExperimentConfig::from_json_text(R"({"model": {"batch_size": 8}})");
    CHECK(partial.model.batch_size == 8);
    CHECK(partial.model.conv_stack == pipeline::desk_model().conv_stack);
    CHECK(partial.model.gru_stack == pipeline::desk_model().gru_stack);
    CHECK(partial.model.dense_hidden == 64);

    // Default construction is the laptop-scale experiment.
    const pipeline::ExperimentConfig defaults;
    CHECK(defaults.model.conv_stack == std::vector<nn::ConvSpec>{{24, 3}, {24, 5}, {24, 9}});
    CHECK(defaults.cpd.searches.size() == 2);
    CHECK(defaults.cpd.costs.size() == 4);
    CHECK(defaults.cpd.penalties == std::vector<double>{100, 500, 1000});
    CHECK(defaults.ml.windows == std::vector<int>{3, 5, 10, 15, 20});
    CHECK(defaults.ml.max_train_windows == 40000);
    CHECK(defaults.tau_seconds == std::vector<double>{1, 3, 5});

    // Serialized text parses back to the same configuration.
    const auto round = pipeline::ExperimentConfig::from_json_text(cfg.to_json_text());
    CHECK(round.to_json_text() == cfg.to_json_text());

    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(R"({"masterr_seed": 1})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(R"({"model": {"dense_hiden": 4}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(
                        R"({"split": {"train": 0.5, "val": 0.1, "test": 0.1}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(
                        R"({"dataset": {"manifest": "x.json", "simgen": {"count": 5}}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(R"({"tau_seconds": []})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(R"({"tau_seconds": [5, 3]})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(
                        R"({"ablations": ["cnn_only", "cnn_only"]})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(R"({"ablations": ["hybrid"]})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(
                        R"({"cpd": {"searches": []}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(pipeline::ExperimentConfig::from_json_text(
                        R"({"ml": {"ridge": false, "cart_max_depths": []}})"),
                    std::invalid_argument);
}

TEST_CASE("a tiny experiment writes every artifact with the documented schemas") {
    const Fixture& fx = fixture();
    CHECK(fx.first_run.executed == pipeline::stage_names());
    CHECK(fx.first_run.skipped.empty());

    CHECK(fs::exists(fx.dir / pipeline::artifact::dataset_dir / "manifest.json"));
    CHECK(fs::exists(fx.dir / pipeline::artifact::split_csv));
    CHECK(fs::exists(fx.dir / pipeline::artifact::checkpoints_dir / "hybrid.ckpt"));
    CHECK(fs::exists(fx.dir / pipeline::artifact::checkpoints_dir / "cnn_only.ckpt"));
    CHECK(fs::exists(fx.dir / pipeline::artifact::cpd_csv));
    CHECK(fs::exists(fx.dir / pipeline::artifact::ml_csv));
    CHECK(fs::exists(fx.dir / pipeline::artifact::scores_csv));
    CHECK(fs::exists(fx.dir / pipeline::artifact::timeline_csv));
    CHECK(fs::exists(fx.dir / pipeline::artifact::summary_json));
    CHECK(fs::exists(fx.dir / pipeline::artifact::timings_json));

    // Golden header strings: report schemas are stable across runs.
    CHECK(lines_of(fx.dir / pipeline::artifact::split_csv).at(0) == "trace_id,role");
    CHECK(lines_of(fx.dir / pipeline::artifact::cpd_csv).at(0) ==
          "search,cost,penalty,tau_seconds,precision,recall,f1");
    CHECK(lines_of(fx.dir / pipeline::artifact::ml_csv).at(0) ==
          "w,classifier,max_depth,max_features,alpha,precision,recall,f1");
    CHECK(lines_of(fx.dir / pipeline::artifact::scores_csv).at(0) ==
          "variant,tau_seconds,cpd_precision,cpd_recall,cpd_f1,class_precision,class_recall,"
          "class_f1");
    CHECK(lines_of(fx.dir / pipeline::artifact::timeline_csv).at(0) ==
          "trace_id,t,time_seconds,truth,predicted");

    // Split record: one row per trace, with the rounded 6/2/2 partition.
    const auto split_lines = lines_of(fx.dir / pipeline::artifact::split_csv);
    CHECK(split_lines.size() == 11);
    int train = 0, val = 0, test = 0;
    for (std::size_t i = 1; i < split_lines.size(); ++i) {
        if (split_lines[i].ends_with(",train")) ++train;
        if (split_lines[i].ends_with(",val")) ++val;
        if (split_lines[i].ends_with(",test")) ++test;
    }
    CHECK(train == 6);
    CHECK(val == 2);
    CHECK(test == 2);

    // One change-point row per grid cell and tolerance; one classifier row
    // per ridge/CART cell; one score row per variant and tolerance.
    CHECK(lines_of(fx.dir / pipeline::artifact::cpd_csv).size() == 1 + 1 * 1 * 1 * 3);
    CHECK(lines_of(fx.dir / pipeline::artifact::ml_csv).size() == 1 + 1 * (1 + 1));
    CHECK(lines_of(fx.dir / pipeline::artifact::scores_csv).size() == 1 + 2 * 3);

    // The timeline covers exactly the test traces, full length each.
    const Dataset data = load_dataset(fx.dir / pipeline::artifact::dataset_dir / "manifest.json");
    const auto timeline = lines_of(fx.dir / pipeline::artifact::timeline_csv);
    long expected_rows = 0;
    std::vector<std::string> test_ids;
    for (std::size_t i = 1; i < split_lines.size(); ++i)
        if (split_lines[i].ends_with(",test"))
            test_ids.push_back(split_lines[i].substr(0, split_lines[i].find(',')));
    for (const auto& item : data.items)
        for (const auto& id : test_ids)
            if (item.id == id) expected_rows += item.trace.length();
    CHECK(static_cast<long>(timeline.size()) == 1 + expected_rows);
}

TEST_CASE("the summary reports best baselines and the improvement ratio") {
    const Fixture& fx = fixture();
    const json summary = json::parse(slurp(fx.dir / pipeline::artifact::summary_json));
    CHECK(summary.at("dataset").at("n_traces") == 10);
    CHECK(summary.at("headline_tau_seconds") == 5.0);
    CHECK(summary.at("models").contains("hybrid"));
    CHECK(summary.at("models").contains("cnn_only"));

    // Best classifier row must match the maximum F1 in the table.
    const auto ml_lines = lines_of(fx.dir / pipeline::artifact::ml_csv);
    double best_ml = -1;
    for (std::size_t i = 1; i < ml_lines.size(); ++i) {
        const auto pos = ml_lines[i].rfind(',');
        best_ml = std::max(best_ml, std::stod(ml_lines[i].substr(pos + 1)));
    }
    CHECK(summary.at("best_ml_baseline").at("f1").get<double>() == doctest::Approx(best_ml));

    // improvement = hybrid F1 / best baseline F1 - 1, from the same tables.
    const double hybrid_f1 = summary.at("models").at("hybrid").at("class_f1").get<double>();
    if (best_ml > 0) {
        CHECK(summary.at("improvement").at("class_f1").get<double>() ==
              doctest::Approx(hybrid_f1 / best_ml - 1.0).epsilon(1e-9));
    } else {
        CHECK(summary.at("improvement").at("class_f1").is_null());
    }

    const double hybrid_cpd5 =
        summary.at("models").at("hybrid").at("cpd").at(2).at("f1").get<double>();
    const double best_cpd5 = summary.at("best_cpd_baseline").at(2).at("f1").get<double>();
    if (best_cpd5 > 0) {
        CHECK(summary.at("improvement").at("cpd_f1").get<double>() ==
              doctest::Approx(hybrid_cpd5 / best_cpd5 - 1.0).epsilon(1e-9));
    } else {
        CHECK(summary.at("improvement").at("cpd_f1").is_null());
    }
}

TEST_CASE("resume skips completed stages and redoes only what is missing") {
    const Fixture& fx = fixture();

    const auto second = pipeline::run_experiment(fx.cfg, fx.dir);
    CHECK(second.executed.empty());
    CHECK(second.skipped == pipeline::stage_names());

    // Deleting the checkpoints and resuming retrains only the model stage.
    fs::remove_all(fx.dir / pipeline::artifact::checkpoints_dir);
    const auto third = pipeline::run_experiment(fx.cfg, fx.dir);
    CHECK(third.executed == std::vector<std::string>{"models"});
    CHECK(third.skipped.size() == 7);
    CHECK(fs::exists(fx.dir / pipeline::artifact::checkpoints_dir / "hybrid.ckpt"));

    // Deleting one report redoes only that stage.
    fs::remove(fx.dir / pipeline::artifact::scores_csv);
    const auto fourth = pipeline::run_experiment(fx.cfg, fx.dir);
    CHECK(fourth.executed == std::vector<std::string>{"model-scores"});
}

TEST_CASE("stage subsets run on demand against an existing dataset") {
    pipeline::ExperimentConfig cfg = fixture().cfg;
    cfg.dataset.manifest = fixture_manifest();
    const fs::path dir = tests_root() / "stages";
    fs::remove_all(dir);

    pipeline::RunOptions opts;
    opts.only_stages = {"dataset", "split"};
    const auto first = pipeline::run_experiment(cfg, dir, opts);
    // The external manifest already satisfies the dataset stage.
    CHECK(first.executed == std::vector<std::string>{"split"});
    CHECK(first.skipped == std::vector<std::string>{"dataset"});
    CHECK(fs::exists(dir / pipeline::artifact::split_csv));
    CHECK_FALSE(fs::exists(dir / pipeline::artifact::cpd_csv));

    opts.only_stages = {"cpd-baselines"};
    const auto second = pipeline::run_experiment(cfg, dir, opts);
    CHECK(second.executed == std::vector<std::string>{"cpd-baselines"});
    CHECK(fs::exists(dir / pipeline::artifact::cpd_csv));

    pipeline::RunOptions bad;
    bad.only_stages = {"modelz"};
    CHECK_THROWS_AS(pipeline::run_experiment(cfg, dir, bad), std::invalid_argument);
}

TEST_CASE("a failing stage reports its name") {
    pipeline::ExperimentConfig cfg = fixture().cfg;
    cfg.dataset.manifest = (tests_root() / "missing" / "manifest.json").string();
    const fs::path dir = tests_root() / "fail";
    fs::remove_all(dir);
    try {
        pipeline::run_experiment(cfg, dir);
        FAIL("expected the dataset stage to fail");
    } catch (const std::runtime_error& e) {
        const std::string what = e.what();
        CHECK(what.find("stage dataset failed") != std::string::npos);
        CHECK(what.find("manifest") != std::string::npos);
    }
}

TEST_CASE("single-threaded reruns and a threaded rerun are byte-identical") {
    const Fixture& fx = fixture();
    const fs::path d1 = tests_root() / "rerun1";
    const fs::path d2 = tests_root() / "rerun2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    pipeline::run_experiment(fx.cfg, d1);
    pipeline::RunOptions threaded;
    threaded.threads = 2;
    pipeline::run_experiment(fx.cfg, d2, threaded);

    for (const char* name :
         {pipeline::artifact::split_csv, pipeline::artifact::cpd_csv, pipeline::artifact::ml_csv,
          pipeline::artifact::scores_csv, pipeline::artifact::timeline_csv,
          pipeline::artifact::summary_json}) {
        CAPTURE(name);
        const std::string a = slurp(fx.dir / name);
        CHECK(a == slurp(d1 / name));
        CHECK(a == slurp(d2 / name));
    }
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("grid search ranks every candidate and includes the default exactly once") {
    pipeline::GridSearchConfig cfg;
    cfg.base = fixture().cfg;
    cfg.base.dataset.manifest = fixture_manifest();
    cfg.axes.gru_cells = {6, 8};
    cfg.axes.learning_rates = {0.001, 0.003};
    const fs::path dir = tests_root() / "grid";
    fs::remove_all(dir);

    const auto report = pipeline::grid_search(cfg, dir);
    // The (8 cells, 0.003) candidate equals the base model, so no extra row.
    CHECK(report.rows.size() == 4);
    CHECK(report.best_index == 0);
    int defaults = 0;
    for (const auto& row : report.rows) defaults += row.is_default ? 1 : 0;
    CHECK(defaults == 1);
    CHECK(report.rows[static_cast<std::size_t>(report.default_index)].is_default);
    for (std::size_t i = 1; i < report.rows.size(); ++i)
        CHECK(report.rows[i - 1].metrics.class_f1 >= report.rows[i].metrics.class_f1);

    const auto lines = lines_of(report.csv_path);
    CHECK(lines.at(0) ==
          "rank,is_default,gru_cells,conv_filters,kernels,learning_rate,"
          "cpd_precision_tau1s,cpd_recall_tau1s,cpd_f1_tau1s,"
          "cpd_precision_tau3s,cpd_recall_tau3s,cpd_f1_tau3s,"
          "cpd_precision_tau5s,cpd_recall_tau5s,cpd_f1_tau5s,"
          "class_precision,class_recall,class_f1");
    CHECK(lines.size() == 5);
    CHECK(lines.at(1).rfind("1,", 0) == 0);

    const json best = json::parse(slurp(dir / "grid_best.json"));
    CHECK(best.at("tuned_at_least_default").get<bool>());
    CHECK(best.at("candidates") == 4);

    // The cap rejects oversized grids unless explicitly lifted.
    pipeline::GridSearchConfig capped = cfg;
    capped.axes.max_configs = 3;
    try {
        pipeline::grid_search(capped, tests_root() / "grid_capped");
        FAIL("expected the cap to reject a 4-candidate grid");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("cap") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("transfer scores fine-tuning against scratch and verifies the freeze contract") {
    pipeline::TransferConfig cfg;
    cfg.source_checkpoint =
        (fixture().dir / pipeline::artifact::checkpoints_dir / "hybrid.ckpt").string();
    cfg.variant_b.count = 12;
    cfg.variant_b.min_length = 200;
    cfg.variant_b.max_length = 2000;
    cfg.variant_b.plan.min_commands = 3;
    cfg.variant_b.plan.max_commands = 5;
    cfg.variant_b.variant = "variant_b";
    cfg.folds = 3;
    cfg.traces_per_fold = 2;
    cfg.eval_reserve_min = 4;
    cfg.max_epochs = 2;
    cfg.patience = 2;
    cfg.master_seed = 5;
    const fs::path dir = tests_root() / "transfer";
    fs::remove_all(dir);

    const auto report = pipeline::transfer_experiment(cfg, dir);
    CHECK(report.fine_tuned.size() == 3);
    CHECK(report.scratch.size() == 3);
    CHECK(report.freeze_ok == std::vector<bool>{true, true, true});
    CHECK(report.all_freeze_ok);

    double mean_ft = 0;
    for (const auto& m : report.fine_tuned) mean_ft += m.class_f1;
    CHECK(report.mean_fine_tuned.class_f1 == doctest::Approx(mean_ft / 3).epsilon(1e-12));

    const auto lines = lines_of(report.csv_path);
    CHECK(lines.size() == 1 + 3 * 2 + 2);
    CHECK(lines.at(0).rfind("fold,method,freeze_ok,cpd_precision_tau1s", 0) == 0);
    CHECK(lines.back().rfind("mean,scratch,", 0) == 0);

    const json summary = json::parse(slurp(dir / "transfer_summary.json"));
    CHECK(summary.at("all_freeze_ok").get<bool>());
    CHECK(summary.at("eval_traces") == 6);
    CHECK(summary.contains("fine_tune_at_least_scratch"));

    // Config validation: too few folds, and a dataset too small for the folds.
    pipeline::TransferConfig bad = cfg;
    bad.folds = 2;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    // Reuses the already generated variant-B dataset in the same directory.
    pipeline::TransferConfig small = cfg;
    small.traces_per_fold = 5;
    try {
        pipeline::transfer_experiment(small, dir);
        FAIL("expected the reserve check to reject a 12-trace dataset");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("need at least") != std::string::npos);
    }
    fs::remove_all(dir);
}
