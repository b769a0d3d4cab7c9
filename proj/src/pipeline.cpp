#include "statetrace/pipeline.hpp"

#include "statetrace/baselines.hpp"
#include "statetrace/common.hpp"
#include "statetrace/cpd.hpp"
#include "statetrace/eval.hpp"
#include "statetrace/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

namespace statetrace::pipeline {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Formatting and file helpers
// ---------------------------------------------------------------------------

/// Fixed six-decimal formatting so reports are byte-reproducible.
std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

/// Shortest %g formatting for exact values such as penalties and tolerances.
std::string fmtg(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::string join_cells(const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) line += ',';
        line += cells[i];
    }
    return line;
}

std::string join_ints(const std::vector<int>& v, char sep) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += sep;
        s += std::to_string(v[i]);
    }
    return s;
}

/// Write via a temporary file and rename, so a killed run never leaves a
/// truncated artifact that a resume would mistake for a finished stage.
void write_text_file(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, path);
}

std::string make_csv(const std::string& header, const std::vector<std::string>& rows) {
    std::string text = header + "\n";
    for (const std::string& r : rows) {
        text += r;
        text += '\n';
    }
    return text;
}

/// Minimal reader for the CSVs this module writes (no quoting needed: none
/// of the emitted cells contain commas).
std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.emplace_back();
        rows.push_back(std::move(cells));
    }
    return rows;
}

std::unordered_map<std::string, int> column_index(const std::vector<std::string>& header) {
    std::unordered_map<std::string, int> idx;
    for (std::size_t i = 0; i < header.size(); ++i) idx[header[i]] = static_cast<int>(i);
    return idx;
}

/// Run fn(0..n-1) on a small worker pool. Each index writes only its own
/// output slot, so the aggregate is identical for any thread count.
void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const int workers = std::min(threads, n);
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

void check_keys(const json& j, const std::string& where,
                std::initializer_list<std::string_view> allowed) {
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (std::string_view a : allowed)
            if (key == a) {
                known = true;
                break;
            }
        if (!known) throw std::invalid_argument("unknown field in " + where + ": " + key);
    }
}

std::string read_file(const fs::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(std::string("cannot open ") + what + ": " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json sim_config_to_json(const sim::SimConfig& s) {
    json plan;
    plan["min_commands"] = s.plan.min_commands;
    plan["max_commands"] = s.plan.max_commands;
    plan["state_budget"] = s.plan.state_budget;
    json j;
    j["count"] = s.count;
    j["seed"] = s.seed;
    j["min_length"] = s.min_length;
    j["max_length"] = s.max_length;
    j["variant"] = s.variant;
    j["granularity"] = sim::to_string(s.granularity);
    j["param_jitter"] = s.param_jitter;
    j["noise_scale"] = s.noise_scale;
    j["wind_scale"] = s.wind_scale;
    j["lag_min"] = s.lag_min;
    j["lag_max"] = s.lag_max;
    j["plan"] = plan;
    return j;
}

json metric_row_to_json(const MetricRow& m, const std::vector<double>& taus) {
    json j;
    j["class_precision"] = m.class_precision;
    j["class_recall"] = m.class_recall;
    j["class_f1"] = m.class_f1;
    json cpd = json::array();
    for (std::size_t i = 0; i < taus.size(); ++i) {
        cpd.push_back({{"tau_seconds", taus[i]},
                       {"precision", m.cpd_precision[i]},
                       {"recall", m.cpd_recall[i]},
                       {"f1", m.cpd_f1[i]}});
    }
    j["cpd"] = cpd;
    return j;
}

// ---------------------------------------------------------------------------
// Metric helpers
// ---------------------------------------------------------------------------

std::vector<std::string> metric_headers(const std::vector<double>& taus) {
    std::vector<std::string> h;
    for (double tau : taus)
        for (const char* p : {"precision", "recall", "f1"})
            h.push_back(std::string("cpd_") + p + "_tau" + fmtg(tau) + "s");
    h.emplace_back("class_precision");
    h.emplace_back("class_recall");
    h.emplace_back("class_f1");
    return h;
}

std::vector<std::string> metric_cells(const MetricRow& m) {
    std::vector<std::string> cells;
    for (std::size_t i = 0; i < m.cpd_f1.size(); ++i) {
        cells.push_back(fmt6(m.cpd_precision[i]));
        cells.push_back(fmt6(m.cpd_recall[i]));
        cells.push_back(fmt6(m.cpd_f1[i]));
    }
    cells.push_back(fmt6(m.class_precision));
    cells.push_back(fmt6(m.class_recall));
    cells.push_back(fmt6(m.class_f1));
    return cells;
}

/// Index of the 5 s tolerance used for tie-breaks and headline comparisons;
/// falls back to the largest tolerance when 5 s is not in the list.
std::size_t headline_tau_index(const std::vector<double>& taus) {
    for (std::size_t i = 0; i < taus.size(); ++i)
        if (taus[i] == 5.0) return i;
    return taus.size() - 1;
}

/// Score one trained model on a labeled dataset: pooled macro classification
/// metrics over time steps plus pooled change-point metrics per tolerance.
MetricRow score_checkpoint(const nn::ModelCheckpoint& ckpt, const Dataset& data,
                           const std::vector<double>& taus) {
    const std::vector<LabelSequence> preds = nn::predict_states(ckpt, data);
    std::vector<LabelSequence> truths;
    truths.reserve(data.items.size());
    for (const Dataset::Item& item : data.items)
        truths.push_back(expand_annotation(item.annotation, item.trace.length()));

    MetricRow row;
    const eval::ClassificationReport cr = eval::classification_report(truths, preds, data.catalog);
    row.class_precision = cr.macro_precision;
    row.class_recall = cr.macro_recall;
    row.class_f1 = cr.macro_f1;

    std::vector<std::vector<int>> pred_times(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i)
        pred_times[i] = extract_change_points(preds[i]).change_times();

    for (double tau : taus) {
        const auto margin = eval::ToleranceMargin::from_seconds(tau, data.sample_period);
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const auto s = eval::cpd_score_times(data.items[i].annotation.change_times(),
                                                 pred_times[i], margin);
            tp += s.tp;
            fp += s.fp;
            fn += s.fn;
        }
        const auto s = eval::ScoreReport::from_counts(tp, fp, fn);
        row.cpd_precision.push_back(s.precision);
        row.cpd_recall.push_back(s.recall);
        row.cpd_f1.push_back(s.f1);
    }
    return row;
}

MetricRow mean_metric_rows(const std::vector<MetricRow>& rows) {
    MetricRow mean;
    if (rows.empty()) return mean;
    const std::size_t nt = rows.front().cpd_f1.size();
    mean.cpd_precision.assign(nt, 0.0);
    mean.cpd_recall.assign(nt, 0.0);
    mean.cpd_f1.assign(nt, 0.0);
    for (const MetricRow& r : rows) {
        for (std::size_t i = 0; i < nt; ++i) {
            mean.cpd_precision[i] += r.cpd_precision[i];
            mean.cpd_recall[i] += r.cpd_recall[i];
            mean.cpd_f1[i] += r.cpd_f1[i];
        }
        mean.class_precision += r.class_precision;
        mean.class_recall += r.class_recall;
        mean.class_f1 += r.class_f1;
    }
    const double k = static_cast<double>(rows.size());
    for (std::size_t i = 0; i < nt; ++i) {
        mean.cpd_precision[i] /= k;
        mean.cpd_recall[i] /= k;
        mean.cpd_f1[i] /= k;
    }
    mean.class_precision /= k;
    mean.class_recall /= k;
    mean.class_f1 /= k;
    return mean;
}

} // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

nn::ModelConfig desk_model() {
    nn::ModelConfig c;
    c.conv_stack = {{24, 3}, {24, 5}, {24, 9}};
    c.gru_stack = {64, 64};
    c.dense_hidden = 64;
    c.leaky_alpha = 0.3;
    c.n_channels = 10;
    c.n_classes = 11;
    c.learning_rate = 1e-3;
    c.batch_size = 16;
    c.max_epochs = 80;
    c.patience = 15;
    c.seed = 1;
    c.variant = nn::ModelVariant::Hybrid;
    return c;
}

void ExperimentConfig::validate() const {
    if (split.train <= 0 || split.val <= 0 || split.test <= 0)
        throw std::invalid_argument("split fractions must all be positive");
    if (std::abs(split.train + split.val + split.test - 1.0) > 1e-6)
        throw std::invalid_argument("split fractions must sum to 1");
    model.validate();
    std::vector<std::string> seen{"hybrid"};
    for (const std::string& name : ablations) {
        nn::variant_from_string(name);  // throws on unknown names
        if (std::find(seen.begin(), seen.end(), name) != seen.end())
            throw std::invalid_argument("duplicate model variant in ablations: " + name);
        seen.push_back(name);
    }
    if (tau_seconds.empty()) throw std::invalid_argument("tau_seconds must not be empty");
    for (std::size_t i = 0; i < tau_seconds.size(); ++i) {
        if (tau_seconds[i] <= 0) throw std::invalid_argument("tolerances must be positive");
        if (i > 0 && tau_seconds[i] <= tau_seconds[i - 1])
            throw std::invalid_argument("tolerances must be strictly increasing");
    }
    if (cpd.searches.empty() || cpd.costs.empty() || cpd.penalties.empty())
        throw std::invalid_argument("change-point baseline grid must not be empty");
    for (const std::string& s : cpd.searches) cpd::search_method_from_string(s);
    for (const std::string& c : cpd.costs) cpd::cost_kind_from_string(c);
    for (double beta : cpd.penalties)
        if (beta <= 0) throw std::invalid_argument("penalties must be positive");
    if (cpd.jump < 1) throw std::invalid_argument("jump must be >= 1");
    if (cpd.window_width < 2) throw std::invalid_argument("window_width must be >= 2");
    if (cpd.min_size < 1) throw std::invalid_argument("min_size must be >= 1");
    if (ml.windows.empty()) throw std::invalid_argument("window width list must not be empty");
    for (int w : ml.windows)
        if (w < 1) throw std::invalid_argument("window widths must be >= 1");
    const bool has_cart = !ml.cart_max_depths.empty() && !ml.cart_max_features.empty();
    if (!ml.ridge && !has_cart)
        throw std::invalid_argument("classical baseline grid must include at least one classifier");
    for (const std::string& mf : ml.cart_max_features) baselines::max_features_from_string(mf);
    if (ml.max_train_windows < 1)
        throw std::invalid_argument("max_train_windows must be >= 1");
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    const json j = json::parse(text);
    if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
    check_keys(j, "experiment config",
               {"master_seed", "dataset", "split", "model", "ablations", "tau_seconds", "cpd",
                "ml"});
    ExperimentConfig c;
    if (j.contains("master_seed")) c.master_seed = j.at("master_seed").get<std::uint64_t>();
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_keys(d, "dataset block", {"manifest", "simgen"});
        if (d.contains("manifest") && d.contains("simgen"))
            throw std::invalid_argument(
                "dataset block must give either a manifest or a generator, not both");
        if (d.contains("manifest")) c.dataset.manifest = d.at("manifest").get<std::string>();
        if (d.contains("simgen"))
            c.dataset.simgen = sim::SimConfig::from_json_text(d.at("simgen").dump());
    }
    if (j.contains("split")) {
        const json& s = j.at("split");
        check_keys(s, "split block", {"train", "val", "test"});
        c.split.train = s.value("train", c.split.train);
        c.split.val = s.value("val", c.split.val);
        c.split.test = s.value("test", c.split.test);
    }
    if (j.contains("model")) {
        // Overlay the given fields on the laptop-scale default so a partial
        // model block only overrides what it names.
        json merged = json::parse(desk_model().to_json_text());
        for (const auto& [key, value] : j.at("model").items()) {
            if (!merged.contains(key))
                throw std::invalid_argument("unknown field in model config: " + key);
            merged[key] = value;
        }
        c.model = nn::ModelConfig::from_json_text(merged.dump());
    }
    if (j.contains("ablations")) c.ablations = j.at("ablations").get<std::vector<std::string>>();
    if (j.contains("tau_seconds"))
        c.tau_seconds = j.at("tau_seconds").get<std::vector<double>>();
    if (j.contains("cpd")) {
        const json& g = j.at("cpd");
        check_keys(g, "cpd block",
                   {"searches", "costs", "penalties", "jump", "window_width", "min_size"});
        if (g.contains("searches")) c.cpd.searches = g.at("searches").get<std::vector<std::string>>();
        if (g.contains("costs")) c.cpd.costs = g.at("costs").get<std::vector<std::string>>();
        if (g.contains("penalties")) c.cpd.penalties = g.at("penalties").get<std::vector<double>>();
        c.cpd.jump = g.value("jump", c.cpd.jump);
        c.cpd.window_width = g.value("window_width", c.cpd.window_width);
        c.cpd.min_size = g.value("min_size", c.cpd.min_size);
    }
    if (j.contains("ml")) {
        const json& g = j.at("ml");
        check_keys(g, "ml block",
                   {"windows", "ridge", "cart_max_depths", "cart_max_features",
                    "max_train_windows"});
        if (g.contains("windows")) c.ml.windows = g.at("windows").get<std::vector<int>>();
        c.ml.ridge = g.value("ridge", c.ml.ridge);
        if (g.contains("cart_max_depths"))
            c.ml.cart_max_depths = g.at("cart_max_depths").get<std::vector<int>>();
        if (g.contains("cart_max_features"))
            c.ml.cart_max_features = g.at("cart_max_features").get<std::vector<std::string>>();
        c.ml.max_train_windows = g.value("max_train_windows", c.ml.max_train_windows);
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const fs::path& path) {
    return from_json_text(read_file(path, "experiment config"));
}

std::string ExperimentConfig::to_json_text() const {
    json j;
    j["master_seed"] = master_seed;
    json d;
    if (!dataset.manifest.empty())
        d["manifest"] = dataset.manifest;
    else
        d["simgen"] = sim_config_to_json(dataset.simgen);
    j["dataset"] = d;
    j["split"] = {{"train", split.train}, {"val", split.val}, {"test", split.test}};
    j["model"] = json::parse(model.to_json_text());
    j["ablations"] = ablations;
    j["tau_seconds"] = tau_seconds;
    j["cpd"] = {{"searches", cpd.searches},   {"costs", cpd.costs},
                {"penalties", cpd.penalties}, {"jump", cpd.jump},
                {"window_width", cpd.window_width}, {"min_size", cpd.min_size}};
    j["ml"] = {{"windows", ml.windows},
               {"ridge", ml.ridge},
               {"cart_max_depths", ml.cart_max_depths},
               {"cart_max_features", ml.cart_max_features},
               {"max_train_windows", ml.max_train_windows}};
    return j.dump(2) + "\n";
}

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"dataset",      "split",        "models",
                                                "cpd-baselines", "ml-baselines", "model-scores",
                                                "timeline",     "summary"};
    return names;
}

// ---------------------------------------------------------------------------
// Experiment run
// ---------------------------------------------------------------------------

namespace {

struct RunContext {
    const ExperimentConfig& cfg;
    fs::path out;
    const RunOptions& opts;
    std::optional<Dataset> dataset;
    std::optional<DatasetSplit> split;
    NormStats stats;

    fs::path manifest_path() const {
        return cfg.dataset.manifest.empty() ? out / artifact::dataset_dir / "manifest.json"
                                            : fs::path(cfg.dataset.manifest);
    }

    const Dataset& data() {
        if (!dataset) dataset = load_dataset(manifest_path());
        return *dataset;
    }

    /// The split (and the training-split normalization statistics) are
    /// recomputed deterministically from the master seed on every call, so
    /// resumed runs see exactly the split the original run used.
    const DatasetSplit& splits() {
        if (!split) {
            const SplitFractions f{cfg.split.train, cfg.split.val, cfg.split.test};
            split = split_dataset(data(), f, RngStream::derive_seed(cfg.master_seed, "split"));
            if (split->train.size() == 0 || split->val.size() == 0 || split->test.size() == 0)
                throw std::runtime_error("a split is empty; use more traces or wider fractions");
            stats = compute_norm_stats(split->train);
        }
        return *split;
    }

    void log(const std::string& line) const {
        if (opts.log) *opts.log << line << std::endl;
    }
};

std::vector<std::string> variant_names(const ExperimentConfig& cfg) {
    std::vector<std::string> names{"hybrid"};
    names.insert(names.end(), cfg.ablations.begin(), cfg.ablations.end());
    return names;
}

fs::path checkpoint_path(const fs::path& out, const std::string& variant) {
    return out / artifact::checkpoints_dir / (variant + ".ckpt");
}

nn::ModelConfig model_for(const ExperimentConfig& cfg, const Dataset& data,
                          const std::string& variant, std::uint64_t seed) {
    nn::ModelConfig mc = cfg.model;
    mc.variant = nn::variant_from_string(variant);
    mc.n_channels = static_cast<int>(data.schema.size());
    mc.n_classes = data.catalog.size();
    mc.seed = seed;
    return mc;
}

void stage_dataset(RunContext& ctx) {
    if (!ctx.cfg.dataset.manifest.empty()) {
        if (!fs::exists(ctx.manifest_path()))
            throw std::runtime_error("dataset manifest not found: " + ctx.manifest_path().string());
        return;
    }
    sim::SimConfig sc = ctx.cfg.dataset.simgen;
    sc.seed = RngStream::derive_seed(ctx.cfg.master_seed, "simgen");
    ctx.dataset = sim::generate_dataset(sc, ctx.out / artifact::dataset_dir);
}

void stage_split(RunContext& ctx) {
    const DatasetSplit& sp = ctx.splits();
    std::unordered_map<std::string, std::string> role;
    for (const auto& item : sp.train.items) role[item.id] = "train";
    for (const auto& item : sp.val.items) role[item.id] = "val";
    for (const auto& item : sp.test.items) role[item.id] = "test";
    std::vector<std::string> rows;
    for (const auto& item : ctx.data().items) rows.push_back(item.id + "," + role.at(item.id));
    write_text_file(ctx.out / artifact::split_csv, make_csv("trace_id,role", rows));
}

void stage_models(RunContext& ctx, bool force) {
    const DatasetSplit& sp = ctx.splits();
    fs::create_directories(ctx.out / artifact::checkpoints_dir);
    const std::vector<std::string> names = variant_names(ctx.cfg);
    for (std::size_t i = 0; i < names.size(); ++i) {
        const fs::path path = checkpoint_path(ctx.out, names[i]);
        if (!force && ctx.opts.resume && fs::exists(path)) {
            ctx.log("  model " + names[i] + ": cached");
            continue;
        }
        const nn::ModelConfig mc = model_for(
            ctx.cfg, ctx.data(), names[i], RngStream::derive_seed(ctx.cfg.master_seed, "model", i));
        ctx.log("  training " + names[i] + " (" + std::to_string(nn::parameter_count(mc)) +
                " parameters)");
        nn::TrainOptions topts;
        topts.log = ctx.opts.log;
        const nn::ModelCheckpoint ckpt = nn::train_model(mc, sp.train, sp.val, topts);
        ckpt.save(path);
    }
}

void stage_cpd_baselines(RunContext& ctx) {
    const DatasetSplit& sp = ctx.splits();
    const CpdBaselineGrid& g = ctx.cfg.cpd;
    std::vector<cpd::SearchMethod> methods;
    for (const std::string& s : g.searches) methods.push_back(cpd::search_method_from_string(s));
    std::vector<cpd::CostKind> kinds;
    for (const std::string& c : g.costs) kinds.push_back(cpd::cost_kind_from_string(c));

    const int n_traces = sp.test.size();
    std::vector<Eigen::MatrixXd> signals(static_cast<std::size_t>(n_traces));
    std::vector<std::vector<int>> truth(static_cast<std::size_t>(n_traces));
    for (int i = 0; i < n_traces; ++i) {
        // The baselines see the same per-channel z-scoring the network sees,
        // so the penalty scale is comparable across traces.
        signals[static_cast<std::size_t>(i)] =
            apply_norm_stats(sp.test.items[static_cast<std::size_t>(i)].trace, ctx.stats).samples;
        truth[static_cast<std::size_t>(i)] =
            sp.test.items[static_cast<std::size_t>(i)].annotation.change_times();
    }
    std::vector<eval::ToleranceMargin> margins;
    for (double tau : ctx.cfg.tau_seconds)
        margins.push_back(eval::ToleranceMargin::from_seconds(tau, ctx.data().sample_period));

    struct Counts {
        long tp = 0, fp = 0, fn = 0;
    };
    const std::size_t per_cost =
        methods.size() * g.penalties.size() * ctx.cfg.tau_seconds.size();
    // One task per (cost, trace): the cost precomputation is shared across
    // every search and penalty on that trace.
    const int n_tasks = static_cast<int>(kinds.size()) * n_traces;
    std::vector<std::vector<Counts>> per_task(static_cast<std::size_t>(n_tasks),
                                              std::vector<Counts>(per_cost));
    parallel_for(n_tasks, ctx.opts.threads, [&](int task) {
        const std::size_t ci = static_cast<std::size_t>(task) / static_cast<std::size_t>(n_traces);
        const std::size_t ti = static_cast<std::size_t>(task) % static_cast<std::size_t>(n_traces);
        const cpd::SegmentCost cost(signals[ti], kinds[ci]);
        std::vector<Counts>& slot = per_task[static_cast<std::size_t>(task)];
        std::size_t out_i = 0;
        for (cpd::SearchMethod method : methods) {
            for (double beta : g.penalties) {
                cpd::DetectOptions dopts;
                dopts.penalty = beta;
                dopts.min_size = g.min_size;
                dopts.jump = g.jump;
                dopts.window_width = g.window_width;
                const std::vector<int> times =
                    cpd::detect_change_points(cost, method, dopts).change_times();
                for (const eval::ToleranceMargin& margin : margins) {
                    const auto s = eval::cpd_score_times(truth[ti], times, margin);
                    slot[out_i].tp += s.tp;
                    slot[out_i].fp += s.fp;
                    slot[out_i].fn += s.fn;
                    ++out_i;
                }
            }
        }
    });

    // Reduce over traces (integer counts, so the order cannot matter) and
    // emit rows grouped by search, cost, penalty, tolerance.
    std::vector<std::string> rows;
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        for (std::size_t ci = 0; ci < kinds.size(); ++ci) {
            for (std::size_t bi = 0; bi < g.penalties.size(); ++bi) {
                for (std::size_t gi = 0; gi < margins.size(); ++gi) {
                    const std::size_t cell =
                        (mi * g.penalties.size() + bi) * margins.size() + gi;
                    Counts total;
                    for (int t = 0; t < n_traces; ++t) {
                        const Counts& c =
                            per_task[ci * static_cast<std::size_t>(n_traces) +
                                     static_cast<std::size_t>(t)][cell];
                        total.tp += c.tp;
                        total.fp += c.fp;
                        total.fn += c.fn;
                    }
                    const auto s = eval::ScoreReport::from_counts(total.tp, total.fp, total.fn);
                    rows.push_back(join_cells({cpd::to_string(methods[mi]),
                                               cpd::to_string(kinds[ci]),
                                               fmtg(g.penalties[bi]),
                                               fmtg(ctx.cfg.tau_seconds[gi]), fmt6(s.precision),
                                               fmt6(s.recall), fmt6(s.f1)}));
                }
            }
        }
    }
    write_text_file(ctx.out / artifact::cpd_csv,
                    make_csv("search,cost,penalty,tau_seconds,precision,recall,f1", rows));
}

void stage_ml_baselines(RunContext& ctx) {
    const DatasetSplit& sp = ctx.splits();
    const MlBaselineGrid& g = ctx.cfg.ml;
    const int n_classes = ctx.data().catalog.size();

    std::vector<baselines::MaxFeatures> budgets;
    for (const std::string& name : g.cart_max_features)
        budgets.push_back(baselines::max_features_from_string(name));
    const std::size_t cart_cells_per_w = g.cart_max_depths.size() * budgets.size();

    auto windows_of = [&](const Dataset& part, int w) {
        baselines::WindowedSamples all;
        bool first = true;
        for (const Dataset::Item& item : part.items) {
            if (item.trace.length() < w) continue;
            const MultivariateTrace tz = apply_norm_stats(item.trace, ctx.stats);
            const LabelSequence labels = expand_annotation(item.annotation, tz.length());
            baselines::WindowedSamples ws = baselines::window_features(tz, labels, w);
            if (first) {
                all = std::move(ws);
                first = false;
            } else {
                baselines::append_windows(all, ws);
            }
        }
        return all;
    };

    std::vector<std::string> rows;
    for (std::size_t wi = 0; wi < g.windows.size(); ++wi) {
        const int w = g.windows[wi];
        baselines::WindowedSamples train_ws = windows_of(sp.train, w);
        if (train_ws.size() == 0)
            throw std::runtime_error("window width " + std::to_string(w) +
                                     " leaves no training windows");
        if (train_ws.size() > g.max_train_windows) {
            // Deterministic subsample: partial shuffle, then ascending order.
            RngStream rng = RngStream::substream(ctx.cfg.master_seed, "ml-subsample",
                                                 static_cast<std::uint64_t>(w));
            std::vector<int> idx(static_cast<std::size_t>(train_ws.size()));
            std::iota(idx.begin(), idx.end(), 0);
            for (int i = 0; i < g.max_train_windows; ++i) {
                const auto j = i + rng.uniform_int(static_cast<std::int64_t>(idx.size()) - i);
                std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
            }
            idx.resize(static_cast<std::size_t>(g.max_train_windows));
            std::sort(idx.begin(), idx.end());
            baselines::WindowedSamples sub;
            sub.window = train_ws.window;
            sub.channels = train_ws.channels;
            sub.features.resize(g.max_train_windows, train_ws.features.cols());
            sub.labels.resize(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                sub.features.row(static_cast<long>(i)) = train_ws.features.row(idx[i]);
                sub.labels[i] = train_ws.labels[static_cast<std::size_t>(idx[i])];
            }
            train_ws = std::move(sub);
        }

        std::vector<baselines::WindowedSamples> test_ws;
        for (const Dataset::Item& item : sp.test.items) {
            if (item.trace.length() < w) continue;
            const MultivariateTrace tz = apply_norm_stats(item.trace, ctx.stats);
            test_ws.push_back(
                baselines::window_features(tz, expand_annotation(item.annotation, tz.length()), w));
        }
        if (test_ws.empty())
            throw std::runtime_error("window width " + std::to_string(w) +
                                     " leaves no test windows");

        auto score_windows =
            [&](const std::function<std::vector<int>(const Eigen::MatrixXd&)>& predict) {
                std::vector<LabelSequence> truths, preds;
                for (const baselines::WindowedSamples& ws : test_ws) {
                    LabelSequence t, p;
                    t.labels = ws.labels;
                    t.mask.assign(ws.labels.size(), 1);
                    p.labels = predict(ws.features);
                    p.mask.assign(p.labels.size(), 1);
                    truths.push_back(std::move(t));
                    preds.push_back(std::move(p));
                }
                return eval::classification_report(truths, preds, ctx.data().catalog);
            };

        if (g.ridge) {
            const auto ridge = baselines::RidgeClassifier::fit_cv(train_ws.features,
                                                                  train_ws.labels, n_classes);
            const auto cr =
                score_windows([&](const Eigen::MatrixXd& x) { return ridge.predict_rows(x); });
            rows.push_back(join_cells({std::to_string(w), "ridge", "", "", fmt6(ridge.alpha()),
                                       fmt6(cr.macro_precision), fmt6(cr.macro_recall),
                                       fmt6(cr.macro_f1)}));
            ctx.log("  w=" + std::to_string(w) + " ridge f1=" + fmt6(cr.macro_f1));
        }

        std::vector<std::string> cart_rows(cart_cells_per_w);
        parallel_for(static_cast<int>(cart_cells_per_w), ctx.opts.threads, [&](int cell) {
            const std::size_t di = static_cast<std::size_t>(cell) / budgets.size();
            const std::size_t fi = static_cast<std::size_t>(cell) % budgets.size();
            baselines::CartOptions copts;
            copts.max_depth = g.cart_max_depths[di];
            copts.max_features = budgets[fi];
            copts.seed = RngStream::derive_seed(ctx.cfg.master_seed, "cart",
                                                wi * cart_cells_per_w +
                                                    static_cast<std::size_t>(cell));
            const auto tree =
                baselines::CartClassifier::fit(train_ws.features, train_ws.labels, n_classes, copts);
            const auto cr =
                score_windows([&](const Eigen::MatrixXd& x) { return tree.predict_rows(x); });
            cart_rows[static_cast<std::size_t>(cell)] = join_cells(
                {std::to_string(w), "cart", std::to_string(g.cart_max_depths[di]),
                 baselines::to_string(budgets[fi]), "", fmt6(cr.macro_precision),
                 fmt6(cr.macro_recall), fmt6(cr.macro_f1)});
        });
        rows.insert(rows.end(), cart_rows.begin(), cart_rows.end());
    }
    write_text_file(ctx.out / artifact::ml_csv,
                    make_csv("w,classifier,max_depth,max_features,alpha,precision,recall,f1",
                             rows));
}

void stage_model_scores(RunContext& ctx) {
    const DatasetSplit& sp = ctx.splits();
    std::vector<std::string> rows;
    for (const std::string& name : variant_names(ctx.cfg)) {
        const fs::path path = checkpoint_path(ctx.out, name);
        if (!fs::exists(path))
            throw std::runtime_error("checkpoint missing: " + path.string() +
                                     " (run the models stage first)");
        const nn::ModelCheckpoint ckpt = nn::ModelCheckpoint::load(path);
        const MetricRow m = score_checkpoint(ckpt, sp.test, ctx.cfg.tau_seconds);
        for (std::size_t gi = 0; gi < ctx.cfg.tau_seconds.size(); ++gi) {
            rows.push_back(join_cells({name, fmtg(ctx.cfg.tau_seconds[gi]),
                                       fmt6(m.cpd_precision[gi]), fmt6(m.cpd_recall[gi]),
                                       fmt6(m.cpd_f1[gi]), fmt6(m.class_precision),
                                       fmt6(m.class_recall), fmt6(m.class_f1)}));
        }
        ctx.log("  " + name + " class f1=" + fmt6(m.class_f1));
    }
    write_text_file(
        ctx.out / artifact::scores_csv,
        make_csv("variant,tau_seconds,cpd_precision,cpd_recall,cpd_f1,class_precision,"
                 "class_recall,class_f1",
                 rows));
}

void stage_timeline(RunContext& ctx) {
    const DatasetSplit& sp = ctx.splits();
    const nn::ModelCheckpoint ckpt = nn::ModelCheckpoint::load(checkpoint_path(ctx.out, "hybrid"));
    std::vector<std::string> rows;
    for (const Dataset::Item& item : sp.test.items) {
        const LabelSequence pred = nn::predict_states(ckpt, item.trace);
        const LabelSequence truth = expand_annotation(item.annotation, item.trace.length());
        for (int t = 0; t < item.trace.length(); ++t) {
            const std::size_t ti = static_cast<std::size_t>(t);
            const std::string pred_name =
                pred.mask[ti] ? ctx.data().catalog.name(pred.labels[ti]) : std::string{};
            rows.push_back(join_cells({item.id, std::to_string(t),
                                       fmtg(t * item.trace.sample_period),
                                       ctx.data().catalog.name(truth.labels[ti]), pred_name}));
        }
    }
    write_text_file(ctx.out / artifact::timeline_csv,
                    make_csv("trace_id,t,time_seconds,truth,predicted", rows));
}

void stage_summary(RunContext& ctx) {
    const auto cpd_rows = read_csv(ctx.out / artifact::cpd_csv);
    const auto ml_rows = read_csv(ctx.out / artifact::ml_csv);
    const auto score_rows = read_csv(ctx.out / artifact::scores_csv);
    const auto cpd_col = column_index(cpd_rows.at(0));
    const auto ml_col = column_index(ml_rows.at(0));
    const auto score_col = column_index(score_rows.at(0));

    const std::vector<double>& taus = ctx.cfg.tau_seconds;
    const std::size_t headline = headline_tau_index(taus);

    // Best change-point baseline per tolerance (ties keep the first row).
    json best_cpd = json::array();
    std::vector<double> best_cpd_f1(taus.size(), -1.0);
    for (std::size_t gi = 0; gi < taus.size(); ++gi) {
        const std::string tau_str = fmtg(taus[gi]);
        json best;
        for (std::size_t r = 1; r < cpd_rows.size(); ++r) {
            const auto& row = cpd_rows[r];
            if (row[static_cast<std::size_t>(cpd_col.at("tau_seconds"))] != tau_str) continue;
            const double f1 = std::stod(row[static_cast<std::size_t>(cpd_col.at("f1"))]);
            if (f1 > best_cpd_f1[gi]) {
                best_cpd_f1[gi] = f1;
                best = {{"tau_seconds", taus[gi]},
                        {"search", row[static_cast<std::size_t>(cpd_col.at("search"))]},
                        {"cost", row[static_cast<std::size_t>(cpd_col.at("cost"))]},
                        {"penalty",
                         std::stod(row[static_cast<std::size_t>(cpd_col.at("penalty"))])},
                        {"precision",
                         std::stod(row[static_cast<std::size_t>(cpd_col.at("precision"))])},
                        {"recall", std::stod(row[static_cast<std::size_t>(cpd_col.at("recall"))])},
                        {"f1", f1}};
            }
        }
        best_cpd.push_back(best);
    }

    // Best sliding-window baseline by classification F1 (ties keep the first).
    json best_ml;
    double best_ml_f1 = -1.0;
    for (std::size_t r = 1; r < ml_rows.size(); ++r) {
        const auto& row = ml_rows[r];
        const double f1 = std::stod(row[static_cast<std::size_t>(ml_col.at("f1"))]);
        if (f1 > best_ml_f1) {
            best_ml_f1 = f1;
            best_ml = {{"w", std::stoi(row[static_cast<std::size_t>(ml_col.at("w"))])},
                       {"classifier", row[static_cast<std::size_t>(ml_col.at("classifier"))]},
                       {"max_depth", row[static_cast<std::size_t>(ml_col.at("max_depth"))]},
                       {"max_features", row[static_cast<std::size_t>(ml_col.at("max_features"))]},
                       {"alpha", row[static_cast<std::size_t>(ml_col.at("alpha"))]},
                       {"precision",
                        std::stod(row[static_cast<std::size_t>(ml_col.at("precision"))])},
                       {"recall", std::stod(row[static_cast<std::size_t>(ml_col.at("recall"))])},
                       {"f1", f1}};
        }
    }

    // Per-variant scores.
    json models;
    std::unordered_map<std::string, MetricRow> variant_metrics;
    for (const std::string& name : variant_names(ctx.cfg)) {
        MetricRow m;
        for (std::size_t r = 1; r < score_rows.size(); ++r) {
            const auto& row = score_rows[r];
            if (row[static_cast<std::size_t>(score_col.at("variant"))] != name) continue;
            m.cpd_precision.push_back(
                std::stod(row[static_cast<std::size_t>(score_col.at("cpd_precision"))]));
            m.cpd_recall.push_back(
                std::stod(row[static_cast<std::size_t>(score_col.at("cpd_recall"))]));
            m.cpd_f1.push_back(std::stod(row[static_cast<std::size_t>(score_col.at("cpd_f1"))]));
            m.class_precision =
                std::stod(row[static_cast<std::size_t>(score_col.at("class_precision"))]);
            m.class_recall =
                std::stod(row[static_cast<std::size_t>(score_col.at("class_recall"))]);
            m.class_f1 = std::stod(row[static_cast<std::size_t>(score_col.at("class_f1"))]);
        }
        if (m.cpd_f1.size() != taus.size())
            throw std::runtime_error("score table has no rows for variant " + name);
        variant_metrics[name] = m;
        models[name] = metric_row_to_json(m, taus);
    }

    const MetricRow& hybrid = variant_metrics.at("hybrid");
    json improvement;
    improvement["class_f1"] = best_ml_f1 > 0
                                  ? json(hybrid.class_f1 / best_ml_f1 - 1.0)
                                  : json();
    improvement["cpd_f1"] = best_cpd_f1[headline] > 0
                                ? json(hybrid.cpd_f1[headline] / best_cpd_f1[headline] - 1.0)
                                : json();

    const DatasetSplit& sp = ctx.splits();
    json j;
    j["master_seed"] = ctx.cfg.master_seed;
    j["dataset"] = {{"n_traces", ctx.data().size()},
                    {"train", sp.train.size()},
                    {"val", sp.val.size()},
                    {"test", sp.test.size()}};
    j["cpd_scaling"] = "per-channel z-score with training-split statistics";
    j["models"] = models;
    j["best_cpd_baseline"] = best_cpd;
    j["best_ml_baseline"] = best_ml;
    j["headline_tau_seconds"] = taus[headline];
    j["improvement"] = improvement;
    j["improvement_definition"] =
        "model F1 divided by the best baseline F1, minus one (multiply by 100 for percent)";
    write_text_file(ctx.out / artifact::summary_json, j.dump(2) + "\n");
}

} // namespace

RunReport run_experiment(const ExperimentConfig& config, const fs::path& out_dir,
                         const RunOptions& options) {
    config.validate();
    for (const auto& list : {options.only_stages, options.force_stages})
        for (const std::string& name : list)
            if (std::find(stage_names().begin(), stage_names().end(), name) ==
                stage_names().end())
                throw std::invalid_argument("unknown stage: " + name);
    fs::create_directories(out_dir);

    RunContext ctx{config, out_dir, options, {}, {}, {}};
    RunReport report;
    report.out_dir = out_dir;

    struct Stage {
        std::string name;
        std::function<bool()> satisfied;
        std::function<void(bool)> run;
    };
    auto all_checkpoints_exist = [&] {
        for (const std::string& name : variant_names(config))
            if (!fs::exists(checkpoint_path(out_dir, name))) return false;
        return true;
    };
    const std::vector<Stage> stages{
        {"dataset", [&] { return fs::exists(ctx.manifest_path()); },
         [&](bool) { stage_dataset(ctx); }},
        {"split", [&] { return fs::exists(out_dir / artifact::split_csv); },
         [&](bool) { stage_split(ctx); }},
        {"models", all_checkpoints_exist, [&](bool force) { stage_models(ctx, force); }},
        {"cpd-baselines", [&] { return fs::exists(out_dir / artifact::cpd_csv); },
         [&](bool) { stage_cpd_baselines(ctx); }},
        {"ml-baselines", [&] { return fs::exists(out_dir / artifact::ml_csv); },
         [&](bool) { stage_ml_baselines(ctx); }},
        {"model-scores", [&] { return fs::exists(out_dir / artifact::scores_csv); },
         [&](bool) { stage_model_scores(ctx); }},
        {"timeline", [&] { return fs::exists(out_dir / artifact::timeline_csv); },
         [&](bool) { stage_timeline(ctx); }},
        {"summary", [&] { return fs::exists(out_dir / artifact::summary_json); },
         [&](bool) { stage_summary(ctx); }},
    };

    auto listed = [](const std::vector<std::string>& list, const std::string& name) {
        return std::find(list.begin(), list.end(), name) != list.end();
    };
    for (const Stage& st : stages) {
        if (!options.only_stages.empty() && !listed(options.only_stages, st.name)) continue;
        const bool force = listed(options.force_stages, st.name);
        if (options.resume && !force && st.satisfied()) {
            report.skipped.push_back(st.name);
            ctx.log("stage " + st.name + ": up to date");
            continue;
        }
        ctx.log("stage " + st.name + ": running");
        const auto t0 = std::chrono::steady_clock::now();
        try {
            st.run(force);
        } catch (const std::exception& e) {
            throw std::runtime_error("stage " + st.name + " failed: " + e.what());
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.stage_seconds[st.name] = secs;
        report.executed.push_back(st.name);
        ctx.log("stage " + st.name + ": done in " + fmt6(secs) + " s");
    }

    if (!report.executed.empty()) {
        json timings;
        double total = 0;
        for (const auto& [name, secs] : report.stage_seconds) {
            timings["stages"][name] = secs;
            total += secs;
        }
        timings["total_seconds"] = total;
        write_text_file(out_dir / artifact::timings_json, timings.dump(2) + "\n");
    }
    return report;
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

GridSearchConfig GridSearchConfig::from_json_text(const std::string& text) {
    const json j = json::parse(text);
    check_keys(j, "grid search config", {"base", "axes"});
    GridSearchConfig c;
    if (j.contains("base")) c.base = ExperimentConfig::from_json_text(j.at("base").dump());
    if (j.contains("axes")) {
        const json& a = j.at("axes");
        check_keys(a, "grid axes",
                   {"gru_cells", "conv_filters", "kernel_schedules", "learning_rates",
                    "max_configs", "allow_large"});
        if (a.contains("gru_cells")) c.axes.gru_cells = a.at("gru_cells").get<std::vector<int>>();
        if (a.contains("conv_filters"))
            c.axes.conv_filters = a.at("conv_filters").get<std::vector<int>>();
        if (a.contains("kernel_schedules"))
            c.axes.kernel_schedules =
                a.at("kernel_schedules").get<std::vector<std::vector<int>>>();
        if (a.contains("learning_rates"))
            c.axes.learning_rates = a.at("learning_rates").get<std::vector<double>>();
        c.axes.max_configs = a.value("max_configs", c.axes.max_configs);
        c.axes.allow_large = a.value("allow_large", c.axes.allow_large);
    }
    return c;
}

GridSearchConfig GridSearchConfig::from_json_file(const fs::path& path) {
    return from_json_text(read_file(path, "grid search config"));
}

namespace {

/// Canonical text for the deterministic lexical tie-break: the candidate's
/// JSON with the seed zeroed (seeds are assigned per slot, not hand-chosen).
std::string config_sort_key(nn::ModelConfig c) {
    c.seed = 0;
    return c.to_json_text();
}

} // namespace

GridSearchReport grid_search(const GridSearchConfig& config, const fs::path& out_dir,
                             const RunOptions& options) {
    config.base.validate();
    if (config.axes.max_configs < 1) throw std::invalid_argument("max_configs must be >= 1");
    fs::create_directories(out_dir);
    RunContext ctx{config.base, out_dir, options, {}, {}, {}};
    if (config.base.dataset.manifest.empty() && !fs::exists(ctx.manifest_path()))
        stage_dataset(ctx);
    const DatasetSplit& sp = ctx.splits();

    // Expand the axes; an empty axis contributes the base model's value.
    auto int_axis = [](const std::vector<int>& v) {
        std::vector<std::optional<int>> out;
        if (v.empty()) return std::vector<std::optional<int>>{std::nullopt};
        for (int x : v) out.emplace_back(x);
        return out;
    };
    std::vector<std::optional<std::vector<int>>> sched_axis;
    if (config.axes.kernel_schedules.empty())
        sched_axis.emplace_back(std::nullopt);
    else
        for (const auto& s : config.axes.kernel_schedules) sched_axis.emplace_back(s);
    std::vector<std::optional<double>> lr_axis;
    if (config.axes.learning_rates.empty())
        lr_axis.emplace_back(std::nullopt);
    else
        for (double lr : config.axes.learning_rates) lr_axis.emplace_back(lr);
    const auto cells_axis = int_axis(config.axes.gru_cells);
    const auto filter_axis = int_axis(config.axes.conv_filters);

    const long n_grid = static_cast<long>(cells_axis.size()) *
                        static_cast<long>(filter_axis.size()) *
                        static_cast<long>(sched_axis.size()) * static_cast<long>(lr_axis.size());
    if (n_grid > config.axes.max_configs && !config.axes.allow_large)
        throw std::runtime_error("grid has " + std::to_string(n_grid) +
                                 " configurations, above the cap of " +
                                 std::to_string(config.axes.max_configs) +
                                 "; pass --allow-large to override");

    std::vector<nn::ModelConfig> candidates;
    for (const auto& cells : cells_axis)
        for (const auto& filters : filter_axis)
            for (const auto& schedule : sched_axis)
                for (const auto& lr : lr_axis) {
                    nn::ModelConfig mc = config.base.model;
                    if (schedule) {
                        const int f0 = mc.conv_stack.empty() ? 16 : mc.conv_stack.front().filters;
                        mc.conv_stack.clear();
                        for (int k : *schedule) mc.conv_stack.push_back({f0, k});
                    }
                    if (filters)
                        for (nn::ConvSpec& spec : mc.conv_stack) spec.filters = *filters;
                    if (cells) {
                        const std::size_t depth = mc.gru_stack.empty() ? 1 : mc.gru_stack.size();
                        mc.gru_stack.assign(depth, *cells);
                    }
                    if (lr) mc.learning_rate = *lr;
                    mc.validate();
                    candidates.push_back(mc);
                }

    // The base model always rides along so the tuned pick can be contrasted
    // with it; reuse the matching grid cell when one exists.
    auto same_config = [](nn::ModelConfig a, nn::ModelConfig b) {
        a.seed = b.seed = 0;
        return a == b;
    };
    int default_slot = -1;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (same_config(candidates[i], config.base.model)) {
            default_slot = static_cast<int>(i);
            break;
        }
    if (default_slot < 0) {
        candidates.push_back(config.base.model);
        default_slot = static_cast<int>(candidates.size()) - 1;
    }

    for (std::size_t i = 0; i < candidates.size(); ++i) {
        candidates[i].n_channels = static_cast<int>(ctx.data().schema.size());
        candidates[i].n_classes = ctx.data().catalog.size();
        candidates[i].seed =
            RngStream::derive_seed(config.base.master_seed, "grid-model", i);
    }

    std::vector<MetricRow> metrics(candidates.size());
    parallel_for(static_cast<int>(candidates.size()), options.threads, [&](int i) {
        const auto ckpt =
            nn::train_model(candidates[static_cast<std::size_t>(i)], sp.train, sp.val);
        metrics[static_cast<std::size_t>(i)] =
            score_checkpoint(ckpt, sp.val, config.base.tau_seconds);
    });

    const std::size_t headline = headline_tau_index(config.base.tau_seconds);
    std::vector<int> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const MetricRow& ma = metrics[static_cast<std::size_t>(a)];
        const MetricRow& mb = metrics[static_cast<std::size_t>(b)];
        if (ma.class_f1 != mb.class_f1) return ma.class_f1 > mb.class_f1;
        if (ma.cpd_f1[headline] != mb.cpd_f1[headline])
            return ma.cpd_f1[headline] > mb.cpd_f1[headline];
        return config_sort_key(candidates[static_cast<std::size_t>(a)]) <
               config_sort_key(candidates[static_cast<std::size_t>(b)]);
    });

    GridSearchReport report;
    std::vector<std::string> rows;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        const int i = order[rank];
        const nn::ModelConfig& mc = candidates[static_cast<std::size_t>(i)];
        GridRow row;
        row.config = mc;
        row.is_default = (i == default_slot);
        row.metrics = metrics[static_cast<std::size_t>(i)];
        if (row.is_default) report.default_index = static_cast<int>(rank);
        std::vector<int> kernels, conv_filters;
        for (const nn::ConvSpec& spec : mc.conv_stack) {
            conv_filters.push_back(spec.filters);
            kernels.push_back(spec.kernel);
        }
        std::vector<std::string> cells{std::to_string(rank + 1),
                                       row.is_default ? "1" : "0",
                                       join_ints(mc.gru_stack, '|'),
                                       join_ints(conv_filters, '|'),
                                       join_ints(kernels, '|'),
                                       fmtg(mc.learning_rate)};
        const std::vector<std::string> mcs = metric_cells(row.metrics);
        cells.insert(cells.end(), mcs.begin(), mcs.end());
        rows.push_back(join_cells(cells));
        report.rows.push_back(std::move(row));
    }
    report.best_index = 0;

    std::string header = "rank,is_default,gru_cells,conv_filters,kernels,learning_rate";
    for (const std::string& h : metric_headers(config.base.tau_seconds)) header += "," + h;
    report.csv_path = out_dir / "grid_search.csv";
    write_text_file(report.csv_path, make_csv(header, rows));

    const GridRow& best = report.rows.front();
    const GridRow& def = report.rows[static_cast<std::size_t>(report.default_index)];
    json best_json;
    best_json["best"] = {{"model", json::parse(best.config.to_json_text())},
                         {"metrics", metric_row_to_json(best.metrics, config.base.tau_seconds)}};
    best_json["default"] = {{"model", json::parse(def.config.to_json_text())},
                            {"metrics", metric_row_to_json(def.metrics, config.base.tau_seconds)}};
    best_json["tuned_class_f1"] = best.metrics.class_f1;
    best_json["default_class_f1"] = def.metrics.class_f1;
    best_json["tuned_at_least_default"] = best.metrics.class_f1 >= def.metrics.class_f1;
    best_json["candidates"] = static_cast<int>(report.rows.size());
    write_text_file(out_dir / "grid_best.json", best_json.dump(2) + "\n");
    return report;
}

// ---------------------------------------------------------------------------
// Transfer experiment
// ---------------------------------------------------------------------------

void TransferConfig::validate() const {
    if (source_checkpoint.empty())
        throw std::invalid_argument("transfer config needs a source checkpoint path");
    if (folds < 3) throw std::invalid_argument("transfer needs at least 3 folds");
    if (traces_per_fold < 1) throw std::invalid_argument("traces_per_fold must be >= 1");
    if (eval_reserve_min < 1) throw std::invalid_argument("eval_reserve_min must be >= 1");
    if (tau_seconds.empty()) throw std::invalid_argument("tau_seconds must not be empty");
    for (double tau : tau_seconds)
        if (tau <= 0) throw std::invalid_argument("tolerances must be positive");
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (fine_tune_lr <= 0) throw std::invalid_argument("fine_tune_lr must be positive");
}

TransferConfig TransferConfig::from_json_text(const std::string& text) {
    const json j = json::parse(text);
    check_keys(j, "transfer config",
               {"source_checkpoint", "variant_b", "folds", "traces_per_fold", "eval_reserve_min",
                "tau_seconds", "master_seed", "max_epochs", "patience", "fine_tune_lr"});
    TransferConfig c;
    c.variant_b.variant = "variant_b";
    c.variant_b.count = 60;
    if (j.contains("source_checkpoint"))
        c.source_checkpoint = j.at("source_checkpoint").get<std::string>();
    if (j.contains("variant_b")) {
        sim::SimConfig vb = sim::SimConfig::from_json_text(j.at("variant_b").dump());
        c.variant_b = vb;
    }
    c.folds = j.value("folds", c.folds);
    c.traces_per_fold = j.value("traces_per_fold", c.traces_per_fold);
    c.eval_reserve_min = j.value("eval_reserve_min", c.eval_reserve_min);
    if (j.contains("tau_seconds"))
        c.tau_seconds = j.at("tau_seconds").get<std::vector<double>>();
    if (j.contains("master_seed")) c.master_seed = j.at("master_seed").get<std::uint64_t>();
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.fine_tune_lr = j.value("fine_tune_lr", c.fine_tune_lr);
    c.validate();
    return c;
}

TransferConfig TransferConfig::from_json_file(const fs::path& path) {
    return from_json_text(read_file(path, "transfer config"));
}

TransferReport transfer_experiment(const TransferConfig& config, const fs::path& out_dir,
                                   const RunOptions& options) {
    config.validate();
    fs::create_directories(out_dir);
    const nn::ModelCheckpoint source = nn::ModelCheckpoint::load(config.source_checkpoint);

    const fs::path data_dir = out_dir / "dataset_b";
    Dataset data;
    if (options.resume && fs::exists(data_dir / "manifest.json")) {
        data = load_dataset(data_dir / "manifest.json");
    } else {
        sim::SimConfig sc = config.variant_b;
        sc.seed = RngStream::derive_seed(config.master_seed, "transfer-simgen");
        data = sim::generate_dataset(sc, data_dir);
    }

    const int needed = config.folds * config.traces_per_fold + config.eval_reserve_min;
    if (data.size() < needed)
        throw std::runtime_error(
            "variant-B dataset has " + std::to_string(data.size()) +
            " traces; need at least folds*traces_per_fold + eval_reserve_min = " +
            std::to_string(needed));

    std::vector<int> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);
    RngStream rng = RngStream::substream(config.master_seed, "transfer-folds");
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = rng.uniform_int(static_cast<std::int64_t>(i));
        std::swap(order[i - 1], order[static_cast<std::size_t>(j)]);
    }
    auto subset = [&](int first, int count) {
        Dataset d;
        d.schema = data.schema;
        d.catalog = data.catalog;
        d.sample_period = data.sample_period;
        for (int k = first; k < first + count; ++k)
            d.items.push_back(data.items[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
        return d;
    };
    const int fold_total = config.folds * config.traces_per_fold;
    const Dataset eval_set = subset(fold_total, data.size() - fold_total);

    TransferReport report;
    for (int f = 0; f < config.folds; ++f) {
        const Dataset fold_train = subset(f * config.traces_per_fold, config.traces_per_fold);
        if (options.log)
            *options.log << "fold " << f << ": fine-tuning on " << fold_train.size()
                         << " traces" << std::endl;

        nn::FineTuneOptions fo;
        fo.max_epochs = config.max_epochs;
        fo.patience = config.patience;
        fo.learning_rate = config.fine_tune_lr;
        fo.seed = RngStream::derive_seed(config.master_seed, "transfer-ft",
                                         static_cast<std::uint64_t>(f));
        const nn::ModelCheckpoint tuned = nn::fine_tune(source, fold_train, {}, fo);

        // Only the dense head is trainable by default; everything else must
        // come back bit-identical.
        bool frozen_ok = source.weights.size() == tuned.weights.size();
        for (std::size_t wi = 0; frozen_ok && wi < source.weights.size(); ++wi) {
            const auto& [name, value] = source.weights[wi];
            const auto& [tuned_name, tuned_value] = tuned.weights[wi];
            if (name != tuned_name) {
                frozen_ok = false;
                break;
            }
            if (name.rfind("dense", 0) == 0) continue;
            frozen_ok = value.rows() == tuned_value.rows() &&
                        value.cols() == tuned_value.cols() &&
                        (value.array() == tuned_value.array()).all();
        }

        nn::ModelConfig scratch_cfg = source.config;
        scratch_cfg.seed = RngStream::derive_seed(config.master_seed, "transfer-scratch",
                                                  static_cast<std::uint64_t>(f));
        scratch_cfg.max_epochs = config.max_epochs;
        scratch_cfg.patience = config.patience;
        const nn::ModelCheckpoint scratch =
            nn::train_model(scratch_cfg, fold_train, fold_train);

        report.fine_tuned.push_back(score_checkpoint(tuned, eval_set, config.tau_seconds));
        report.scratch.push_back(score_checkpoint(scratch, eval_set, config.tau_seconds));
        report.freeze_ok.push_back(frozen_ok);
    }

    report.mean_fine_tuned = mean_metric_rows(report.fine_tuned);
    report.mean_scratch = mean_metric_rows(report.scratch);
    report.all_freeze_ok =
        std::all_of(report.freeze_ok.begin(), report.freeze_ok.end(), [](bool b) { return b; });

    std::string header = "fold,method,freeze_ok";
    for (const std::string& h : metric_headers(config.tau_seconds)) header += "," + h;
    std::vector<std::string> rows;
    for (int f = 0; f < config.folds; ++f) {
        for (const char* method : {"fine_tuned", "scratch"}) {
            const bool is_ft = std::string(method) == "fine_tuned";
            const MetricRow& m = is_ft ? report.fine_tuned[static_cast<std::size_t>(f)]
                                       : report.scratch[static_cast<std::size_t>(f)];
            std::vector<std::string> cells{std::to_string(f), method,
                                           is_ft ? (report.freeze_ok[static_cast<std::size_t>(f)]
                                                        ? "1"
                                                        : "0")
                                                 : ""};
            const auto mcs = metric_cells(m);
            cells.insert(cells.end(), mcs.begin(), mcs.end());
            rows.push_back(join_cells(cells));
        }
    }
    for (const char* method : {"fine_tuned", "scratch"}) {
        const bool is_ft = std::string(method) == "fine_tuned";
        const MetricRow& m = is_ft ? report.mean_fine_tuned : report.mean_scratch;
        std::vector<std::string> cells{"mean", method,
                                       is_ft ? (report.all_freeze_ok ? "1" : "0") : ""};
        const auto mcs = metric_cells(m);
        cells.insert(cells.end(), mcs.begin(), mcs.end());
        rows.push_back(join_cells(cells));
    }
    report.csv_path = out_dir / "transfer.csv";
    write_text_file(report.csv_path, make_csv(header, rows));

    json j;
    j["folds"] = config.folds;
    j["traces_per_fold"] = config.traces_per_fold;
    j["eval_traces"] = eval_set.size();
    j["all_freeze_ok"] = report.all_freeze_ok;
    j["mean_fine_tuned"] = metric_row_to_json(report.mean_fine_tuned, config.tau_seconds);
    j["mean_scratch"] = metric_row_to_json(report.mean_scratch, config.tau_seconds);
    j["fine_tune_at_least_scratch"] =
        report.mean_fine_tuned.class_f1 >= report.mean_scratch.class_f1;
    write_text_file(out_dir / "transfer_summary.json", j.dump(2) + "\n");
    return report;
}

} // namespace statetrace::pipeline
