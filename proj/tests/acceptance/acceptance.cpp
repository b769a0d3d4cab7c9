// Acceptance gate: one self-contained check per release criterion, each
// printing a single PASS/FAIL line with its measured numbers and pinned
// bounds. The exit code is the number of failed criteria.
//
// Usage: acceptance_gate [--only 1,4,5] [--out DIR]
//
// Criteria 4-6 share one laptop-scale experiment directory under DIR and
// resume from its artifacts when they already exist, so re-runs are cheap;
// delete DIR to force everything fresh.

#include "statetrace/baselines.hpp"
#include "statetrace/common.hpp"
#include "statetrace/cpd.hpp"
#include "statetrace/eval.hpp"
#include "statetrace/io.hpp"
#include "statetrace/nn.hpp"
#include "statetrace/pipeline.hpp"
#include "statetrace/sim.hpp"
#include "statetrace/trace.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

using namespace statetrace;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, const char* spec = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

struct Outcome {
    std::vector<std::string> problems;
    std::string summary;

    bool pass() const { return problems.empty(); }
    void require(bool ok, const std::string& problem) {
        if (!ok) problems.push_back(problem);
    }
    std::string detail() const {
        if (pass()) return summary;
        std::string all;
        for (const auto& p : problems) {
            if (!all.empty()) all += "; ";
            all += p;
        }
        return all;
    }
};

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& file) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(file));
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        rows.push_back(std::move(cells));
    }
    return rows;
}

int column(const std::vector<std::string>& header, const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error("missing csv column " + name);
    return static_cast<int>(it - header.begin());
}

double rel_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// ---------------------------------------------------------------------------
// C1: analytic gradients against finite differences
// ---------------------------------------------------------------------------

nn::ModelConfig tiny_model(nn::ModelVariant variant) {
    nn::ModelConfig cfg;
    cfg.conv_stack = {{6, 3}, {6, 5}};
    cfg.gru_stack = {7};
    cfg.dense_hidden = 8;
    cfg.n_channels = 3;
    cfg.n_classes = 4;
    cfg.variant = variant;
    return cfg;
}

/// Fourth-order central difference of value() with respect to one scalar.
/// The slot and the stencil arithmetic keep the probe's precision (long
/// double for the oracles below), so round-off stays far under the 1e-5 bar
/// even on near-zero gradient entries.
template <class F, class S>
double central_diff(F&& value, S& slot, double eps) {
    const S saved = slot;
    const S step = static_cast<S>(eps);
    slot = saved + step;
    const auto outer_plus = value();
    slot = saved + step / 2;
    const auto inner_plus = value();
    slot = saved - step / 2;
    const auto inner_minus = value();
    slot = saved - step;
    const auto outer_minus = value();
    slot = saved;
    return static_cast<double>((-outer_plus + 8 * inner_plus - 8 * inner_minus + outer_minus) /
                               (6 * static_cast<decltype(outer_plus)>(eps)));
}

/// Probe every parameter entry and every input entry of one layer: analytic
/// gradients from the double-precision layer under test, finite differences
/// from an extended-precision twin with the same weights. Returns the
/// largest relative error. Only smooth layers belong here; the leaky-relu
/// kink is handled by the whole-network checks.
template <class Layer, class Twin>
double layer_probe(Layer& layer, Twin& twin, nn::MatX<double> x, int batch, std::uint64_t seed,
                   long* probes) {
    RngStream rng(seed);
    for (auto* p : layer.params()) {
        for (long i = 0; i < p->value.size(); ++i) p->value.data()[i] = 0.5 * rng.normal();
        p->zero_grad();
    }
    nn::MatX<double> first = layer.forward(x, batch);
    nn::MatX<double> weights(first.rows(), first.cols());
    for (long i = 0; i < weights.size(); ++i) weights.data()[i] = rng.normal();

    layer.forward(x, batch); // refresh the backward caches
    const nn::MatX<double> dx = layer.backward(weights, batch);
    std::vector<nn::MatX<double>> analytic;
    for (auto* p : layer.params()) analytic.push_back(p->grad);

    const std::vector<nn::ParamT<long double>*> twin_params = twin.params();
    const std::vector<nn::ParamT<double>*> layer_params = layer.params();
    for (std::size_t pi = 0; pi < twin_params.size(); ++pi)
        twin_params[pi]->value = layer_params[pi]->value.template cast<long double>();
    nn::MatX<long double> x_twin = x.cast<long double>();
    const nn::MatX<long double> weights_twin = weights.cast<long double>();
    const auto value = [&]() -> long double {
        return (weights_twin.array() * twin.forward(x_twin, batch).array()).sum();
    };

    double worst = 0;
    const double eps = 1e-3;
    for (std::size_t pi = 0; pi < twin_params.size(); ++pi) {
        nn::ParamT<long double>* p = twin_params[pi];
        for (long i = 0; i < p->value.size(); ++i, ++*probes)
            worst = std::max(worst, rel_error(analytic[pi].data()[i],
                                              central_diff(value, p->value.data()[i], eps)));
    }
    for (long i = 0; i < x.size(); ++i, ++*probes)
        worst = std::max(worst, rel_error(dx.data()[i], central_diff(value, x_twin.data()[i], eps)));
    return worst;
}

nn::MatX<double> random_inputs(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
    RngStream rng(seed);
    nn::MatX<double> x(rows, cols);
    for (long i = 0; i < x.size(); ++i) x.data()[i] = scale * rng.normal();
    return x;
}

Outcome criterion_gradients() {
    const auto start = Clock::now();
    Outcome out;
    const double bar = 1e-5;

    // Whole networks, one per variant: every parameter entry for the compact
    // stacks, a seeded subsample for the two fixed-size full stacks whose
    // recurrent matrices are too large to probe exhaustively within budget.
    struct Plan {
        nn::ModelVariant variant;
        long cap; // entries per parameter, -1 = all
    };
    const std::vector<Plan> plans = {{nn::ModelVariant::Hybrid, -1},
                                     {nn::ModelVariant::CnnOnly, -1},
                                     {nn::ModelVariant::RnnOnly, -1},
                                     {nn::ModelVariant::CnnFull, 400},
                                     {nn::ModelVariant::RnnFull, 10}};
    double worst_net = 0;
    long net_entries = 0;
    for (const Plan& plan : plans) {
        const nn::GradientCheckResult r =
            nn::gradient_check(tiny_model(plan.variant), 5, 1e-4, 12, -1, plan.cap);
        net_entries += r.parameters_checked;
        worst_net = std::max(worst_net, r.max_rel_error);
        out.require(r.max_rel_error < bar,
                    nn::to_string(plan.variant) + " network max rel err " + fmt(r.max_rel_error) +
                        " at " + r.worst_param + " (bar " + fmt(bar) + ")");
    }

    // Individual layers, including the linear dense activation that no
    // variant reaches. All of these are smooth, so plain central differences
    // are valid; the leaky-relu path is covered by the network checks above,
    // whose probes detect and step back from the kink.
    long layer_probes = 0;
    double worst_layer = 0;
    {
        nn::Conv1dT<double> conv("conv", 3, 4, 3);
        nn::Conv1dT<long double> conv_twin("conv", 3, 4, 3);
        worst_layer = std::max(worst_layer, layer_probe(conv, conv_twin, random_inputs(24, 3, 101),
                                                        2, 201, &layer_probes));
        nn::GruT<double> gru("gru", 3, 5);
        nn::GruT<long double> gru_twin("gru", 3, 5);
        worst_layer = std::max(worst_layer, layer_probe(gru, gru_twin, random_inputs(24, 3, 102),
                                                        2, 202, &layer_probes));
        nn::DenseT<double> linear("dense", 4, 3, nn::Activation::Linear);
        nn::DenseT<long double> linear_twin("dense", 4, 3, nn::Activation::Linear);
        worst_layer = std::max(worst_layer, layer_probe(linear, linear_twin,
                                                        random_inputs(24, 4, 103), 2, 203,
                                                        &layer_probes));
        nn::DenseT<double> softmax("dense", 4, 3, nn::Activation::Softmax);
        nn::DenseT<long double> softmax_twin("dense", 4, 3, nn::Activation::Softmax);
        worst_layer = std::max(worst_layer, layer_probe(softmax, softmax_twin,
                                                        random_inputs(24, 4, 104), 2, 204,
                                                        &layer_probes));
    }
    out.require(worst_layer < bar, "layer probes max rel err " + fmt(worst_layer));

    // Dice loss gradient, with masked rows.
    {
        RngStream rng(303);
        const int rows = 30, classes = 4;
        nn::MatX<double> probs(rows, classes);
        for (int r = 0; r < rows; ++r) {
            double denom = 0;
            for (int c = 0; c < classes; ++c) {
                probs(r, c) = std::exp(rng.normal());
                denom += probs(r, c);
            }
            probs.row(r) /= denom;
        }
        std::vector<int> labels(rows);
        for (int r = 0; r < rows; ++r)
            labels[static_cast<std::size_t>(r)] =
                r % 7 == 3 ? -1 : static_cast<int>(rng.uniform_int(classes));
        const nn::DiceResult<double> base = nn::dice_loss<double>(probs, labels, classes);
        nn::MatX<long double> probs_twin = probs.cast<long double>();
        const auto value = [&]() -> long double {
            return nn::dice_loss<long double>(probs_twin, labels, classes).loss;
        };
        double worst_dice = 0;
        for (long i = 0; i < probs.size(); ++i, ++layer_probes)
            worst_dice = std::max(worst_dice, rel_error(base.grad.data()[i],
                                                        central_diff(value, probs_twin.data()[i], 1e-4)));
        out.require(worst_dice < bar, "dice loss max rel err " + fmt(worst_dice));
        worst_layer = std::max(worst_layer, worst_dice);
    }

    // The check itself must catch a deliberately corrupted gradient entry.
    const nn::GradientCheckResult corrupted =
        nn::gradient_check(tiny_model(nn::ModelVariant::Hybrid), 5, 1e-4, 12, 17);
    out.require(corrupted.max_rel_error > 1e-2,
                "corrupted gradient went undetected (rel err " + fmt(corrupted.max_rel_error) + ")");

    const double elapsed = seconds_since(start);
    out.require(elapsed < 60.0, "took " + fmt(elapsed, "%.1f") + " s (budget 60 s)");
    out.summary = "5 network variants (" + std::to_string(net_entries) +
                  " entries, full stacks subsampled) max rel err " + fmt(worst_net) +
                  "; conv/gru/dense-linear/dense-softmax/dice probes (" +
                  std::to_string(layer_probes) + " entries) max rel err " + fmt(worst_layer) +
                  "; bar 1e-5; corruption detected; " + fmt(elapsed, "%.1f") + " s < 60 s";
    return out;
}

// ---------------------------------------------------------------------------
// C2: fast change-point search against the exhaustive oracle
// ---------------------------------------------------------------------------

Outcome criterion_exact_search() {
    const auto start = Clock::now();
    Outcome out;
    RngStream rng(4701);
    int agreements = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int length = 6 + static_cast<int>(rng.uniform_int(19)); // 6..24
        const int channels = 1 + static_cast<int>(rng.uniform_int(3)); // 1..3
        Eigen::MatrixXd signal(length, channels);
        const int pieces = 1 + static_cast<int>(rng.uniform_int(3));
        std::vector<int> cuts{0, length};
        for (int p = 1; p < pieces; ++p)
            cuts.push_back(1 + static_cast<int>(rng.uniform_int(length - 1)));
        std::sort(cuts.begin(), cuts.end());
        for (std::size_t p = 0; p + 1 < cuts.size(); ++p) {
            for (int c = 0; c < channels; ++c) {
                const double mean = rng.uniform(-4, 4);
                for (int t = cuts[p]; t < cuts[p + 1]; ++t)
                    signal(t, c) = mean + 0.5 * rng.normal();
            }
        }

        const int min_size = 1 + trial % 2;
        for (const cpd::CostKind kind : {cpd::CostKind::L1, cpd::CostKind::L2}) {
            for (const double penalty : {0.5, 1.0, 5.0}) {
                cpd::DetectOptions opts;
                opts.penalty = penalty;
                opts.min_size = min_size;
                opts.jump = 1;
                const cpd::Segmentation fast =
                    cpd::detect_change_points(signal, kind, cpd::SearchMethod::Pelt, opts);
                const cpd::Segmentation oracle =
                    cpd::brute_force_segmentation(signal, kind, penalty, min_size);
                const cpd::SegmentCost cost(signal, kind);
                const double fast_total =
                    cpd::total_penalized_cost(cost, fast.breakpoints, penalty);
                const double oracle_total =
                    cpd::total_penalized_cost(cost, oracle.breakpoints, penalty);
                if (fast.total_cost == oracle.total_cost && fast_total == oracle_total) {
                    ++agreements;
                } else {
                    out.require(false, "trial " + std::to_string(trial) + " " +
                                           cpd::to_string(kind) + " penalty " + fmt(penalty) +
                                           ": fast " + fmt(fast.total_cost, "%.17g") +
                                           " vs oracle " + fmt(oracle.total_cost, "%.17g"));
                }
            }
        }
    }
    const double elapsed = seconds_since(start);
    out.require(elapsed < 60.0, "took " + fmt(elapsed, "%.1f") + " s (budget 60 s)");
    out.summary = std::to_string(agreements) +
                  "/600 exact objective matches (100 signals x {L1,L2} x 3 penalties, bitwise), " +
                  fmt(elapsed, "%.1f") + " s < 60 s";
    return out;
}

// ---------------------------------------------------------------------------
// C3: tolerant change-point scoring
// ---------------------------------------------------------------------------

Outcome criterion_scoring() {
    Outcome out;
    using eval::cpd_score_times;
    using eval::ToleranceMargin;

    // Worked example 1: one hit inside the margin, one miss on each side.
    {
        const eval::ScoreReport r = cpd_score_times({100, 200}, {103, 300}, ToleranceMargin{1.0, 5});
        out.require(r.tp == 1 && r.fp == 1 && r.fn == 1,
                    "example 1 counts tp/fp/fn = " + std::to_string(r.tp) + "/" +
                        std::to_string(r.fp) + "/" + std::to_string(r.fn) + ", want 1/1/1");
        out.require(std::abs(r.precision - 0.5) < 1e-12 && std::abs(r.recall - 0.5) < 1e-12 &&
                        std::abs(r.f1 - 0.5) < 1e-12,
                    "example 1 P/R/F1 " + fmt(r.precision) + "/" + fmt(r.recall) + "/" + fmt(r.f1) +
                        ", want 0.5 each");
    }
    // Worked example 2: the margin is a strict inequality.
    {
        out.require(cpd_score_times({100}, {105}, ToleranceMargin{1.0, 5}).tp == 0,
                    "example 2: |delta| = margin must not match");
        const eval::ScoreReport r = cpd_score_times({100}, {104}, ToleranceMargin{1.0, 5});
        out.require(r.tp == 1 && r.f1 == 1.0, "example 2: |delta| < margin must match exactly");
    }
    // Worked example 3: coverage counting, not one-to-one matching.
    {
        const eval::ScoreReport a = cpd_score_times({100, 104}, {102}, ToleranceMargin{1.0, 5});
        out.require(a.tp == 1 && a.fp == 0 && a.fn == 0,
                    "example 3a: one prediction covering two truths should score 1/0/0");
        const eval::ScoreReport b = cpd_score_times({100}, {98, 102}, ToleranceMargin{1.0, 5});
        out.require(b.tp == 2 && b.fp == 0 && b.fn == 0,
                    "example 3b: two predictions near one truth should score 2/0/0");
    }

    // F1 never decreases as the tolerance grows.
    RngStream rng(2112);
    int monotone = 0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> truth, pred;
        const int n_true = 2 + static_cast<int>(rng.uniform_int(6));
        const int n_pred = 2 + static_cast<int>(rng.uniform_int(6));
        for (int i = 0; i < n_true; ++i) truth.push_back(static_cast<int>(rng.uniform_int(500)));
        for (int i = 0; i < n_pred; ++i) pred.push_back(static_cast<int>(rng.uniform_int(500)));
        std::sort(truth.begin(), truth.end());
        std::sort(pred.begin(), pred.end());
        double last_f1 = -1;
        bool ok = true;
        for (const int tau : {5, 15, 25}) {
            const double f1 =
                cpd_score_times(truth, pred, ToleranceMargin{tau * 0.2, double(tau)}).f1;
            ok = ok && f1 >= last_f1;
            last_f1 = f1;
        }
        monotone += ok ? 1 : 0;
        out.require(ok, "trial " + std::to_string(trial) + ": F1 decreased with a wider margin");
    }
    out.summary = "3 worked examples reproduced (coverage counting, strict margin); F1 "
                  "non-decreasing in the tolerance on " +
                  std::to_string(monotone) + "/50 random pairs";
    return out;
}

// ---------------------------------------------------------------------------
// Shared laptop-scale experiment for C4-C6
// ---------------------------------------------------------------------------

fs::path g_out_root = "acceptance_out";

struct SharedExperiment {
    pipeline::ExperimentConfig config;
    fs::path dir;
    double recorded_seconds = 0; // from timings.json: the real stage runtimes
};

/// Run (or resume) the default-configuration experiment once per process.
/// A config marker protects against resuming artifacts of a stale config.
const SharedExperiment& shared_experiment() {
    static std::optional<SharedExperiment> cached;
    if (cached) return *cached;

    SharedExperiment sh;
    sh.config = pipeline::ExperimentConfig{};
    sh.dir = g_out_root / "experiment";
    const std::string marker = sh.config.to_json_text();
    const fs::path marker_file = sh.dir / "acceptance_config.json";
    if (fs::exists(marker_file) && slurp(marker_file) != marker) fs::remove_all(sh.dir);
    fs::create_directories(sh.dir);
    {
        std::ofstream out(marker_file, std::ios::binary);
        out << marker;
    }

    pipeline::RunOptions opts;
    opts.threads = 1;
    opts.log = &std::cerr;
    pipeline::run_experiment(sh.config, sh.dir, opts);

    const json timings = json::parse(slurp(sh.dir / pipeline::artifact::timings_json));
    sh.recorded_seconds = timings.at("total_seconds").get<double>();
    cached = std::move(sh);
    return *cached;
}

Outcome criterion_experiment() {
    Outcome out;
    const SharedExperiment& sh = shared_experiment();

    // Best classical change-point baseline at the 5 s tolerance.
    const auto cpd_rows = read_csv(sh.dir / pipeline::artifact::cpd_csv);
    const int cpd_tau = column(cpd_rows[0], "tau_seconds");
    const int cpd_f1c = column(cpd_rows[0], "f1");
    double best_cpd = -1;
    std::string best_cpd_desc;
    for (std::size_t i = 1; i < cpd_rows.size(); ++i) {
        if (std::stod(cpd_rows[i][static_cast<std::size_t>(cpd_tau)]) != 5.0) continue;
        const double f1 = std::stod(cpd_rows[i][static_cast<std::size_t>(cpd_f1c)]);
        if (f1 > best_cpd) {
            best_cpd = f1;
            best_cpd_desc = cpd_rows[i][0] + "/" + cpd_rows[i][1] + "/beta=" + cpd_rows[i][2];
        }
    }

    // Best classical per-step classifier over every window/setting.
    const auto ml_rows = read_csv(sh.dir / pipeline::artifact::ml_csv);
    const int ml_f1c = column(ml_rows[0], "f1");
    double best_ml = -1;
    std::string best_ml_desc;
    for (std::size_t i = 1; i < ml_rows.size(); ++i) {
        const double f1 = std::stod(ml_rows[i][static_cast<std::size_t>(ml_f1c)]);
        if (f1 > best_ml) {
            best_ml = f1;
            best_ml_desc = ml_rows[i][1] + " w=" + ml_rows[i][0];
        }
    }

    // The trained model's scores on the held-out test traces.
    const auto scores = read_csv(sh.dir / pipeline::artifact::scores_csv);
    const int sc_variant = column(scores[0], "variant");
    const int sc_tau = column(scores[0], "tau_seconds");
    const int sc_cpd_f1 = column(scores[0], "cpd_f1");
    const int sc_class_f1 = column(scores[0], "class_f1");
    double model_cpd = -1, model_class = -1;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i][static_cast<std::size_t>(sc_variant)] != "hybrid") continue;
        model_class = std::stod(scores[i][static_cast<std::size_t>(sc_class_f1)]);
        if (std::stod(scores[i][static_cast<std::size_t>(sc_tau)]) == 5.0)
            model_cpd = std::stod(scores[i][static_cast<std::size_t>(sc_cpd_f1)]);
    }

    out.require(best_cpd >= 0 && best_ml >= 0 && model_cpd >= 0 && model_class >= 0,
                "missing rows in the experiment reports");
    out.require(model_cpd > best_cpd, "change-point F1 at 5 s: model " + fmt(model_cpd) +
                                          " must beat best baseline " + fmt(best_cpd) + " (" +
                                          best_cpd_desc + ")");
    out.require(model_class > best_ml, "classification F1: model " + fmt(model_class) +
                                           " must beat best baseline " + fmt(best_ml) + " (" +
                                           best_ml_desc + ")");
    out.require(model_class >= 0.85,
                "classification F1 " + fmt(model_class) + " below the 0.85 floor");
    out.require(sh.recorded_seconds <= 2700.0, "recorded stage runtime " +
                                                   fmt(sh.recorded_seconds, "%.0f") +
                                                   " s exceeds the 2700 s budget");
    out.summary = "120-trace experiment: change-point F1@5s " + fmt(model_cpd) +
                  " > best of 24 baseline settings " + fmt(best_cpd) + " (" + best_cpd_desc +
                  "); classification F1 " + fmt(model_class) + " > best classical " + fmt(best_ml) +
                  " (" + best_ml_desc + ") and >= 0.85; stages took " +
                  fmt(sh.recorded_seconds, "%.0f") + " s <= 2700 s";
    return out;
}

// ---------------------------------------------------------------------------
// C5: ablations
// ---------------------------------------------------------------------------

Outcome criterion_ablations() {
    Outcome out;
    const SharedExperiment& sh = shared_experiment();
    const auto scores = read_csv(sh.dir / pipeline::artifact::scores_csv);
    const int sc_variant = column(scores[0], "variant");
    const int sc_class_f1 = column(scores[0], "class_f1");
    std::map<std::string, double> f1;
    for (std::size_t i = 1; i < scores.size(); ++i)
        f1[scores[i][static_cast<std::size_t>(sc_variant)]] =
            std::stod(scores[i][static_cast<std::size_t>(sc_class_f1)]);
    for (const char* variant : {"hybrid", "cnn_only", "rnn_only"})
        out.require(f1.count(variant) == 1, std::string("missing scores for ") + variant);
    if (!out.pass()) return out;

    const double hybrid = f1["hybrid"], cnn = f1["cnn_only"], rnn = f1["rnn_only"];
    out.require(hybrid >= rnn, "hybrid " + fmt(hybrid) + " < recurrent-only " + fmt(rnn));
    out.require(rnn >= hybrid - 0.15,
                "recurrent-only " + fmt(rnn) + " more than 0.15 below hybrid " + fmt(hybrid));
    out.require(hybrid > cnn, "hybrid " + fmt(hybrid) + " <= conv-only " + fmt(cnn));
    out.require(hybrid >= std::max(cnn, rnn), "hybrid below the best single-branch ablation");
    out.summary = "classification F1: hybrid " + fmt(hybrid) + " >= recurrent-only " + fmt(rnn) +
                  " >= hybrid-0.15, and hybrid > conv-only " + fmt(cnn);
    return out;
}

// ---------------------------------------------------------------------------
// C6: transfer to the second plant variant
// ---------------------------------------------------------------------------

Outcome criterion_transfer() {
    Outcome out;
    const SharedExperiment& sh = shared_experiment();

    pipeline::TransferConfig tc;
    tc.source_checkpoint =
        (sh.dir / pipeline::artifact::checkpoints_dir / "hybrid.ckpt").string();
    tc.variant_b.variant = "variant_b";
    tc.variant_b.count = 45; // 5 folds x 5 traces + 20 held-out eval traces
    tc.folds = 5;
    tc.traces_per_fold = 5;
    tc.eval_reserve_min = 10;
    tc.master_seed = 1;

    const fs::path dir = g_out_root / "transfer";
    // Cache key: the settings plus the exact source checkpoint bytes.
    const std::string marker =
        "ckpt_hash=" + std::to_string(std::hash<std::string>{}(slurp(tc.source_checkpoint))) +
        "|count=45|folds=5|per_fold=5|reserve=10|seed=1|epochs=" + std::to_string(tc.max_epochs) +
        "|patience=" + std::to_string(tc.patience) + "|lr=" + fmt(tc.fine_tune_lr);
    const fs::path marker_file = dir / "acceptance_marker.txt";
    const fs::path summary_file = dir / "transfer_summary.json";

    double mean_ft = 0, mean_scratch = 0;
    bool freeze_ok = false;
    int folds = 0;
    if (fs::exists(marker_file) && slurp(marker_file) == marker && fs::exists(summary_file)) {
        const json summary = json::parse(slurp(summary_file));
        mean_ft = summary.at("mean_fine_tuned").at("class_f1").get<double>();
        mean_scratch = summary.at("mean_scratch").at("class_f1").get<double>();
        freeze_ok = summary.at("all_freeze_ok").get<bool>();
        folds = summary.at("folds").get<int>();
    } else {
        fs::remove_all(dir);
        fs::create_directories(dir);
        pipeline::RunOptions opts;
        opts.threads = 1;
        opts.log = &std::cerr;
        const pipeline::TransferReport report = pipeline::transfer_experiment(tc, dir, opts);
        mean_ft = report.mean_fine_tuned.class_f1;
        mean_scratch = report.mean_scratch.class_f1;
        freeze_ok = report.all_freeze_ok;
        folds = static_cast<int>(report.fine_tuned.size());
        std::ofstream mk(marker_file, std::ios::binary);
        mk << marker;
    }

    out.require(folds >= 5, "only " + std::to_string(folds) + " folds, need >= 5");
    out.require(freeze_ok, "non-selected weights changed during fine-tuning");
    out.require(mean_ft >= mean_scratch, "fine-tuned mean F1 " + fmt(mean_ft) +
                                             " below from-scratch mean " + fmt(mean_scratch));
    out.summary = std::to_string(folds) +
                  " folds x 5 traces on the second plant variant: fine-tuned mean F1 " +
                  fmt(mean_ft) + " >= from-scratch " + fmt(mean_scratch) +
                  "; frozen layers bit-identical in every fold";
    return out;
}

// ---------------------------------------------------------------------------
// C7: bit-reproducibility of the whole pipeline
// ---------------------------------------------------------------------------

Outcome criterion_reproducibility() {
    Outcome out;
    const auto cfg = pipeline::ExperimentConfig::from_json_text(R"({
        "master_seed": 11,
        "dataset": {"simgen": {"count": 16, "min_length": 300, "max_length": 900,
                               "plan": {"min_commands": 3, "max_commands": 5}}},
        "model": {"conv_stack": [[8, 3], [8, 5]], "gru_stack": [12], "dense_hidden": 16,
                  "batch_size": 8, "max_epochs": 6, "patience": 6},
        "ablations": ["cnn_only", "rnn_only"],
        "cpd": {"penalties": [100, 500]},
        "ml": {"windows": [3, 5], "cart_max_depths": [5], "max_train_windows": 20000}
    })");

    const fs::path a = g_out_root / "repro_a";
    const fs::path b = g_out_root / "repro_b";
    pipeline::RunOptions opts;
    opts.threads = 1;
    for (const fs::path& dir : {a, b}) {
        fs::remove_all(dir);
        pipeline::run_experiment(cfg, dir, opts);
    }

    const std::vector<std::string> files = {
        pipeline::artifact::split_csv,  pipeline::artifact::cpd_csv,
        pipeline::artifact::ml_csv,     pipeline::artifact::scores_csv,
        pipeline::artifact::timeline_csv, pipeline::artifact::summary_json};
    int identical = 0;
    for (const std::string& file : files) {
        if (slurp(a / file) == slurp(b / file))
            ++identical;
        else
            out.require(false, file + " differs between the two runs");
    }
    out.summary = "two fresh single-threaded runs of a reduced full-stage config: " +
                  std::to_string(identical) + "/" + std::to_string(files.size()) +
                  " report files byte-identical";
    return out;
}

// ---------------------------------------------------------------------------
// C8: structural invariants
// ---------------------------------------------------------------------------

Dataset handmade_dataset(std::uint64_t seed, const std::vector<int>& lengths) {
    Dataset ds;
    ds.catalog = StateCatalog({"s0", "s1", "s2", "s3"});
    for (int c = 0; c < 3; ++c)
        ds.schema.push_back({"ch" + std::to_string(c), ChannelKind::Input, ""});
    RngStream rng(seed);
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        MultivariateTrace trace;
        trace.schema = ds.schema;
        trace.samples.resize(lengths[i], 3);
        for (long k = 0; k < trace.samples.size(); ++k) trace.samples.data()[k] = rng.normal();
        ChangePointAnnotation ann;
        ann.entries = {{0, 0}, {lengths[i] / 2, 1}};
        ds.items.push_back({"t" + std::to_string(i), std::move(trace), ann});
    }
    return ds;
}

Outcome criterion_invariants() {
    Outcome out;

    // Class probabilities are a distribution at every step.
    {
        nn::NetworkT<double> net(tiny_model(nn::ModelVariant::Hybrid));
        nn::BatchT<double> batch;
        batch.batch = 2;
        batch.length = 16;
        batch.features = 3;
        batch.valid = {16, 16};
        batch.x = random_inputs(32, 3, 901);
        batch.labels.assign(32, 0);
        const nn::MatX<double> probs = net.forward(batch);
        double worst = 0;
        for (long r = 0; r < probs.rows(); ++r)
            worst = std::max(worst, std::abs(probs.row(r).sum() - 1.0));
        out.require(worst <= 1e-6, "probability row sum off by " + fmt(worst) + " (bar 1e-6)");
    }

    // Dice loss: always in [0, 1), exactly zero only for a perfect prediction.
    {
        nn::MatX<double> perfect = nn::MatX<double>::Zero(6, 3);
        std::vector<int> labels = {0, 2, 2, 0, 1, 2};
        for (int r = 0; r < 6; ++r) perfect(r, labels[static_cast<std::size_t>(r)]) = 1.0;
        const double zero = nn::dice_loss<double>(perfect, labels, 3).loss;
        out.require(zero == 0.0, "perfect prediction should give exactly zero, got " + fmt(zero));

        RngStream rng(902);
        bool in_range = true, positive = true;
        for (int trial = 0; trial < 50; ++trial) {
            const int rows = 4 + static_cast<int>(rng.uniform_int(30));
            nn::MatX<double> probs(rows, 3);
            std::vector<int> y(static_cast<std::size_t>(rows));
            for (int r = 0; r < rows; ++r) {
                double denom = 0;
                for (int c = 0; c < 3; ++c) {
                    probs(r, c) = std::exp(2 * rng.normal());
                    denom += probs(r, c);
                }
                probs.row(r) /= denom;
                y[static_cast<std::size_t>(r)] = static_cast<int>(rng.uniform_int(3));
            }
            const double loss = nn::dice_loss<double>(probs, y, 3).loss;
            in_range = in_range && loss >= 0.0 && loss < 1.0;
            positive = positive && loss > 0.0; // softmax output is never exactly one-hot
        }
        out.require(in_range, "dice loss left [0, 1) on random inputs");
        out.require(positive, "dice loss hit zero on an imperfect prediction");
    }

    // Trailing padding changes neither the valid-step outputs nor the loss.
    {
        nn::Network net(tiny_model(nn::ModelVariant::Hybrid));
        nn::Batch batch;
        batch.batch = 2;
        batch.length = 8;
        batch.features = 3;
        batch.valid = {8, 8};
        batch.x.setZero(16, 3);
        batch.labels.assign(16, 0);
        RngStream rng(903);
        for (long i = 0; i < batch.x.size(); ++i) batch.x.data()[i] = static_cast<float>(rng.normal());
        for (auto& l : batch.labels) l = static_cast<int>(rng.uniform_int(4));

        nn::Batch padded = batch;
        padded.length = 13;
        padded.x.setZero(26, 3);
        padded.labels.assign(26, -1);
        for (int t = 0; t < 8; ++t)
            for (int s = 0; s < 2; ++s) {
                padded.x.row(t * 2 + s) = batch.x.row(t * 2 + s);
                padded.labels[static_cast<std::size_t>(t) * 2 + s] =
                    batch.labels[static_cast<std::size_t>(t) * 2 + s];
            }
        const nn::MatX<float> y = net.forward(batch);
        const nn::MatX<float> yp = net.forward(padded);
        bool same = true;
        for (int t = 0; t < 8; ++t)
            for (int s = 0; s < 2; ++s)
                same = same && (y.row(t * 2 + s).array() == yp.row(t * 2 + s).array()).all();
        out.require(same, "padding changed valid-step outputs");
        const float l0 = nn::dice_loss<float>(y, batch.labels, 4).loss;
        const float l1 = nn::dice_loss<float>(yp, padded.labels, 4).loss;
        out.require(l0 == l1, "padding changed the loss");
    }

    // Annotation expansion and change-point extraction invert each other.
    {
        RngStream rng(904);
        int round_trips = 0;
        for (int trial = 0; trial < 50; ++trial) {
            const int length = 20 + static_cast<int>(rng.uniform_int(60));
            ChangePointAnnotation ann;
            int state = static_cast<int>(rng.uniform_int(4));
            ann.entries.push_back({0, state});
            int t = 0;
            while (true) {
                t += 1 + static_cast<int>(rng.uniform_int(12));
                if (t >= length) break;
                int next = static_cast<int>(rng.uniform_int(4));
                if (next == state) next = (next + 1) % 4;
                state = next;
                ann.entries.push_back({t, state});
            }
            const LabelSequence seq = expand_annotation(ann, length);
            const ChangePointAnnotation back = extract_change_points(seq);
            if (back == ann) ++round_trips;
        }
        out.require(round_trips == 50,
                    "only " + std::to_string(round_trips) + "/50 annotation round-trips survived");
    }

    // Checkpoint save/load is bit-exact and prediction-identical.
    {
        const Dataset ds = handmade_dataset(905, {24, 18});
        nn::Network net(tiny_model(nn::ModelVariant::Hybrid));
        nn::ModelCheckpoint ckpt;
        ckpt.config = tiny_model(nn::ModelVariant::Hybrid);
        ckpt.schema = ds.schema;
        ckpt.catalog = ds.catalog;
        ckpt.sample_period = ds.sample_period;
        ckpt.stats = compute_norm_stats(ds);
        ckpt.weights = nn::export_weights(net);
        ckpt.history.push_back({1, 0.5, 0.4, 0.6, 0.7});

        const fs::path file = g_out_root / "roundtrip.ckpt";
        fs::create_directories(g_out_root);
        ckpt.save(file);
        const nn::ModelCheckpoint back = nn::ModelCheckpoint::load(file);
        bool weights_equal = back.weights.size() == ckpt.weights.size();
        for (std::size_t i = 0; weights_equal && i < back.weights.size(); ++i)
            weights_equal = back.weights[i].first == ckpt.weights[i].first &&
                            (back.weights[i].second.array() == ckpt.weights[i].second.array()).all();
        out.require(weights_equal, "checkpoint weights not bit-identical after reload");
        out.require(back.config == ckpt.config && back.catalog == ckpt.catalog &&
                        back.schema == ckpt.schema,
                    "checkpoint metadata changed across the round-trip");
        const LabelSequence before = nn::predict_states(ckpt, ds.items[0].trace);
        const LabelSequence after = nn::predict_states(back, ds.items[0].trace);
        out.require(before.labels == after.labels && before.mask == after.mask,
                    "prediction changed after checkpoint reload");
        fs::remove(file);
    }

    // The ridge closed form satisfies the centered normal equations.
    double ridge_residual = 0;
    {
        RngStream rng(906);
        Eigen::MatrixXd X(40, 6);
        for (long i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
        std::vector<int> y(40);
        for (auto& label : y) label = static_cast<int>(rng.uniform_int(3));
        const double alpha = 0.7;
        const baselines::RidgeClassifier model = baselines::RidgeClassifier::fit(X, y, 3, alpha);
        const Eigen::RowVectorXd mean = X.colwise().mean();
        const Eigen::MatrixXd centered = X.rowwise() - mean;
        Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(40, 3);
        for (long i = 0; i < 40; ++i) onehot(i, y[static_cast<std::size_t>(i)]) = 1.0;
        const Eigen::MatrixXd targets = onehot.rowwise() - onehot.colwise().mean();
        ridge_residual = (centered.transpose() * (centered * model.weights() - targets) +
                          alpha * model.weights())
                             .cwiseAbs()
                             .maxCoeff();
        out.require(ridge_residual <= 1e-8,
                    "ridge normal-equation residual " + fmt(ridge_residual) + " (bar 1e-8)");
    }

    out.summary =
        "probability rows sum to 1 within 1e-6; dice in [0,1) and 0 exactly iff perfect; "
        "padding-invariant outputs and loss; 50/50 annotation round-trips; checkpoint "
        "round-trip bit-exact; ridge optimality residual " +
        fmt(ridge_residual) + " <= 1e-8";
    return out;
}

} // namespace

int main(int argc, char** argv) {
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--only" && i + 1 < argc) {
            std::istringstream list(argv[++i]);
            std::string token;
            while (std::getline(list, token, ',')) only.push_back(std::stoi(token));
        } else if (arg == "--out" && i + 1 < argc) {
            g_out_root = argv[++i];
        } else {
            std::cerr << "usage: acceptance_gate [--only 1,2,...] [--out DIR]\n";
            return 2;
        }
    }

    struct Criterion {
        int id;
        const char* name;
        Outcome (*run)();
    };
    const std::vector<Criterion> criteria = {
        {1, "gradient oracle", criterion_gradients},
        {2, "exact search objective", criterion_exact_search},
        {3, "tolerant scoring", criterion_scoring},
        {4, "beats classical baselines", criterion_experiment},
        {5, "ablation ordering", criterion_ablations},
        {6, "transfer to a new plant", criterion_transfer},
        {7, "bit-reproducible pipeline", criterion_reproducibility},
        {8, "structural invariants", criterion_invariants},
    };

    int failures = 0;
    for (const Criterion& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        Outcome outcome;
        try {
            outcome = c.run();
        } catch (const std::exception& e) {
            outcome.require(false, std::string("exception: ") + e.what());
        }
        failures += outcome.pass() ? 0 : 1;
        std::printf("C%d %s — %s: %s\n", c.id, outcome.pass() ? "PASS" : "FAIL", c.name,
                    outcome.detail().c_str());
        std::fflush(stdout);
    }
    return failures;
}
