#include "statetrace/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

namespace statetrace::eval {

ScoreReport ScoreReport::from_counts(long tp, long fp, long fn) {
    ScoreReport r;
    r.tp = tp;
    r.fp = fp;
    r.fn = fn;
    r.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    const long denom = 2 * tp + fp + fn;
    r.f1 = denom > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
    return r;
}

ScoreReport cpd_score_times(const std::vector<int>& true_times, const std::vector<int>& pred_times,
                            const ToleranceMargin& tau) {
    long tp = 0, fp = 0, fn = 0;
    for (int p : pred_times) {
        bool matched = false;
        for (int t : true_times) {
            if (std::abs(t - p) < tau.samples) {
                matched = true;
                break;
            }
        }
        matched ? ++tp : ++fp;
    }
    for (int t : true_times) {
        bool matched = false;
        for (int p : pred_times) {
            if (std::abs(t - p) < tau.samples) {
                matched = true;
                break;
            }
        }
        if (!matched) ++fn;
    }
    return ScoreReport::from_counts(tp, fp, fn);
}

ScoreReport cpd_score(const ChangePointAnnotation& cp_true, const ChangePointAnnotation& cp_pred,
                      const ToleranceMargin& tau) {
    cp_true.validate();
    cp_pred.validate();
    return cpd_score_times(cp_true.change_times(), cp_pred.change_times(), tau);
}

ScoreReport cpd_score_one_to_one(const std::vector<int>& true_times,
                                 const std::vector<int>& pred_times, const ToleranceMargin& tau) {
    struct Pair {
        int dist;
        std::size_t ti, pi;
    };
    std::vector<Pair> pairs;
    for (std::size_t ti = 0; ti < true_times.size(); ++ti)
        for (std::size_t pi = 0; pi < pred_times.size(); ++pi) {
            const int d = std::abs(true_times[ti] - pred_times[pi]);
            if (d < tau.samples) pairs.push_back({d, ti, pi});
        }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        return a.dist < b.dist;
    });
    std::vector<bool> t_used(true_times.size(), false), p_used(pred_times.size(), false);
    long tp = 0;
    for (const auto& pr : pairs) {
        if (t_used[pr.ti] || p_used[pr.pi]) continue;
        t_used[pr.ti] = p_used[pr.pi] = true;
        ++tp;
    }
    return ScoreReport::from_counts(tp, static_cast<long>(pred_times.size()) - tp,
                                    static_cast<long>(true_times.size()) - tp);
}

namespace {

struct ClassCounts {
    long tp = 0, fp = 0, fn = 0;
    bool in_truth = false;
};

ClassificationReport report_from_counts(std::map<int, ClassCounts>& counts) {
    ClassificationReport rep;
    double sp = 0, sr = 0, sf = 0;
    for (auto& [id, c] : counts) {
        if (!c.in_truth) continue;
        rep.class_ids.push_back(id);
        rep.per_class.push_back(ScoreReport::from_counts(c.tp, c.fp, c.fn));
        sp += rep.per_class.back().precision;
        sr += rep.per_class.back().recall;
        sf += rep.per_class.back().f1;
    }
    const double n = static_cast<double>(rep.class_ids.size());
    if (n > 0) {
        rep.macro_precision = sp / n;
        rep.macro_recall = sr / n;
        rep.macro_f1 = sf / n;
    }
    return rep;
}

void accumulate(std::map<int, ClassCounts>& counts, const LabelSequence& truth,
                const LabelSequence& pred) {
    if (truth.length() != pred.length())
        throw std::runtime_error("classification_report: sequence length mismatch");
    const int n = std::min(truth.valid_length(), pred.valid_length());
    for (int t = 0; t < n; ++t) {
        const int o = truth.labels[static_cast<std::size_t>(t)];
        const int p = pred.labels[static_cast<std::size_t>(t)];
        counts[o].in_truth = true;
        if (o == p) {
            counts[o].tp += 1;
        } else {
            counts[o].fn += 1;
            counts[p].fp += 1;
        }
    }
}

} // namespace

ClassificationReport classification_report(const LabelSequence& truth, const LabelSequence& pred,
                                           const StateCatalog& catalog) {
    (void)catalog;
    std::map<int, ClassCounts> counts;
    accumulate(counts, truth, pred);
    return report_from_counts(counts);
}

ClassificationReport classification_report(const std::vector<LabelSequence>& truth,
                                           const std::vector<LabelSequence>& pred,
                                           const StateCatalog& catalog) {
    (void)catalog;
    if (truth.size() != pred.size())
        throw std::runtime_error("classification_report: trace count mismatch");
    std::map<int, ClassCounts> counts;
    for (std::size_t i = 0; i < truth.size(); ++i) accumulate(counts, truth[i], pred[i]);
    return report_from_counts(counts);
}

namespace {

/// Ranks with average ranks for ties, 1-based.
std::vector<double> average_ranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

} // namespace

Eigen::MatrixXd spearman_matrix(const Dataset& dataset) {
    const int n = static_cast<int>(dataset.schema.size());
    long total = 0;
    for (const auto& it : dataset.items) total += it.trace.length();

    Eigen::MatrixXd ranks(total, n);
    for (int c = 0; c < n; ++c) {
        std::vector<double> col;
        col.reserve(static_cast<std::size_t>(total));
        for (const auto& it : dataset.items)
            for (int t = 0; t < it.trace.length(); ++t) col.push_back(it.trace.samples(t, c));
        const std::vector<double> r = average_ranks(col);
        for (long i = 0; i < total; ++i) ranks(i, c) = r[static_cast<std::size_t>(i)];
    }

    const Eigen::RowVectorXd mean = ranks.colwise().mean();
    Eigen::MatrixXd centered = ranks.rowwise() - mean;
    Eigen::VectorXd sd(n);
    for (int c = 0; c < n; ++c) sd[c] = centered.col(c).norm();

    Eigen::MatrixXd corr = Eigen::MatrixXd::Identity(n, n);
    for (int a = 0; a < n; ++a) {
        if (sd[a] == 0.0)
            std::fprintf(stderr, "spearman_matrix: channel '%s' is constant, correlation set to 0\n",
                         dataset.schema[static_cast<std::size_t>(a)].name.c_str());
        for (int b = a + 1; b < n; ++b) {
            double value = 0.0;
            if (sd[a] > 0.0 && sd[b] > 0.0)
                value = centered.col(a).dot(centered.col(b)) / (sd[a] * sd[b]);
            corr(a, b) = corr(b, a) = value;
        }
    }
    return corr;
}

} // namespace statetrace::eval
