#pragma once

#include "statetrace/trace.hpp"

#include <Eigen/Dense>

#include <vector>

namespace statetrace::eval {

/// Tolerance margin for change-point matching, kept both in seconds and in
/// samples at the trace's sampling rate.
struct ToleranceMargin {
    double seconds = 5.0;
    double samples = 25.0;

    static ToleranceMargin from_seconds(double seconds, double sample_period) {
        if (seconds <= 0) throw std::invalid_argument("tolerance margin must be positive");
        return {seconds, seconds / sample_period};
    }
};

struct ScoreReport {
    long tp = 0;
    long fp = 0;
    long fn = 0;
    double precision = 0;
    double recall = 0;
    double f1 = 0;

    static ScoreReport from_counts(long tp, long fp, long fn);
};

/// Change-point confusion counts under a tolerance margin. A predicted point
/// is a TP when some true point lies strictly within tau samples of it, an FP
/// otherwise; a true point with no predicted point within tau is an FN. There
/// is no one-to-one matching: the counts follow the set definitions exactly.
/// The t = 0 initial-state entries are excluded from both sets.
ScoreReport cpd_score(const ChangePointAnnotation& cp_true, const ChangePointAnnotation& cp_pred,
                      const ToleranceMargin& tau);

/// Same scoring on raw change times (already excluding any initial-state entry).
ScoreReport cpd_score_times(const std::vector<int>& true_times, const std::vector<int>& pred_times,
                            const ToleranceMargin& tau);

/// Diagnostic variant with greedy one-to-one matching (closest pairs first).
/// Not the published definition; reported alongside it for comparison only.
ScoreReport cpd_score_one_to_one(const std::vector<int>& true_times,
                                 const std::vector<int>& pred_times, const ToleranceMargin& tau);

struct ClassificationReport {
    std::vector<int> class_ids;           // classes present in the ground truth
    std::vector<ScoreReport> per_class;   // aligned with class_ids
    double macro_precision = 0;
    double macro_recall = 0;
    double macro_f1 = 0;
};

/// Per-class one-vs-rest precision/recall/F1 over time steps plus unweighted
/// macro means across the classes present in the ground truth. Masked steps
/// are skipped in both sequences.
ClassificationReport classification_report(const LabelSequence& truth, const LabelSequence& pred,
                                           const StateCatalog& catalog);

/// Pooled variant over many traces (counts summed before macro averaging).
ClassificationReport classification_report(const std::vector<LabelSequence>& truth,
                                           const std::vector<LabelSequence>& pred,
                                           const StateCatalog& catalog);

/// Spearman rank correlation between every pair of channels, computed over
/// the concatenated samples of all traces (average ranks on ties). A constant
/// channel yields 0 against everything else, with a warning on stderr.
Eigen::MatrixXd spearman_matrix(const Dataset& dataset);

} // namespace statetrace::eval
