#pragma once

#include "statetrace/trace.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace statetrace::baselines {

// ---------------------------------------------------------------------------
// Sliding-window feature extraction
// ---------------------------------------------------------------------------

/// Flattened sliding windows over a multivariate trace. Row i holds the
/// window ending at step w-1+i; within a row, features are ordered
/// channels-major within step, steps oldest to newest (feature index
/// step*channels + channel). Each row's label is the state at the window's
/// final step.
struct WindowedSamples {
    int window = 0;
    int channels = 0;
    Eigen::MatrixXd features; // samples x (window*channels)
    std::vector<int> labels;  // one per row

    long size() const { return features.rows(); }
    int feature_count() const { return window * channels; }
};

/// Slide a width-w window over the unmasked prefix of the trace, one step at
/// a time. Produces exactly l - w + 1 samples for a valid length l; windows
/// never touch masked (padded) steps. Throws when w < 1 or w exceeds the
/// valid length.
WindowedSamples window_features(const MultivariateTrace& trace, const LabelSequence& labels,
                                int w);

/// Concatenate two compatible window sets (same window and channel counts).
void append_windows(WindowedSamples& into, const WindowedSamples& more);

// ---------------------------------------------------------------------------
// Ridge classifier
// ---------------------------------------------------------------------------

/// 13 log-spaced regularization strengths from 1e-6 to 1e6.
std::vector<double> default_ridge_alphas();

/// One-vs-all ridge regression on one-hot targets, solved in closed form
/// (normal equations with an unregularized intercept via centering).
/// Prediction is the argmax over per-class regression scores with ties
/// broken toward the lowest class id.
class RidgeClassifier {
public:
    /// Closed-form fit at a fixed regularization strength.
    static RidgeClassifier fit(const Eigen::MatrixXd& X, const std::vector<int>& y, int n_classes,
                               double alpha);

    /// Pick alpha by k-fold cross-validated accuracy (folds assigned
    /// round-robin by sample index; ties toward the smaller alpha), then
    /// refit on all samples. Throws when there are fewer samples than folds.
    static RidgeClassifier fit_cv(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                  int n_classes,
                                  const std::vector<double>& alphas = default_ridge_alphas(),
                                  int folds = 5);

    int predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
    std::vector<int> predict_rows(const Eigen::MatrixXd& X) const;
    /// Per-class regression scores for one sample.
    Eigen::RowVectorXd scores(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;

    double alpha() const { return alpha_; }
    int n_classes() const { return static_cast<int>(weights_.cols()); }
    const Eigen::MatrixXd& weights() const { return weights_; }
    const Eigen::RowVectorXd& intercept() const { return intercept_; }

private:
    double alpha_ = 0;
    Eigen::MatrixXd weights_;      // features x classes
    Eigen::RowVectorXd intercept_; // 1 x classes
};

// ---------------------------------------------------------------------------
// CART decision tree
// ---------------------------------------------------------------------------

/// Per-node feature subsampling rule: all features, floor(sqrt(p)), or
/// floor(log2(p)) (always at least one).
enum class MaxFeatures { All, Sqrt, Log2 };

std::string to_string(MaxFeatures mf);
MaxFeatures max_features_from_string(const std::string& name);

struct CartOptions {
    int max_depth = -1; // negative: unlimited; 0: root is a leaf (majority class)
    MaxFeatures max_features = MaxFeatures::All;
    std::uint64_t seed = 1;
};

/// Binary CART classifier: Gini impurity, split thresholds at midpoints of
/// consecutive distinct feature values, leaves predict their majority class
/// (ties toward the lowest class id). Feature subsampling draws from a
/// per-node substream of the seed, so fitting is deterministic. Splits are
/// only made while they strictly reduce the weighted impurity.
class CartClassifier {
public:
    static CartClassifier fit(const Eigen::MatrixXd& X, const std::vector<int>& y, int n_classes,
                              const CartOptions& options = {});

    int predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
    std::vector<int> predict_rows(const Eigen::MatrixXd& X) const;

    int node_count() const { return static_cast<int>(nodes_.size()); }
    int leaf_count() const;
    /// Length of the longest root-to-leaf path in splits (0 for a single leaf).
    int depth() const;

private:
    struct Node {
        int feature = -1; // -1: leaf
        double threshold = 0;
        int left = -1;
        int right = -1;
        int label = -1;
        int depth = 0;
    };
    std::vector<Node> nodes_;
};

} // namespace statetrace::baselines
