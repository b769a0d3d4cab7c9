#include "statetrace/baselines.hpp"

#include "statetrace/common.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace statetrace::baselines {

// ---------------------------------------------------------------------------
// Sliding-window feature extraction
// ---------------------------------------------------------------------------

WindowedSamples window_features(const MultivariateTrace& trace, const LabelSequence& labels,
                                int w) {
    if (labels.length() != trace.length())
        throw std::invalid_argument("window_features: label sequence length does not match trace");
    const int valid = labels.valid_length();
    if (w < 1) throw std::invalid_argument("window_features: window width must be >= 1");
    if (w > valid)
        throw std::invalid_argument("window_features: window width " + std::to_string(w) +
                                    " exceeds the valid length " + std::to_string(valid));

    WindowedSamples out;
    out.window = w;
    out.channels = trace.channels();
    const long count = valid - w + 1;
    out.features.resize(count, static_cast<long>(w) * out.channels);
    out.labels.resize(static_cast<std::size_t>(count));
    for (long i = 0; i < count; ++i) {
        for (int s = 0; s < w; ++s)
            for (int c = 0; c < out.channels; ++c)
                out.features(i, static_cast<long>(s) * out.channels + c) =
                    trace.samples(i + s, c);
        out.labels[static_cast<std::size_t>(i)] = labels.labels[static_cast<std::size_t>(i + w - 1)];
    }
    return out;
}

void append_windows(WindowedSamples& into, const WindowedSamples& more) {
    if (into.size() == 0 && into.window == 0) {
        into = more;
        return;
    }
    if (into.window != more.window || into.channels != more.channels)
        throw std::invalid_argument("append_windows: incompatible window layouts");
    const long old_rows = into.features.rows();
    into.features.conservativeResize(old_rows + more.features.rows(), Eigen::NoChange);
    into.features.bottomRows(more.features.rows()) = more.features;
    into.labels.insert(into.labels.end(), more.labels.begin(), more.labels.end());
}

// ---------------------------------------------------------------------------
// Ridge classifier
// ---------------------------------------------------------------------------

std::vector<double> default_ridge_alphas() {
    std::vector<double> alphas;
    alphas.reserve(13);
    for (int k = -6; k <= 6; ++k) alphas.push_back(std::pow(10.0, k));
    return alphas;
}

namespace {

void check_labeled_matrix(const Eigen::MatrixXd& X, const std::vector<int>& y, int n_classes) {
    if (n_classes < 1) throw std::invalid_argument("classifier: n_classes must be >= 1");
    if (X.rows() == 0) throw std::invalid_argument("classifier: empty sample set");
    if (X.rows() != static_cast<long>(y.size()))
        throw std::invalid_argument("classifier: one label per sample row required");
    for (int label : y)
        if (label < 0 || label >= n_classes)
            throw std::invalid_argument("classifier: label outside the class range");
}

int argmax_lowest(const Eigen::RowVectorXd& scores) {
    int best = 0;
    for (int c = 1; c < scores.size(); ++c)
        if (scores(c) > scores(best)) best = c;
    return best;
}

} // namespace

RidgeClassifier RidgeClassifier::fit(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                     int n_classes, double alpha) {
    check_labeled_matrix(X, y, n_classes);
    if (!(alpha >= 0)) throw std::invalid_argument("ridge: alpha must be non-negative");

    const long n = X.rows(), p = X.cols();
    const Eigen::RowVectorXd mean = X.colwise().mean();
    const Eigen::MatrixXd centered = X.rowwise() - mean;

    // Class priors and X_c^T Y for one-hot targets. Centering the targets is
    // free here: X_c^T (Y - 1 pi^T) = X_c^T Y because the columns of X_c sum
    // to zero.
    Eigen::RowVectorXd priors = Eigen::RowVectorXd::Zero(n_classes);
    Eigen::MatrixXd xty = Eigen::MatrixXd::Zero(p, n_classes);
    for (long i = 0; i < n; ++i) {
        priors(y[static_cast<std::size_t>(i)]) += 1.0;
        xty.col(y[static_cast<std::size_t>(i)]) += centered.row(i).transpose();
    }
    priors /= static_cast<double>(n);

    Eigen::MatrixXd gram = centered.transpose() * centered;
    gram.diagonal().array() += alpha;

    RidgeClassifier model;
    model.alpha_ = alpha;
    model.weights_ = gram.ldlt().solve(xty);
    model.intercept_ = priors - mean * model.weights_;
    return model;
}

RidgeClassifier RidgeClassifier::fit_cv(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                        int n_classes, const std::vector<double>& alphas,
                                        int folds) {
    check_labeled_matrix(X, y, n_classes);
    if (folds < 2) throw std::invalid_argument("ridge: cross-validation needs at least 2 folds");
    if (X.rows() < folds)
        throw std::invalid_argument("ridge: fewer samples than cross-validation folds");
    if (alphas.empty()) throw std::invalid_argument("ridge: empty alpha list");

    const long n = X.rows();
    std::vector<long> correct(alphas.size(), 0);
    for (int fold = 0; fold < folds; ++fold) {
        std::vector<long> train_rows, val_rows;
        for (long i = 0; i < n; ++i)
            (i % folds == fold ? val_rows : train_rows).push_back(i);

        Eigen::MatrixXd xt(train_rows.size(), X.cols());
        std::vector<int> yt(train_rows.size());
        for (std::size_t i = 0; i < train_rows.size(); ++i) {
            xt.row(static_cast<long>(i)) = X.row(train_rows[i]);
            yt[i] = y[static_cast<std::size_t>(train_rows[i])];
        }

        for (std::size_t a = 0; a < alphas.size(); ++a) {
            const RidgeClassifier model = fit(xt, yt, n_classes, alphas[a]);
            for (long row : val_rows)
                if (model.predict(X.row(row)) == y[static_cast<std::size_t>(row)]) ++correct[a];
        }
    }

    std::size_t best = 0;
    for (std::size_t a = 1; a < alphas.size(); ++a) {
        if (correct[a] > correct[best] ||
            (correct[a] == correct[best] && alphas[a] < alphas[best]))
            best = a;
    }
    return fit(X, y, n_classes, alphas[best]);
}

Eigen::RowVectorXd RidgeClassifier::scores(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    return x * weights_ + intercept_;
}

int RidgeClassifier::predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    return argmax_lowest(scores(x));
}

std::vector<int> RidgeClassifier::predict_rows(const Eigen::MatrixXd& X) const {
    std::vector<int> out(static_cast<std::size_t>(X.rows()));
    for (long i = 0; i < X.rows(); ++i) out[static_cast<std::size_t>(i)] = predict(X.row(i));
    return out;
}

// ---------------------------------------------------------------------------
// CART decision tree
// ---------------------------------------------------------------------------

std::string to_string(MaxFeatures mf) {
    switch (mf) {
    case MaxFeatures::All: return "all";
    case MaxFeatures::Sqrt: return "sqrt";
    case MaxFeatures::Log2: return "log2";
    }
    throw std::invalid_argument("unknown max-features rule");
}

MaxFeatures max_features_from_string(const std::string& name) {
    if (name == "all") return MaxFeatures::All;
    if (name == "sqrt") return MaxFeatures::Sqrt;
    if (name == "log2") return MaxFeatures::Log2;
    throw std::invalid_argument("unknown max-features rule: '" + name + "'");
}

namespace {

int feature_budget(MaxFeatures rule, int p) {
    switch (rule) {
    case MaxFeatures::All: return p;
    case MaxFeatures::Sqrt: return std::max(1, static_cast<int>(std::sqrt(static_cast<double>(p))));
    case MaxFeatures::Log2: return std::max(1, static_cast<int>(std::log2(static_cast<double>(p))));
    }
    return p;
}

double gini(const std::vector<long>& counts, long total) {
    double sum_sq = 0;
    for (long c : counts) {
        const double frac = static_cast<double>(c) / static_cast<double>(total);
        sum_sq += frac * frac;
    }
    return 1.0 - sum_sq;
}

int majority_label(const std::vector<long>& counts) {
    int best = 0;
    for (int c = 1; c < static_cast<int>(counts.size()); ++c)
        if (counts[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(best)]) best = c;
    return best;
}

} // namespace

CartClassifier CartClassifier::fit(const Eigen::MatrixXd& X, const std::vector<int>& y,
                                   int n_classes, const CartOptions& options) {
    check_labeled_matrix(X, y, n_classes);
    const int p = static_cast<int>(X.cols());
    const int budget = feature_budget(options.max_features, p);

    CartClassifier tree;

    struct Work {
        std::vector<long> idx;
        int depth = 0;
        int node_id = 0;
    };
    std::vector<Work> stack;
    {
        Work root;
        root.idx.resize(static_cast<std::size_t>(X.rows()));
        for (long i = 0; i < X.rows(); ++i) root.idx[static_cast<std::size_t>(i)] = i;
        root.node_id = 0;
        tree.nodes_.emplace_back();
        stack.push_back(std::move(root));
    }

    std::vector<int> feature_pool(static_cast<std::size_t>(p));
    std::vector<std::pair<double, int>> ordered; // (value, label) within a node

    while (!stack.empty()) {
        Work wk = std::move(stack.back());
        stack.pop_back();
        const long n = static_cast<long>(wk.idx.size());

        std::vector<long> counts(static_cast<std::size_t>(n_classes), 0);
        for (long i : wk.idx) ++counts[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])];
        const int majority = majority_label(counts);
        const double node_impurity = gini(counts, n);

        tree.nodes_[static_cast<std::size_t>(wk.node_id)].depth = wk.depth;
        tree.nodes_[static_cast<std::size_t>(wk.node_id)].label = majority;

        const bool depth_capped = options.max_depth >= 0 && wk.depth >= options.max_depth;
        if (depth_capped || n < 2 || node_impurity == 0.0) continue;

        // Candidate features: a seeded per-node draw, scanned in ascending
        // order so equal-impurity ties resolve to the lowest feature index.
        RngStream node_rng = RngStream::substream(options.seed, "cart-node",
                                                  static_cast<std::uint64_t>(wk.node_id));
        for (int f = 0; f < p; ++f) feature_pool[static_cast<std::size_t>(f)] = f;
        const int draw = std::min(budget, p);
        for (int i = 0; i < draw; ++i) {
            const int j = i + static_cast<int>(node_rng.uniform_int(p - i));
            std::swap(feature_pool[static_cast<std::size_t>(i)],
                      feature_pool[static_cast<std::size_t>(j)]);
        }
        std::sort(feature_pool.begin(), feature_pool.begin() + draw);

        int best_feature = -1;
        double best_threshold = 0;
        double best_impurity = node_impurity;

        std::vector<long> left_counts(static_cast<std::size_t>(n_classes));
        for (int fi = 0; fi < draw; ++fi) {
            const int f = feature_pool[static_cast<std::size_t>(fi)];
            ordered.clear();
            ordered.reserve(static_cast<std::size_t>(n));
            for (long i : wk.idx)
                ordered.emplace_back(X(i, f), y[static_cast<std::size_t>(i)]);
            std::sort(ordered.begin(), ordered.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });

            std::fill(left_counts.begin(), left_counts.end(), 0);
            for (long i = 0; i + 1 < n; ++i) {
                ++left_counts[static_cast<std::size_t>(ordered[static_cast<std::size_t>(i)].second)];
                const double lo = ordered[static_cast<std::size_t>(i)].first;
                const double hi = ordered[static_cast<std::size_t>(i + 1)].first;
                if (lo == hi) continue;
                // Midpoint, nudged down if rounding lands on the upper value
                // so that "value <= threshold goes left" matches this sweep.
                double threshold = lo + (hi - lo) / 2;
                if (threshold >= hi) threshold = lo;

                const long nl = i + 1, nr = n - nl;
                double left_sq = 0, right_sq = 0;
                for (int c = 0; c < n_classes; ++c) {
                    const double cl = static_cast<double>(left_counts[static_cast<std::size_t>(c)]);
                    const double cr =
                        static_cast<double>(counts[static_cast<std::size_t>(c)]) - cl;
                    left_sq += cl * cl;
                    right_sq += cr * cr;
                }
                const double weighted =
                    (static_cast<double>(nl) - left_sq / static_cast<double>(nl) +
                     static_cast<double>(nr) - right_sq / static_cast<double>(nr)) /
                    static_cast<double>(n);
                if (weighted < best_impurity) {
                    best_impurity = weighted;
                    best_feature = f;
                    best_threshold = threshold;
                }
            }
        }

        if (best_feature < 0) continue; // no improving split: stay a leaf

        std::vector<long> left_idx, right_idx;
        for (long i : wk.idx)
            (X(i, best_feature) <= best_threshold ? left_idx : right_idx).push_back(i);

        const int left_id = static_cast<int>(tree.nodes_.size());
        tree.nodes_.emplace_back();
        const int right_id = static_cast<int>(tree.nodes_.size());
        tree.nodes_.emplace_back();

        Node& node = tree.nodes_[static_cast<std::size_t>(wk.node_id)];
        node.feature = best_feature;
        node.threshold = best_threshold;
        node.left = left_id;
        node.right = right_id;

        stack.push_back({std::move(right_idx), wk.depth + 1, right_id});
        stack.push_back({std::move(left_idx), wk.depth + 1, left_id});
    }
    return tree;
}

int CartClassifier::predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    int node = 0;
    while (nodes_[static_cast<std::size_t>(node)].feature >= 0) {
        const Node& cur = nodes_[static_cast<std::size_t>(node)];
        node = x(cur.feature) <= cur.threshold ? cur.left : cur.right;
    }
    return nodes_[static_cast<std::size_t>(node)].label;
}

std::vector<int> CartClassifier::predict_rows(const Eigen::MatrixXd& X) const {
    std::vector<int> out(static_cast<std::size_t>(X.rows()));
    for (long i = 0; i < X.rows(); ++i) out[static_cast<std::size_t>(i)] = predict(X.row(i));
    return out;
}

int CartClassifier::leaf_count() const {
    int leaves = 0;
    for (const Node& node : nodes_) leaves += node.feature < 0;
    return leaves;
}

int CartClassifier::depth() const {
    int deepest = 0;
    for (const Node& node : nodes_)
        if (node.feature < 0) deepest = std::max(deepest, node.depth);
    return deepest;
}

} // namespace statetrace::baselines
