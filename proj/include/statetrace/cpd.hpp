#pragma once

#include <Eigen/Dense>

#include <memory>
#include <string>
#include <vector>

namespace statetrace::cpd {

enum class CostKind { L1, L2, Linear, Ar, Gaussian, Rank, Kernel };

CostKind cost_kind_from_string(const std::string& name);
std::string to_string(CostKind kind);

struct CostOptions {
    int ar_order = 4;
    /// RBF bandwidth; 0 selects the median heuristic (inverse median pairwise
    /// squared distance over a <=512-sample subsample), fixed per signal.
    double kernel_gamma = 0.0;
};

/// Per-signal cost evaluator. Precomputes whatever makes repeated segment
/// evaluations cheap (prefix sums, full-signal ranks, the kernel bandwidth)
/// and then serves cost(a, b) queries over half-open index ranges [a, b).
class SegmentCost {
public:
    SegmentCost(const Eigen::MatrixXd& signal, CostKind kind, CostOptions opts = {});

    double operator()(int a, int b) const;
    int min_size() const { return min_size_; }
    int length() const { return static_cast<int>(signal_.rows()); }
    CostKind kind() const { return kind_; }
    double kernel_gamma() const { return gamma_; }

private:
    double cost_l1(int a, int b) const;
    double cost_l2(int a, int b) const;
    double cost_linear(int a, int b) const;
    double cost_ar(int a, int b) const;
    double cost_gaussian(int a, int b) const;
    double cost_rank(int a, int b) const;
    double cost_kernel(int a, int b) const;

    Eigen::MatrixXd signal_;
    CostKind kind_;
    CostOptions opts_;
    int min_size_ = 1;
    double gamma_ = 0.0;
    Eigen::MatrixXd prefix_sum_;      // (T+1) x n
    Eigen::MatrixXd prefix_sumsq_;    // (T+1) x n
    Eigen::MatrixXd prefix_t_cross_;  // (T+1) x n, sum of t * x_t
    Eigen::VectorXd prefix_t_;        // (T+1), sum of t
    Eigen::VectorXd prefix_t2_;       // (T+1), sum of t^2
    Eigen::MatrixXd ranks_;           // T x n centered full-signal ranks
    Eigen::MatrixXd rank_prefix_;     // (T+1) x n
    Eigen::MatrixXd rank_cov_inv_;    // n x n pseudo-inverse
};

enum class SearchMethod { Pelt, Binseg, BottomUp, Window };

SearchMethod search_method_from_string(const std::string& name);
std::string to_string(SearchMethod method);

/// A segmentation: sorted end indices of the segments (the last is always the
/// signal length), the penalty it was produced under, and the total penalized
/// cost sum(segment costs) + beta * (breakpoints - 1).
struct Segmentation {
    std::vector<int> breakpoints;
    double penalty = 0.0;
    double total_cost = 0.0;

    int n_change_points() const { return static_cast<int>(breakpoints.size()) - 1; }
    /// Change-point times (segment starts, excluding 0 and the final end).
    std::vector<int> change_times() const;
};

struct DetectOptions {
    double penalty = 100.0;
    int min_size = 2;
    int jump = 1;
    int window_width = 100;  // the +-w half reach of the window discrepancy
};

/// Run one search method against one cost function.
///   pelt      -- exact minimizer of the penalized cost on the jump grid
///   binseg    -- recursive best-split while the split gain exceeds beta
///   bottom_up -- fine grid of breakpoints, cheapest adjacent merges first
///   window    -- centered discrepancy gain with greedy peak selection
Segmentation detect_change_points(const Eigen::MatrixXd& signal, CostKind kind,
                                  SearchMethod method, const DetectOptions& opts,
                                  const CostOptions& cost_opts = {});

Segmentation detect_change_points(const SegmentCost& cost, SearchMethod method,
                                  const DetectOptions& opts);

/// Exhaustive search over every admissible breakpoint subset. Exponential;
/// capped at signals of length 30. Test oracle for Pelt exactness.
Segmentation brute_force_segmentation(const Eigen::MatrixXd& signal, CostKind kind, double penalty,
                                      int min_size, const CostOptions& cost_opts = {});

/// Total penalized cost of an arbitrary breakpoint list under a cost
/// evaluator, accumulated left to right (same fold order as the searches).
double total_penalized_cost(const SegmentCost& cost, const std::vector<int>& breakpoints,
                            double penalty);

} // namespace statetrace::cpd
