#include "statetrace/cpd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace statetrace::cpd {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kGaussianReg = 1e-6;
} // namespace

CostKind cost_kind_from_string(const std::string& name) {
    if (name == "l1") return CostKind::L1;
    if (name == "l2") return CostKind::L2;
    if (name == "linear") return CostKind::Linear;
    if (name == "ar") return CostKind::Ar;
    if (name == "gaussian") return CostKind::Gaussian;
    if (name == "rank") return CostKind::Rank;
    if (name == "kernel") return CostKind::Kernel;
    throw std::invalid_argument("unknown cost function: " + name);
}

std::string to_string(CostKind kind) {
    switch (kind) {
        case CostKind::L1: return "l1";
        case CostKind::L2: return "l2";
        case CostKind::Linear: return "linear";
        case CostKind::Ar: return "ar";
        case CostKind::Gaussian: return "gaussian";
        case CostKind::Rank: return "rank";
        case CostKind::Kernel: return "kernel";
    }
    return "?";
}

SearchMethod search_method_from_string(const std::string& name) {
    if (name == "pelt") return SearchMethod::Pelt;
    if (name == "binseg") return SearchMethod::Binseg;
    if (name == "bottom_up") return SearchMethod::BottomUp;
    if (name == "window") return SearchMethod::Window;
    throw std::invalid_argument("unknown search method: " + name);
}

std::string to_string(SearchMethod method) {
    switch (method) {
        case SearchMethod::Pelt: return "pelt";
        case SearchMethod::Binseg: return "binseg";
        case SearchMethod::BottomUp: return "bottom_up";
        case SearchMethod::Window: return "window";
    }
    return "?";
}

std::vector<int> Segmentation::change_times() const {
    std::vector<int> times(breakpoints.begin(), breakpoints.end());
    if (!times.empty()) times.pop_back();  // the final end is not a change
    return times;
}

SegmentCost::SegmentCost(const Eigen::MatrixXd& signal, CostKind kind, CostOptions opts)
    : signal_(signal), kind_(kind), opts_(opts) {
    const int T = length();
    const int n = static_cast<int>(signal_.cols());
    if (T < 1 || n < 1) throw std::invalid_argument("empty signal");
    if (!signal_.allFinite()) throw std::invalid_argument("signal contains non-finite values");

    switch (kind_) {
        case CostKind::L1:
        case CostKind::Gaussian:
            min_size_ = 1;
            break;
        case CostKind::L2: {
            min_size_ = 1;
            prefix_sum_.setZero(T + 1, n);
            prefix_sumsq_.setZero(T + 1, n);
            for (int t = 0; t < T; ++t) {
                prefix_sum_.row(t + 1) = prefix_sum_.row(t) + signal_.row(t);
                prefix_sumsq_.row(t + 1) =
                    prefix_sumsq_.row(t) + signal_.row(t).array().square().matrix();
            }
            break;
        }
        case CostKind::Linear: {
            min_size_ = 2;
            prefix_sum_.setZero(T + 1, n);
            prefix_sumsq_.setZero(T + 1, n);
            prefix_t_cross_.setZero(T + 1, n);
            prefix_t_.setZero(T + 1);
            prefix_t2_.setZero(T + 1);
            for (int t = 0; t < T; ++t) {
                prefix_sum_.row(t + 1) = prefix_sum_.row(t) + signal_.row(t);
                prefix_sumsq_.row(t + 1) =
                    prefix_sumsq_.row(t) + signal_.row(t).array().square().matrix();
                prefix_t_cross_.row(t + 1) = prefix_t_cross_.row(t) + double(t) * signal_.row(t);
                prefix_t_[t + 1] = prefix_t_[t] + double(t);
                prefix_t2_[t + 1] = prefix_t2_[t] + double(t) * double(t);
            }
            break;
        }
        case CostKind::Ar:
            if (opts_.ar_order < 1) throw std::invalid_argument("AR order must be >= 1");
            min_size_ = opts_.ar_order + 1;
            break;
        case CostKind::Rank: {
            min_size_ = 1;
            // Centered average ranks over the full signal, per channel.
            ranks_.resize(T, n);
            for (int c = 0; c < n; ++c) {
                std::vector<int> order(static_cast<std::size_t>(T));
                std::iota(order.begin(), order.end(), 0);
                std::sort(order.begin(), order.end(),
                          [&](int a, int b) { return signal_(a, c) < signal_(b, c); });
                int i = 0;
                while (i < T) {
                    int j = i;
                    while (j + 1 < T && signal_(order[std::size_t(j + 1)], c) ==
                                            signal_(order[std::size_t(i)], c))
                        ++j;
                    const double avg = 0.5 * (i + j) + 1.0;
                    for (int k = i; k <= j; ++k) ranks_(order[std::size_t(k)], c) = avg;
                    i = j + 1;
                }
                ranks_.col(c).array() -= 0.5 * (T + 1);
            }
            rank_prefix_.setZero(T + 1, n);
            for (int t = 0; t < T; ++t) rank_prefix_.row(t + 1) = rank_prefix_.row(t) + ranks_.row(t);
            const Eigen::MatrixXd cov = ranks_.transpose() * ranks_ / double(T);
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
            const double thresh = std::max(es.eigenvalues().maxCoeff(), 0.0) * 1e-10;
            Eigen::VectorXd inv = es.eigenvalues();
            for (int i = 0; i < inv.size(); ++i) inv[i] = inv[i] > thresh ? 1.0 / inv[i] : 0.0;
            rank_cov_inv_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
            break;
        }
        case CostKind::Kernel: {
            min_size_ = 1;
            if (opts_.kernel_gamma > 0) {
                gamma_ = opts_.kernel_gamma;
            } else {
                // Median heuristic on an evenly strided subsample.
                const int max_rows = 512;
                const int stride = std::max(1, (T + max_rows - 1) / max_rows);
                std::vector<int> rows;
                for (int t = 0; t < T; t += stride) rows.push_back(t);
                std::vector<double> d2;
                for (std::size_t i = 0; i < rows.size(); ++i)
                    for (std::size_t j = i + 1; j < rows.size(); ++j)
                        d2.push_back((signal_.row(rows[i]) - signal_.row(rows[j])).squaredNorm());
                if (d2.empty()) {
                    gamma_ = 1.0;
                } else {
                    auto mid = d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2);
                    std::nth_element(d2.begin(), mid, d2.end());
                    gamma_ = *mid > 0 ? 1.0 / *mid : 1.0;
                }
            }
            break;
        }
    }
}

double SegmentCost::operator()(int a, int b) const {
    if (a < 0 || b > length() || b - a < min_size_)
        throw std::invalid_argument("segment [" + std::to_string(a) + ", " + std::to_string(b) +
                                    ") shorter than min_size " + std::to_string(min_size_));
    switch (kind_) {
        case CostKind::L1: return cost_l1(a, b);
        case CostKind::L2: return cost_l2(a, b);
        case CostKind::Linear: return cost_linear(a, b);
        case CostKind::Ar: return cost_ar(a, b);
        case CostKind::Gaussian: return cost_gaussian(a, b);
        case CostKind::Rank: return cost_rank(a, b);
        case CostKind::Kernel: return cost_kernel(a, b);
    }
    return 0.0;
}

double SegmentCost::cost_l1(int a, int b) const {
    const int n = static_cast<int>(signal_.cols());
    const int len = b - a;
    double total = 0.0;
    std::vector<double> buf(static_cast<std::size_t>(len));
    for (int c = 0; c < n; ++c) {
        for (int t = 0; t < len; ++t) buf[std::size_t(t)] = signal_(a + t, c);
        auto mid = buf.begin() + len / 2;
        std::nth_element(buf.begin(), mid, buf.end());
        double med = *mid;
        if (len % 2 == 0) {
            // median = average of the two central order statistics
            const double hi = *mid;
            std::nth_element(buf.begin(), mid - 1, mid);
            med = 0.5 * (*(mid - 1) + hi);
        }
        for (int t = a; t < b; ++t) total += std::abs(signal_(t, c) - med);
    }
    return total;
}

double SegmentCost::cost_l2(int a, int b) const {
    const double len = b - a;
    double total = 0.0;
    for (int c = 0; c < static_cast<int>(signal_.cols()); ++c) {
        const double s1 = prefix_sum_(b, c) - prefix_sum_(a, c);
        const double s2 = prefix_sumsq_(b, c) - prefix_sumsq_(a, c);
        total += std::max(0.0, s2 - s1 * s1 / len);
    }
    return total;
}

double SegmentCost::cost_linear(int a, int b) const {
    const double len = b - a;
    const double st = prefix_t_[b] - prefix_t_[a];
    const double stt = prefix_t2_[b] - prefix_t2_[a] - st * st / len;
    double total = 0.0;
    for (int c = 0; c < static_cast<int>(signal_.cols()); ++c) {
        const double sy = prefix_sum_(b, c) - prefix_sum_(a, c);
        const double syy = prefix_sumsq_(b, c) - prefix_sumsq_(a, c) - sy * sy / len;
        const double sty = prefix_t_cross_(b, c) - prefix_t_cross_(a, c) - st * sy / len;
        double rss = syy;
        if (stt > 0) rss -= sty * sty / stt;
        total += std::max(0.0, rss);
    }
    return total;
}

double SegmentCost::cost_ar(int a, int b) const {
    const int p = opts_.ar_order;
    const int rows = b - a - p;
    const int n = static_cast<int>(signal_.cols());
    double total = 0.0;
    for (int c = 0; c < n; ++c) {
        Eigen::MatrixXd X(rows, p + 1);
        Eigen::VectorXd y(rows);
        for (int r = 0; r < rows; ++r) {
            const int t = a + p + r;
            y[r] = signal_(t, c);
            for (int i = 0; i < p; ++i) X(r, i) = signal_(t - 1 - i, c);
            X(r, p) = 1.0;
        }
        const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(y);
        total += (y - X * beta).squaredNorm();
    }
    return total;
}

double SegmentCost::cost_gaussian(int a, int b) const {
    const int len = b - a;
    const int n = static_cast<int>(signal_.cols());
    const Eigen::RowVectorXd mean = signal_.middleRows(a, len).colwise().mean();
    const Eigen::MatrixXd centered = signal_.middleRows(a, len).rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / double(len);
    cov.diagonal().array() += kGaussianReg;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    double logdet = 0.0;
    for (int i = 0; i < n; ++i) logdet += std::log(std::max(es.eigenvalues()[i], 1e-300));
    return double(len) * logdet;
}

double SegmentCost::cost_rank(int a, int b) const {
    const double len = b - a;
    const Eigen::VectorXd mean =
        (rank_prefix_.row(b) - rank_prefix_.row(a)).transpose() / len;
    return -len * mean.dot(rank_cov_inv_ * mean);
}

double SegmentCost::cost_kernel(int a, int b) const {
    const double len = b - a;
    double off_diag = 0.0;
    for (int i = a; i < b; ++i)
        for (int j = i + 1; j < b; ++j)
            off_diag += std::exp(-gamma_ * (signal_.row(i) - signal_.row(j)).squaredNorm());
    return len - (len + 2.0 * off_diag) / len;
}

double total_penalized_cost(const SegmentCost& cost, const std::vector<int>& breakpoints,
                            double penalty) {
    double total = -penalty;
    int last = 0;
    for (int b : breakpoints) {
        total = (total + cost(last, b)) + penalty;
        last = b;
    }
    return total;
}

namespace {

/// Internal breakpoint candidates: multiples of jump that leave room for
/// min_size samples on both sides.
std::vector<int> candidate_positions(int T, int min_size, int jump) {
    std::vector<int> pos;
    for (int t = jump; t <= T - min_size; t += jump)
        if (t >= min_size) pos.push_back(t);
    return pos;
}

std::vector<int> pelt_search(const SegmentCost& cost, int T, double beta, int min_size, int jump) {
    const std::vector<int> cands = candidate_positions(T, min_size, jump);
    std::vector<int> ends = cands;
    ends.push_back(T);

    struct Candidate {
        int pos;
        double f;
        int expiry;  // kept until ends reach pos_pruned + min_size; INT_MAX when live
    };
    std::vector<Candidate> active{{0, -beta, std::numeric_limits<int>::max()}};
    std::vector<double> f_at(static_cast<std::size_t>(T) + 1, kInf);
    std::vector<int> prev(static_cast<std::size_t>(T) + 1, -1);
    f_at[0] = -beta;

    for (int e : ends) {
        // Drop candidates whose pruning grace period has passed.
        active.erase(std::remove_if(active.begin(), active.end(),
                                    [&](const Candidate& c) { return e >= c.expiry; }),
                     active.end());
        double best = kInf;
        int best_s = -1;
        for (const auto& c : active) {
            if (e - c.pos < min_size) continue;
            const double v = c.f + cost(c.pos, e) + beta;
            if (v < best) {
                best = v;
                best_s = c.pos;
            }
        }
        if (best_s < 0) continue;  // no admissible start yet
        f_at[std::size_t(e)] = best;
        prev[std::size_t(e)] = best_s;
        // Standard K = 0 pruning, deferred by one min_size window so starts
        // stay available for ends the dominating path cannot reach.
        for (auto& c : active) {
            if (c.expiry != std::numeric_limits<int>::max()) continue;
            if (e - c.pos < min_size) continue;
            if (c.f + cost(c.pos, e) > best) c.expiry = e + min_size;
        }
        if (e < T) active.push_back({e, best, std::numeric_limits<int>::max()});
    }

    if (!std::isfinite(f_at[std::size_t(T)]))
        throw std::runtime_error("pelt: no admissible segmentation (min_size too large)");
    std::vector<int> bkps;
    for (int e = T; e != 0; e = prev[std::size_t(e)]) bkps.push_back(e);
    std::sort(bkps.begin(), bkps.end());
    return bkps;
}

void binseg_recurse(const SegmentCost& cost, int a, int b, double beta, int min_size, int jump,
                    std::vector<int>& out) {
    const double whole = cost(a, b);
    double best_gain = -kInf;
    int best_m = -1;
    for (int m = (a / jump + 1) * jump; m < b; m += jump) {
        if (m - a < min_size || b - m < min_size) continue;
        const double gain = whole - cost(a, m) - cost(m, b);
        if (gain > best_gain) {
            best_gain = gain;
            best_m = m;
        }
    }
    if (best_m < 0 || best_gain <= beta) return;
    binseg_recurse(cost, a, best_m, beta, min_size, jump, out);
    out.push_back(best_m);
    binseg_recurse(cost, best_m, b, beta, min_size, jump, out);
}

std::vector<int> binseg_search(const SegmentCost& cost, int T, double beta, int min_size,
                               int jump) {
    std::vector<int> internal;
    binseg_recurse(cost, 0, T, beta, min_size, jump, internal);
    internal.push_back(T);
    return internal;
}

std::vector<int> bottom_up_search(const SegmentCost& cost, int T, double beta, int min_size,
                                  int jump) {
    int step = jump;
    while (step < min_size) step += jump;
    std::vector<int> bounds{0};
    for (int t = step; t <= T - min_size; t += step) bounds.push_back(t);
    bounds.push_back(T);

    std::vector<double> costs;
    for (std::size_t i = 0; i + 1 < bounds.size(); ++i) costs.push_back(cost(bounds[i], bounds[i + 1]));
    // merged[i] caches cost(bounds[i], bounds[i+2]) so each merge only
    // refreshes its two neighboring pairs.
    std::vector<double> merged;
    for (std::size_t i = 0; i + 1 < costs.size(); ++i) merged.push_back(cost(bounds[i], bounds[i + 2]));

    while (costs.size() > 1) {
        double best_delta = kInf;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < merged.size(); ++i) {
            const double delta = merged[i] - costs[i] - costs[i + 1];
            if (delta < best_delta) {
                best_delta = delta;
                best_i = i;
            }
        }
        if (best_delta >= beta) break;
        costs[best_i] = merged[best_i];
        bounds.erase(bounds.begin() + static_cast<std::ptrdiff_t>(best_i) + 1);
        costs.erase(costs.begin() + static_cast<std::ptrdiff_t>(best_i) + 1);
        merged.erase(merged.begin() + static_cast<std::ptrdiff_t>(best_i));
        if (best_i > 0) merged[best_i - 1] = cost(bounds[best_i - 1], bounds[best_i + 1]);
        if (best_i < merged.size()) merged[best_i] = cost(bounds[best_i], bounds[best_i + 2]);
    }
    return {bounds.begin() + 1, bounds.end()};
}

std::vector<int> window_search(const SegmentCost& cost, int T, double beta, int min_size, int jump,
                               int width) {
    if (width < min_size) width = min_size;
    if (2 * width > T)
        throw std::invalid_argument("window width " + std::to_string(width) +
                                    " too large for signal of length " + std::to_string(T));
    struct Peak {
        int pos;
        double gain;
    };
    std::vector<Peak> peaks;
    for (int t = jump; t + width <= T; t += jump) {
        if (t - width < 0) continue;
        const double gain = cost(t - width, t + width) - cost(t - width, t) - cost(t, t + width);
        peaks.push_back({t, gain});
    }
    std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
        return a.gain > b.gain;
    });
    std::vector<int> chosen;
    for (const auto& p : peaks) {
        if (p.gain <= beta) break;
        bool suppressed = false;
        for (int c : chosen)
            if (std::abs(c - p.pos) < width) {
                suppressed = true;
                break;
            }
        if (!suppressed) chosen.push_back(p.pos);
    }
    std::sort(chosen.begin(), chosen.end());
    chosen.push_back(T);
    return chosen;
}

} // namespace

Segmentation detect_change_points(const SegmentCost& cost, SearchMethod method,
                                  const DetectOptions& opts) {
    const int T = cost.length();
    const int min_size = std::max(opts.min_size, cost.min_size());
    if (opts.penalty < 0) throw std::invalid_argument("penalty must be >= 0");
    if (opts.jump < 1) throw std::invalid_argument("jump must be >= 1");
    if (T < 2 * min_size)
        throw std::invalid_argument("signal of length " + std::to_string(T) +
                                    " cannot host two segments of min_size " +
                                    std::to_string(min_size));

    std::vector<int> bkps;
    switch (method) {
        case SearchMethod::Pelt:
            bkps = pelt_search(cost, T, opts.penalty, min_size, opts.jump);
            break;
        case SearchMethod::Binseg:
            bkps = binseg_search(cost, T, opts.penalty, min_size, opts.jump);
            break;
        case SearchMethod::BottomUp:
            bkps = bottom_up_search(cost, T, opts.penalty, min_size, opts.jump);
            break;
        case SearchMethod::Window:
            bkps = window_search(cost, T, opts.penalty, min_size, opts.jump, opts.window_width);
            break;
    }
    Segmentation seg;
    seg.breakpoints = std::move(bkps);
    seg.penalty = opts.penalty;
    seg.total_cost = total_penalized_cost(cost, seg.breakpoints, opts.penalty);
    return seg;
}

Segmentation detect_change_points(const Eigen::MatrixXd& signal, CostKind kind,
                                  SearchMethod method, const DetectOptions& opts,
                                  const CostOptions& cost_opts) {
    const SegmentCost cost(signal, kind, cost_opts);
    return detect_change_points(cost, method, opts);
}

namespace {

/// Memoized segment costs so the exponential enumeration only pays table
/// lookups per node. table[a * (T + 1) + b] = cost(a, b).
void brute_recurse(const std::vector<double>& table, int T, double beta, int min_size, int last,
                   double acc, std::vector<int>& current, double& best,
                   std::vector<int>& best_bkps) {
    // Close the segmentation here.
    if (T - last >= min_size) {
        const double total = (acc + table[std::size_t(last) * (T + 1) + T]) + beta;
        if (total < best) {
            best = total;
            best_bkps = current;
            best_bkps.push_back(T);
        }
    }
    for (int m = last + min_size; m <= T - min_size; ++m) {
        const double acc2 = (acc + table[std::size_t(last) * (T + 1) + m]) + beta;
        current.push_back(m);
        brute_recurse(table, T, beta, min_size, m, acc2, current, best, best_bkps);
        current.pop_back();
    }
}

} // namespace

Segmentation brute_force_segmentation(const Eigen::MatrixXd& signal, CostKind kind, double penalty,
                                      int min_size, const CostOptions& cost_opts) {
    const int T = static_cast<int>(signal.rows());
    if (T > 30) throw std::invalid_argument("brute force oracle capped at length 30");
    const SegmentCost cost(signal, kind, cost_opts);
    min_size = std::max(min_size, cost.min_size());

    std::vector<double> table(std::size_t(T + 1) * (T + 1), kInf);
    for (int a = 0; a + min_size <= T; ++a)
        for (int b = a + min_size; b <= T; ++b) table[std::size_t(a) * (T + 1) + b] = cost(a, b);

    double best = kInf;
    std::vector<int> best_bkps, current;
    brute_recurse(table, T, penalty, min_size, 0, -penalty, current, best, best_bkps);
    if (!std::isfinite(best)) throw std::runtime_error("no admissible segmentation");

    Segmentation seg;
    seg.breakpoints = std::move(best_bkps);
    seg.penalty = penalty;
    seg.total_cost = best;
    return seg;
}

} // namespace statetrace::cpd
