#include "statetrace/trace.hpp"

#include "statetrace/common.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace statetrace {

StateCatalog::StateCatalog(std::vector<std::string> names) : states(std::move(names)) {
    if (states.size() < 2) throw std::invalid_argument("state catalog needs at least 2 states");
    std::set<std::string> seen(states.begin(), states.end());
    if (seen.size() != states.size())
        throw std::invalid_argument("state catalog contains duplicate names");
}

const std::string& StateCatalog::name(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("state id out of range");
    return states[static_cast<std::size_t>(id)];
}

int StateCatalog::id_of(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
        if (states[static_cast<std::size_t>(i)] == name) return i;
    throw std::invalid_argument("unknown state name: '" + name + "'");
}

void MultivariateTrace::validate() const {
    if (samples.cols() != static_cast<Eigen::Index>(schema.size()))
        throw std::runtime_error("trace sample columns do not match schema size");
    std::set<std::string> names;
    for (const auto& ch : schema) names.insert(ch.name);
    if (names.size() != schema.size())
        throw std::runtime_error("duplicate channel names in schema");
    if (!samples.allFinite()) throw std::runtime_error("trace contains non-finite samples");
}

void ChangePointAnnotation::validate() const {
    if (entries.empty()) throw std::runtime_error("annotation is empty");
    if (entries.front().t != 0)
        throw std::runtime_error("annotation must start with a t=0 initial-state entry");
    for (std::size_t i = 1; i < entries.size(); ++i) {
        if (entries[i].t <= entries[i - 1].t)
            throw std::runtime_error("annotation times must be strictly increasing");
        if (entries[i].state == entries[i - 1].state)
            throw std::runtime_error("annotation has consecutive duplicate states at t=" +
                                     std::to_string(entries[i].t));
    }
}

std::vector<int> ChangePointAnnotation::change_times() const {
    std::vector<int> times;
    for (const auto& e : entries)
        if (e.t != 0) times.push_back(e.t);
    return times;
}

int LabelSequence::valid_length() const {
    int n = 0;
    while (n < length() && mask[static_cast<std::size_t>(n)]) ++n;
    return n;
}

int Dataset::max_length() const {
    int m = 0;
    for (const auto& it : items) m = std::max(m, it.trace.length());
    return m;
}

LabelSequence expand_annotation(const ChangePointAnnotation& cp, int length) {
    cp.validate();
    if (cp.entries.back().t >= length)
        throw std::runtime_error("annotation entry at t=" + std::to_string(cp.entries.back().t) +
                                 " is outside trace length " + std::to_string(length));
    LabelSequence seq;
    seq.labels.resize(static_cast<std::size_t>(length));
    seq.mask.assign(static_cast<std::size_t>(length), 1);
    std::size_t k = 0;
    for (int t = 0; t < length; ++t) {
        while (k + 1 < cp.entries.size() && cp.entries[k + 1].t <= t) ++k;
        seq.labels[static_cast<std::size_t>(t)] = cp.entries[k].state;
    }
    return seq;
}

ChangePointAnnotation extract_change_points(const LabelSequence& seq) {
    const int n = seq.valid_length();
    if (n == 0) throw std::runtime_error("cannot extract change points from a fully masked sequence");
    ChangePointAnnotation cp;
    cp.entries.push_back({0, seq.labels[0]});
    for (int t = 1; t < n; ++t) {
        if (seq.labels[static_cast<std::size_t>(t)] != seq.labels[static_cast<std::size_t>(t - 1)])
            cp.entries.push_back({t, seq.labels[static_cast<std::size_t>(t)]});
    }
    return cp;
}

std::pair<MultivariateTrace, LabelSequence>
pad_and_mask(const MultivariateTrace& trace, const LabelSequence& seq, int total, int pad_id) {
    const int lt = trace.length();
    if (lt > total)
        throw std::runtime_error("trace length " + std::to_string(lt) +
                                 " exceeds padded length " + std::to_string(total));
    if (seq.length() != lt) throw std::runtime_error("label sequence length mismatch");

    MultivariateTrace padded = trace;
    padded.samples = Eigen::MatrixXd::Zero(total, trace.channels());
    padded.samples.topRows(lt) = trace.samples;

    LabelSequence labels = seq;
    labels.labels.resize(static_cast<std::size_t>(total), pad_id);
    labels.mask.resize(static_cast<std::size_t>(total), 0);
    return {std::move(padded), std::move(labels)};
}

NormStats compute_norm_stats(const Dataset& dataset) {
    if (dataset.items.empty()) throw std::runtime_error("cannot compute statistics of an empty split");
    const int n = static_cast<int>(dataset.schema.size());
    NormStats stats;
    stats.mean.assign(static_cast<std::size_t>(n), 0.0);
    stats.stddev.assign(static_cast<std::size_t>(n), 0.0);

    long total = 0;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(n);
    for (const auto& it : dataset.items) {
        sum += it.trace.samples.colwise().sum().transpose();
        sumsq += it.trace.samples.array().square().colwise().sum().matrix().transpose();
        total += it.trace.length();
    }
    for (int c = 0; c < n; ++c) {
        const double mean = sum[c] / static_cast<double>(total);
        const double var = std::max(0.0, sumsq[c] / static_cast<double>(total) - mean * mean);
        stats.mean[static_cast<std::size_t>(c)] = mean;
        stats.stddev[static_cast<std::size_t>(c)] = std::sqrt(var);
    }
    return stats;
}

MultivariateTrace apply_norm_stats(const MultivariateTrace& trace, const NormStats& stats) {
    if (stats.channels() != trace.channels())
        throw std::runtime_error("normalization stats channel count mismatch");
    MultivariateTrace out = trace;
    for (int c = 0; c < trace.channels(); ++c) {
        const double sd = stats.stddev[static_cast<std::size_t>(c)];
        const double scale = sd < 1e-12 ? 1.0 : 1.0 / sd;
        out.samples.col(c) =
            (trace.samples.col(c).array() - stats.mean[static_cast<std::size_t>(c)]) * scale;
    }
    return out;
}

std::pair<Dataset, NormStats>
normalize_channels(const Dataset& dataset, const std::optional<NormStats>& stats) {
    const NormStats s = stats ? *stats : compute_norm_stats(dataset);
    Dataset out = dataset;
    for (auto& it : out.items) it.trace = apply_norm_stats(it.trace, s);
    return {std::move(out), s};
}

DatasetSplit split_dataset(const Dataset& dataset, const SplitFractions& fractions,
                           std::uint64_t seed) {
    const double sum = fractions.train + fractions.val + fractions.test;
    if (fractions.train <= 0 || fractions.val <= 0 || fractions.test <= 0)
        throw std::invalid_argument("split fractions must be positive");
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("split fractions must sum to 1");

    const int z = dataset.size();
    const int n_val = static_cast<int>(std::lround(fractions.val * z));
    const int n_test = static_cast<int>(std::lround(fractions.test * z));
    const int n_train = z - n_val - n_test;
    if (n_train <= 0 || n_val <= 0 || n_test <= 0)
        throw std::runtime_error("dataset too small for the requested split");

    std::vector<int> order(static_cast<std::size_t>(z));
    std::iota(order.begin(), order.end(), 0);
    RngStream rng = RngStream::substream(seed, "split");
    rng.shuffle(order);

    auto take = [&](int begin, int count) {
        Dataset d;
        d.schema = dataset.schema;
        d.catalog = dataset.catalog;
        d.sample_period = dataset.sample_period;
        for (int i = begin; i < begin + count; ++i)
            d.items.push_back(dataset.items[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        return d;
    };

    DatasetSplit split;
    split.train = take(0, n_train);
    split.val = take(n_train, n_val);
    split.test = take(n_train + n_val, n_test);
    return split;
}

} // namespace statetrace
