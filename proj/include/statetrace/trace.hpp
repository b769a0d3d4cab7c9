#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace statetrace {

enum class ChannelKind { Input, Output };

struct ChannelSpec {
    std::string name;
    ChannelKind kind = ChannelKind::Input;
    std::string unit;

    bool operator==(const ChannelSpec&) const = default;
};

/// Ordered list of system states. State ids are positions in this list and
/// are fixed for one-hot encoding. The reserved pad id (== size()) marks
/// zero-padded time steps and never appears in the catalog itself.
struct StateCatalog {
    std::vector<std::string> states;

    StateCatalog() = default;
    explicit StateCatalog(std::vector<std::string> names);

    int size() const { return static_cast<int>(states.size()); }
    int pad_id() const { return size(); }
    const std::string& name(int id) const;
    /// Throws naming the offending label when unknown.
    int id_of(const std::string& name) const;

    bool operator==(const StateCatalog&) const = default;
};

/// One flight's n synchronized signals, sampled every sample_period seconds.
/// samples is length x channels; all values finite.
struct MultivariateTrace {
    std::vector<ChannelSpec> schema;
    Eigen::MatrixXd samples;     // l_T x n
    double sample_period = 0.2;  // 5 Hz

    int length() const { return static_cast<int>(samples.rows()); }
    int channels() const { return static_cast<int>(samples.cols()); }
    void validate() const;
};

/// The set of (time step, entered state) tuples for one trace. The entry at
/// t = 0 defines the initial state; times strictly increase and consecutive
/// entries carry different states.
struct ChangePointAnnotation {
    struct Entry {
        int t = 0;
        int state = 0;
        bool operator==(const Entry&) const = default;
    };
    std::vector<Entry> entries;

    void validate() const;
    /// Change-point times excluding the t = 0 initial-state entry.
    std::vector<int> change_times() const;
    bool operator==(const ChangePointAnnotation&) const = default;
};

/// Per-time-step state ids plus a validity mask (false on zero-padding).
/// The mask is always a true-prefix: padding only occurs at the end.
struct LabelSequence {
    std::vector<int> labels;
    std::vector<std::uint8_t> mask;

    int length() const { return static_cast<int>(labels.size()); }
    /// Number of leading unmasked steps.
    int valid_length() const;
};

struct Dataset {
    struct Item {
        std::string id;
        MultivariateTrace trace;
        ChangePointAnnotation annotation;
    };

    std::vector<ChannelSpec> schema;
    StateCatalog catalog;
    double sample_period = 0.2;
    std::vector<Item> items;

    int size() const { return static_cast<int>(items.size()); }
    /// Maximum trace length over all items (the padded length L).
    int max_length() const;
};

/// Per-channel z-score statistics, computed on the training split and reused
/// verbatim on validation/test data and at inference time.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // entries < 1e-12 are treated as 1 (shift only)

    int channels() const { return static_cast<int>(mean.size()); }
};

// --- operations ---

/// Fill per-step labels from change-point tuples: labels[t] is the state of
/// the latest entry with time <= t. Mask is all true.
LabelSequence expand_annotation(const ChangePointAnnotation& cp, int length);

/// Inverse of expand_annotation on the unmasked prefix: an entry at t = 0
/// plus every step whose label differs from its predecessor.
ChangePointAnnotation extract_change_points(const LabelSequence& seq);

/// Extend trace and labels to length total with zero sample rows; appended
/// steps get mask = false and the reserved pad label id.
std::pair<MultivariateTrace, LabelSequence>
pad_and_mask(const MultivariateTrace& trace, const LabelSequence& seq, int total, int pad_id);

/// Z-score every channel. When stats is absent they are computed from this
/// dataset (the caller passes the training split); otherwise the given stats
/// are applied unchanged. Channels with stddev < 1e-12 are shifted only.
std::pair<Dataset, NormStats>
normalize_channels(const Dataset& dataset, const std::optional<NormStats>& stats = std::nullopt);

NormStats compute_norm_stats(const Dataset& dataset);
MultivariateTrace apply_norm_stats(const MultivariateTrace& trace, const NormStats& stats);

struct SplitFractions {
    double train = 0.9;
    double val = 0.05;
    double test = 0.05;
};

struct DatasetSplit {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Random, disjoint, exhaustive partition. Val/test sizes round to nearest;
/// the remainder goes to train. Deterministic for a fixed seed.
DatasetSplit split_dataset(const Dataset& dataset, const SplitFractions& fractions,
                           std::uint64_t seed);

} // namespace statetrace
