#pragma once

#include "statetrace/trace.hpp"

#include <filesystem>
#include <string>

namespace statetrace {

struct LengthBounds {
    int min_length = 200;
    int max_length = 20000;
};

/// Load a dataset from a JSON manifest listing per-flight CSV files, the
/// channel schema, the state catalog, the sample period, and length bounds.
/// Traces whose length falls outside the bounds are dropped (a count is
/// logged to stderr). Schema consistency is enforced across all files.
Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Write a dataset as one CSV per flight plus a manifest. Samples round-trip
/// bit-exactly (shortest round-trip decimal formatting).
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                  const std::string& manifest_name = "manifest.json",
                  LengthBounds bounds = {});

/// Per-flight CSV: header `t,<channels...>,state`; the state column is
/// optional (unlabeled prediction inputs). Returns a labels vector aligned
/// with the rows; empty when no state column is present.
struct FlightCsv {
    MultivariateTrace trace;
    std::vector<std::string> state_names;  // empty when unlabeled
};

FlightCsv read_flight_csv(const std::filesystem::path& file,
                          const std::vector<ChannelSpec>& schema, double sample_period);

void write_flight_csv(const std::filesystem::path& file, const MultivariateTrace& trace,
                      const StateCatalog& catalog, const LabelSequence& labels);

} // namespace statetrace
