#include "statetrace/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace statetrace {

using nlohmann::json;

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
    return out;
}

double parse_double(const std::string& s, const std::filesystem::path& file, int row,
                    const std::string& column) {
    double value = 0;
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end)
        throw std::runtime_error("non-numeric cell '" + s + "' in " + file.string() + " row " +
                                 std::to_string(row) + " column " + column);
    return value;
}

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

ChannelKind kind_from_string(const std::string& s) {
    if (s == "input") return ChannelKind::Input;
    if (s == "output") return ChannelKind::Output;
    throw std::runtime_error("unknown channel kind: " + s);
}

std::string kind_to_string(ChannelKind k) {
    return k == ChannelKind::Input ? "input" : "output";
}

} // namespace

FlightCsv read_flight_csv(const std::filesystem::path& file,
                          const std::vector<ChannelSpec>& schema, double sample_period) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open flight file: " + file.string());

    std::string header_line;
    if (!std::getline(in, header_line)) throw std::runtime_error("empty flight file: " + file.string());
    const std::vector<std::string> header = split_line(header_line);

    // Map each schema channel to its CSV column.
    std::vector<int> column_of(schema.size(), -1);
    int state_col = -1;
    int t_col = -1;
    for (int i = 0; i < static_cast<int>(header.size()); ++i) {
        if (header[static_cast<std::size_t>(i)] == "t") t_col = i;
        if (header[static_cast<std::size_t>(i)] == "state") state_col = i;
        for (std::size_t c = 0; c < schema.size(); ++c)
            if (header[static_cast<std::size_t>(i)] == schema[c].name) column_of[c] = i;
    }
    if (t_col < 0) throw std::runtime_error("missing 't' column in " + file.string());
    for (std::size_t c = 0; c < schema.size(); ++c)
        if (column_of[c] < 0)
            throw std::runtime_error("missing column '" + schema[c].name + "' in " + file.string());

    std::vector<std::vector<double>> rows;
    std::vector<std::string> states;
    std::string line;
    int row_index = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row_index;
        const std::vector<std::string> cells = split_line(line);
        if (cells.size() != header.size())
            throw std::runtime_error("row " + std::to_string(row_index) + " in " + file.string() +
                                     " has " + std::to_string(cells.size()) + " cells, expected " +
                                     std::to_string(header.size()));
        std::vector<double> row(schema.size());
        for (std::size_t c = 0; c < schema.size(); ++c)
            row[c] = parse_double(cells[static_cast<std::size_t>(column_of[c])], file, row_index,
                                  schema[c].name);
        rows.push_back(std::move(row));
        if (state_col >= 0) states.push_back(cells[static_cast<std::size_t>(state_col)]);
    }

    FlightCsv out;
    out.trace.schema = schema;
    out.trace.sample_period = sample_period;
    out.trace.samples.resize(static_cast<Eigen::Index>(rows.size()),
                             static_cast<Eigen::Index>(schema.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < schema.size(); ++c)
            out.trace.samples(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    out.state_names = std::move(states);
    out.trace.validate();
    return out;
}

void write_flight_csv(const std::filesystem::path& file, const MultivariateTrace& trace,
                      const StateCatalog& catalog, const LabelSequence& labels) {
    if (labels.length() != trace.length())
        throw std::runtime_error("labels length does not match trace length");
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write flight file: " + file.string());
    out << "t";
    for (const auto& ch : trace.schema) out << ',' << ch.name;
    out << ",state\n";
    for (int t = 0; t < trace.length(); ++t) {
        out << t;
        for (int c = 0; c < trace.channels(); ++c) out << ',' << format_double(trace.samples(t, c));
        out << ',' << catalog.name(labels.labels[static_cast<std::size_t>(t)]) << '\n';
    }
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path.string());
    json m = json::parse(in);

    Dataset ds;
    for (const auto& ch : m.at("schema"))
        ds.schema.push_back({ch.at("name").get<std::string>(),
                             kind_from_string(ch.at("kind").get<std::string>()),
                             ch.value("unit", std::string{})});
    ds.catalog = StateCatalog(m.at("states").get<std::vector<std::string>>());
    ds.sample_period = m.at("sample_period").get<double>();

    LengthBounds bounds;
    bounds.min_length = m.value("min_length", bounds.min_length);
    bounds.max_length = m.value("max_length", bounds.max_length);

    const std::filesystem::path base = manifest_path.parent_path();
    int dropped = 0;
    for (const auto& f : m.at("flights")) {
        const std::filesystem::path file = base / f.get<std::string>();
        FlightCsv flight = read_flight_csv(file, ds.schema, ds.sample_period);
        const int lt = flight.trace.length();
        if (lt < bounds.min_length || lt > bounds.max_length) {
            ++dropped;
            continue;
        }
        if (flight.state_names.empty())
            throw std::runtime_error("flight file has no state column: " + file.string());
        LabelSequence seq;
        seq.mask.assign(static_cast<std::size_t>(lt), 1);
        seq.labels.reserve(static_cast<std::size_t>(lt));
        for (const auto& name : flight.state_names) seq.labels.push_back(ds.catalog.id_of(name));
        Dataset::Item item;
        item.id = file.stem().string();
        item.trace = std::move(flight.trace);
        item.annotation = extract_change_points(seq);
        ds.items.push_back(std::move(item));
    }
    if (dropped > 0)
        std::fprintf(stderr, "load_dataset: dropped %d trace(s) outside length bounds [%d, %d]\n",
                     dropped, bounds.min_length, bounds.max_length);
    if (ds.items.empty()) throw std::runtime_error("manifest yielded no usable traces");
    return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                  const std::string& manifest_name, LengthBounds bounds) {
    std::filesystem::create_directories(dir);
    json m;
    m["schema"] = json::array();
    for (const auto& ch : dataset.schema)
        m["schema"].push_back({{"name", ch.name}, {"kind", kind_to_string(ch.kind)}, {"unit", ch.unit}});
    m["states"] = dataset.catalog.states;
    m["sample_period"] = dataset.sample_period;
    m["min_length"] = bounds.min_length;
    m["max_length"] = bounds.max_length;
    m["flights"] = json::array();

    for (const auto& item : dataset.items) {
        const std::string file = item.id + ".csv";
        const LabelSequence seq = expand_annotation(item.annotation, item.trace.length());
        write_flight_csv(dir / file, item.trace, dataset.catalog, seq);
        m["flights"].push_back(file);
    }
    std::ofstream out(dir / manifest_name);
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    out << m.dump(2) << '\n';
}

} // namespace statetrace
