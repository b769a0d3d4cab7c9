#include <doctest.h>

#include "statetrace/common.hpp"
#include "statetrace/io.hpp"
#include "statetrace/sim.hpp"

#include <filesystem>
#include <fstream>

using namespace statetrace;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("statetrace_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Dataset tiny_dataset(int n_items, int length, std::uint64_t seed) {
    Dataset ds;
    ds.schema = {{"u", ChannelKind::Input, ""}, {"w", ChannelKind::Output, ""}};
    ds.catalog = StateCatalog({"A", "B"});
    RngStream rng(seed);
    for (int i = 0; i < n_items; ++i) {
        MultivariateTrace t;
        t.schema = ds.schema;
        t.samples.resize(length, 2);
        for (int r = 0; r < length; ++r)
            for (int c = 0; c < 2; ++c) t.samples(r, c) = rng.normal(0, 3);
        ChangePointAnnotation ann;
        ann.entries = {{0, 0}, {length / 2, 1}};
        ds.items.push_back({"trace_" + std::to_string(i), std::move(t), ann});
    }
    return ds;
}

} // namespace

TEST_CASE("save and load round-trips samples bit-exactly") {
    auto dir = fresh_dir("roundtrip");
    auto ds = tiny_dataset(3, 250, 11);
    save_dataset(ds, dir);
    auto back = load_dataset(dir / "manifest.json");
    REQUIRE(back.size() == 3);
    CHECK(back.schema == ds.schema);
    CHECK(back.catalog == ds.catalog);
    for (int i = 0; i < 3; ++i) {
        CHECK(back.items[i].id == ds.items[i].id);
        CHECK(back.items[i].trace.samples == ds.items[i].trace.samples);  // bitwise
        CHECK(back.items[i].annotation == ds.items[i].annotation);
    }
}

TEST_CASE("traces outside the length bounds are dropped at load") {
    auto dir = fresh_dir("bounds");
    auto ds = tiny_dataset(3, 250, 5);
    // shrink one trace below the default minimum of 200
    ds.items[1].trace.samples.conservativeResize(150, 2);
    ds.items[1].annotation.entries = {{0, 0}, {70, 1}};
    save_dataset(ds, dir);  // manifest carries the default [200, 20000] bounds
    auto back = load_dataset(dir / "manifest.json");
    CHECK(back.size() == 2);
    CHECK(back.items[0].id == "trace_0");
    CHECK(back.items[1].id == "trace_2");
}

TEST_CASE("unknown state names are reported by name") {
    auto dir = fresh_dir("badstate");
    auto ds = tiny_dataset(1, 210, 2);
    save_dataset(ds, dir, "manifest.json", {1, 100000});
    // corrupt one state cell
    auto csv = dir / "trace_0.csv";
    std::ifstream in(csv);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    auto pos = text.rfind(",B");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 2, ",Q");
    std::ofstream(csv) << text;
    CHECK_THROWS_WITH_AS(static_cast<void>(load_dataset(dir / "manifest.json")),
                         doctest::Contains("'Q'"), std::invalid_argument);
}

TEST_CASE("csv columns are matched by header name, extra columns ignored") {
    auto dir = fresh_dir("headers");
    std::ofstream f(dir / "x.csv");
    f << "t,extra,w,u,state\n";
    f << "0,9,1.5,-2.5,A\n";
    f << "1,9,2.5,-3.5,A\n";
    f << "2,9,3.5,-4.5,B\n";
    f.close();
    std::vector<ChannelSpec> schema{{"u", ChannelKind::Input, ""}, {"w", ChannelKind::Output, ""}};
    auto got = read_flight_csv(dir / "x.csv", schema, 0.2);
    CHECK(got.trace.samples(0, 0) == -2.5);  // u column
    CHECK(got.trace.samples(0, 1) == 1.5);   // w column
    CHECK(got.state_names == std::vector<std::string>{"A", "A", "B"});
}

TEST_CASE("missing columns and non-numeric cells are errors") {
    auto dir = fresh_dir("badcsv");
    std::ofstream(dir / "missing.csv") << "t,u,state\n0,1,A\n";
    std::vector<ChannelSpec> schema{{"u", ChannelKind::Input, ""}, {"w", ChannelKind::Output, ""}};
    CHECK_THROWS(static_cast<void>(read_flight_csv(dir / "missing.csv", schema, 0.2)));

    std::ofstream(dir / "nan.csv") << "t,u,w,state\n0,1,oops,A\n";
    CHECK_THROWS_WITH_AS(static_cast<void>(read_flight_csv(dir / "nan.csv", schema, 0.2)),
                         doctest::Contains("oops"), std::runtime_error);
}

TEST_CASE("state column is optional for unlabeled inputs") {
    auto dir = fresh_dir("unlabeled");
    std::ofstream(dir / "x.csv") << "t,u,w\n0,1,2\n1,3,4\n";
    std::vector<ChannelSpec> schema{{"u", ChannelKind::Input, ""}, {"w", ChannelKind::Output, ""}};
    auto got = read_flight_csv(dir / "x.csv", schema, 0.2);
    CHECK(got.trace.length() == 2);
    CHECK(got.state_names.empty());
}

TEST_CASE("generated flight csvs load back as an identical dataset") {
    auto dir = fresh_dir("simgen_roundtrip");
    sim::SimConfig cfg;
    cfg.count = 2;
    cfg.seed = 99;
    cfg.min_length = 400;
    cfg.max_length = 4000;
    cfg.plan.min_commands = 4;
    cfg.plan.max_commands = 5;
    auto ds = sim::generate_dataset(cfg, dir);
    auto back = load_dataset(dir / "manifest.json");
    REQUIRE(back.size() == ds.size());
    for (int i = 0; i < ds.size(); ++i) {
        CHECK(back.items[i].trace.samples == ds.items[i].trace.samples);
        CHECK(back.items[i].annotation == ds.items[i].annotation);
    }
}
