#include "support.hpp"

#include "rbsde/experiment.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace rbsde;
using namespace rbsde::testing;
namespace fs = std::filesystem;

namespace {

const fs::path kSpecs = fs::path(RBSDE_SAMPLES_DIR) / "specs";

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rbsde_lab_tests_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_spec(const fs::path& dir, const std::string& file, const std::string& text) {
  const fs::path p = dir / file;
  std::ofstream(p) << text;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const lab::CsvTable& table(const lab::Report& rep, const std::string& name) {
  for (const auto& t : rep.tables)
    if (t.name == name) return t;
  throw std::runtime_error("missing table " + name);
}

std::string error_text(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(LoadSpec, SampleBatch) {
  const auto specs = lab::load_spec(kSpecs / "batch.json");
  ASSERT_EQ(specs.size(), 11u);
  EXPECT_EQ(specs[0].name, "european_call");
  EXPECT_EQ(specs[0].task, lab::Task::PriceEuropean);
  EXPECT_EQ(specs[1].tree->size(), 7u);
}

TEST(LoadSpec, InvalidSamples) {
  EXPECT_EQ(error_code([] { lab::load_spec(kSpecs / "invalid" / "not_json.json"); }), Errc::ParseError);
  EXPECT_EQ(error_code([] { lab::load_spec(kSpecs / "invalid" / "bad_kernel.json"); }), Errc::ValidationError);
  const auto msg = error_text([] { lab::load_spec(kSpecs / "invalid" / "american_nonstandard.json"); });
  EXPECT_NE(msg.find("violated at leaf 'r.1.1'"), std::string::npos) << msg;
  EXPECT_EQ(error_code([] { lab::load_spec(kSpecs / "missing.json"); }), Errc::ParseError);
}

TEST(LoadSpec, IssuesAreAggregated) {
  const auto dir = scratch_dir("aggregate");
  const auto p = write_spec(dir, "bad.json", R"({
    "name": "bad",
    "task": "solve_bsde",
    "tree": {"horizon": 1, "kernel": [0.5, 0.5]},
    "params": {"driver": {"type": "kappa_ignorance", "kappa": 5.0}, "terminal": "oops"}
  })");
  const auto msg = error_text([&] { lab::load_spec(p); });
  EXPECT_NE(msg.find("$.params.driver"), std::string::npos) << msg;
  EXPECT_NE(msg.find("$.params.terminal"), std::string::npos) << msg;
}

TEST(LoadSpec, UnknownTaskAndDuplicateNames) {
  const auto dir = scratch_dir("names");
  const auto p = write_spec(dir, "unknown.json", R"({
    "name": "x", "task": "integrate", "tree": {"horizon": 1, "kernel": [0.5, 0.5]}, "params": {}
  })");
  EXPECT_NE(error_text([&] { lab::load_spec(p); }).find("integrate"), std::string::npos);
  const std::string one = R"({"name": "same", "task": "solve_bsde", "tree": {"horizon": 1, "kernel": [0.5, 0.5]},
    "params": {"driver": {"type": "zero"}, "terminal": 1}})";
  const auto b = write_spec(dir, "dup.json", "{\"experiments\": [" + one + "," + one + "]}");
  EXPECT_NE(error_text([&] { lab::load_spec(b); }).find("duplicate experiment name 'same'"), std::string::npos);
}

TEST(RunExperiment, AmericanPutMatchesLatticeNodeForNode) {
  const auto specs = lab::load_spec(kSpecs / "american_put.json");
  const auto rep = lab::run_experiment(specs[0]);
  EXPECT_TRUE(rep.oracle_ok);
  EXPECT_EQ(rep.summary["status"], "ok");
  EXPECT_DOUBLE_EQ(rep.summary["results"]["super_Y0"].get<double>(), 10.83984375);
  const auto& y = table(rep, "super_Y");
  const auto& lattice = table(rep, "lattice");
  EXPECT_EQ(y.rows, lattice.rows);
  EXPECT_EQ(y.header, (std::vector<std::string>{"node", "t", "value"}));
}

TEST(RunExperiment, AmbiguityDemoFlipsStoppingTime) {
  const auto specs = lab::load_spec(kSpecs / "ambiguity_demo.json");
  const auto rep = lab::run_experiment(specs[0]);
  EXPECT_TRUE(rep.oracle_ok);
  const auto& r = rep.summary["results"];
  EXPECT_DOUBLE_EQ(r["kappa_threshold"].get<double>(), 0.25);
  ASSERT_EQ(r["runs"].size(), 2u);
  EXPECT_EQ(r["runs"][0]["tau_star_min"], 3);
  EXPECT_EQ(r["runs"][1]["tau_star_max"], 0);
  EXPECT_DOUBLE_EQ(r["runs"][1]["kappa"].get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(r["runs"][1]["U0"].get<double>(), 100.0);
  EXPECT_NEAR(r["runs"][0]["U0"].get<double>(), 100.0 * 1.05 * 1.05 * 1.05, 1e-9);
}

TEST(RunExperiment, RepeatedRunsAreIdentical) {
  for (const auto& s : lab::load_spec(kSpecs / "batch.json")) {
    const auto a = lab::run_experiment(s);
    const auto b = lab::run_experiment(s);
    EXPECT_EQ(a.summary.dump(), b.summary.dump()) << s.name;
    ASSERT_EQ(a.tables.size(), b.tables.size());
    for (std::size_t i = 0; i < a.tables.size(); ++i) EXPECT_EQ(a.tables[i].rows, b.tables[i].rows) << s.name;
  }
}

TEST(RunBatch, ThreadCountDoesNotChangeOutput) {
  const auto specs = lab::load_spec(kSpecs / "batch.json");
  const auto one = scratch_dir("one");
  const auto many = scratch_dir("many");
  const auto o1 = lab::run_batch(specs, {}, one, 1);
  const auto o4 = lab::run_batch(specs, {}, many, 4);
  EXPECT_EQ(lab::combined_exit_code(o1), lab::kOk);
  EXPECT_EQ(lab::combined_exit_code(o4), lab::kOk);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(one)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(many / fs::relative(e.path(), one))) << e.path();
  }
  EXPECT_GT(files, 11u);
}

TEST(RunBatch, ExitCodes) {
  const auto dir = scratch_dir("codes");
  const auto specs = lab::load_spec(kSpecs / "european_call.json");
  lab::RunOptions strict;
  strict.tolerance = 1e-300;
  const auto o = lab::run_and_write(specs[0], strict, dir);
  EXPECT_EQ(o.code, lab::kOracleMismatch);

  const auto p = write_spec(dir, "neg.json", R"({
    "name": "neg", "task": "ambiguity_stopping_demo", "tree": {"horizon": 2, "kernel": [0.5, 0.5]},
    "params": {"mu": 0.05, "sigma": [2, -2], "S0": 100, "kappas": [0]}
  })");
  const auto neg = lab::load_spec(p);
  const auto r = lab::run_and_write(neg[0], {}, dir);
  EXPECT_EQ(r.code, lab::kSolver);
  EXPECT_NE(r.message.find("NegativePrice"), std::string::npos) << r.message;
  EXPECT_EQ(lab::combined_exit_code({o, r}), lab::kOracleMismatch);
}

TEST(WriteReport, CsvAndSummaryLayout) {
  const auto dir = scratch_dir("layout");
  const auto specs = lab::load_spec(kSpecs / "european_call.json");
  lab::write_report(lab::run_experiment(specs[0]), dir);
  const auto summary = io::Json::parse(slurp(dir / "summary.json"));
  for (const auto& f : summary["files"]) EXPECT_TRUE(fs::exists(dir / f.get<std::string>()));
  const std::string first = slurp(dir / summary["files"][0].get<std::string>());
  EXPECT_EQ(first.substr(0, first.find('\n')), "node,t,value");
}
