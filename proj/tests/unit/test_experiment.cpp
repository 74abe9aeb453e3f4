#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "psinet/checkpoint.hpp"
#include "psinet/config.hpp"
#include "psinet/error.hpp"
#include "psinet/experiment.hpp"
#include "tempdir.hpp"

using namespace psinet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json small_config(const fs::path& out) {
  json j = json::parse(R"({
    "name": "tiny",
    "seed": 3,
    "dataset": {"kind": "synthetic", "classes": 4, "per_class": 24, "test_per_class": 8,
                "height": 8, "width": 8},
    "architecture": {"preset": "desk_cnn", "width": 4},
    "psinet": {"groups": 4, "shared_depth": "c1_1"},
    "partition": {"scheme": "classes_per_node", "nodes": 3, "classes_per_node": 2},
    "federation": {"rounds": 2, "local_epochs": 1, "batch_size": 8},
    "strategies": ["fedavg", "psinet"],
    "probe": {"batches_per_class": 1, "batch_size": 4}
  })");
  j["output_dir"] = out.string();
  return j;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

using Rows = std::vector<std::vector<std::string>>;

Rows csv_rows(const fs::path& p) {
  Rows rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

// every column but wall_ms
Rows timeless(Rows rows) {
  for (auto& r : rows) r.pop_back();
  return rows;
}

std::string field_error(const json& j) {
  try {
    validate(parse_config(j));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

int cli(const std::string& args) {
  const std::string cmd = std::string(PSINET_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughJson) {
  const ExperimentConfig c = parse_config(json::object());
  const json j = to_json(c);
  EXPECT_EQ(to_json(parse_config(j)), j);
  for (const char* key : {"dataset", "architecture", "psinet", "partition", "federation",
                          "strategies", "probe", "seed", "output_dir"})
    EXPECT_TRUE(j.contains(key)) << key;
  for (const char* key : {"rounds", "local_epochs", "batch_size", "lr", "momentum",
                          "weight_decay", "mu", "trimming", "weighted", "seed", "init_seed",
                          "threads"})
    EXPECT_TRUE(j["federation"].contains(key)) << key;
}

TEST(Config, FieldLevelErrors) {
  const json base = small_config("unused");
  auto with = [&](const std::string& dotted, const json& v) {
    json j = base;
    set_dotted(j, dotted, v);
    return field_error(j);
  };
  EXPECT_EQ(field_error(base), "");
  EXPECT_NE(with("federation.rounds", 0).find("federation.rounds"), std::string::npos);
  EXPECT_NE(with("federation.local_epochs", 0).find("federation.local_epochs"), std::string::npos);
  EXPECT_NE(with("federation.lr", -1.0).find("federation.lr"), std::string::npos);
  EXPECT_NE(with("federation.rounds", "two").find("federation.rounds"), std::string::npos);
  EXPECT_NE(with("dataset.bogus", 1).find("dataset.bogus"), std::string::npos);
  EXPECT_NE(with("partition.scheme", "zipf").find("partition.scheme"), std::string::npos);
  EXPECT_NE(with("partition.classes_per_node", 5).find("partition.classes_per_node"),
            std::string::npos);
  EXPECT_NE(with("psinet.groups", 3).find("psinet"), std::string::npos);
  EXPECT_NE(with("psinet.shared_depth", "nope").find("psinet.shared_depth"), std::string::npos);
  EXPECT_NE(with("architecture.preset", "resnet").find("architecture"), std::string::npos);
  json j = base;
  j["strategies"] = json::array({"fedsgd"});
  EXPECT_NE(field_error(j).find("strategies"), std::string::npos);
}

TEST(Config, LoadFromFile) {
  testutil::TempDir dir("cfg");
  dump(dir / "c.json", small_config(dir / "out"));
  const ExperimentConfig c = load_config(dir / "c.json");
  EXPECT_EQ(c.name, "tiny");
  EXPECT_EQ(c.federation.rounds, 2u);
  EXPECT_EQ(c.federation.init_seed, 3u);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "broken.json") << "{\"seed\": ";
  EXPECT_THROW(load_config(dir / "broken.json"), ConfigError);
}

TEST(Sweep, ValueListParsing) {
  const auto v = parse_value_list("1,0.5,true,c2_1");
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v[0], json(1));
  EXPECT_EQ(v[1], json(0.5));
  EXPECT_EQ(v[2], json(true));
  EXPECT_EQ(v[3], json("c2_1"));
  EXPECT_THROW(parse_value_list("1,,2"), ConfigError);
  json j = json::object();
  set_dotted(j, "a.b.c", 4);
  EXPECT_EQ(j, json::parse(R"({"a":{"b":{"c":4}}})"));
}

TEST(Experiment, ArtifactsAndSchema) {
  testutil::TempDir dir("exp");
  const ExperimentConfig cfg = parse_config(small_config(dir / "run"));
  const ExperimentResult r = run_experiment(cfg);
  ASSERT_EQ(r.outcomes.size(), 2u);
  for (const char* s : {"fedavg", "psinet"}) {
    const fs::path sd = dir / "run" / s;
    const Rows m = csv_rows(sd / "metrics.csv");
    ASSERT_EQ(m.size(), 1u + 2 * (3 + 1));
    EXPECT_EQ(m[0], (std::vector<std::string>{"round", "strategy", "node_or_global", "loss",
                                              "accuracy", "bytes_up", "bytes_down", "wall_ms"}));
    EXPECT_EQ(m[1][1], s);
    EXPECT_EQ(m[1][2], "node0");
    EXPECT_EQ(m[4][2], "global");
    EXPECT_TRUE(fs::exists(sd / "featuremap.csv"));
    EXPECT_NO_THROW(check_params(r.outcomes[s == std::string("fedavg") ? 0 : 1].spec,
                                 load_checkpoint(sd / "checkpoint.psnf")));
  }
  const Rows summary = csv_rows(dir / "run" / "summary.csv");
  ASSERT_EQ(summary.size(), 3u);
  EXPECT_EQ(summary[0][0], "strategy");
  ASSERT_TRUE(r.outcomes[1].alignment.has_value());
  EXPECT_GE(*r.outcomes[1].alignment, 0.0);
  ASSERT_TRUE(r.outcomes[0].agreement.has_value());

  const json echo = json::parse(slurp(dir / "run" / "resolved_config.json"));
  EXPECT_EQ(echo["psinet"]["shared_depth"], "3");
  EXPECT_EQ(echo["federation"]["seed"], 3);
}

TEST(Experiment, RerunFromEchoReproducesMetrics) {
  testutil::TempDir dir("exp");
  json j = small_config(dir / "first");
  j["psinet"]["shared_depth"] = "auto";
  j["psinet"]["pretrain_epochs"] = 1;
  j["partition"]["scheme"] = "dirichlet";
  j["partition"]["alpha"] = 0.5;
  run_experiment(parse_config(j));

  json echo = json::parse(slurp(dir / "first" / "resolved_config.json"));
  echo["output_dir"] = (dir / "second").string();
  run_experiment(parse_config(echo));
  for (const char* s : {"fedavg", "psinet"}) {
    EXPECT_EQ(timeless(csv_rows(dir / "first" / s / "metrics.csv")),
              timeless(csv_rows(dir / "second" / s / "metrics.csv")))
        << s;
    EXPECT_EQ(read_bytes(dir / "first" / s / "checkpoint.psnf"),
              read_bytes(dir / "second" / s / "checkpoint.psnf"));
  }
  EXPECT_TRUE(fs::exists(dir / "first" / "depth_profile.csv"));
}

TEST(Experiment, SweepWritesOneRunPerValue) {
  testutil::TempDir dir("sweep");
  json j = small_config(dir / "sw");
  j["strategies"] = json::array({"fedavg"});
  j["federation"]["rounds"] = 1;
  const auto results = run_sweep(j, "federation.lr", parse_value_list("0.01,0.1"));
  EXPECT_EQ(results.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "sw" / "federation.lr=0.01" / "fedavg" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "sw" / "federation.lr=0.1" / "summary.csv"));
  const Rows s = csv_rows(dir / "sw" / "sweep_summary.csv");
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[1][0], "federation.lr");
}

TEST(Cli, ExitCodes) {
  testutil::TempDir dir("cli");
  json good = small_config(dir / "run");
  good["strategies"] = json::array({"psinet"});
  good["federation"]["rounds"] = 1;
  dump(dir / "good.json", good);
  EXPECT_EQ(cli("run " + (dir / "good.json").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "psinet" / "metrics.csv"));

  json bad = good;
  bad["federation"]["rounds"] = 0;
  dump(dir / "bad.json", bad);
  EXPECT_EQ(cli("run " + (dir / "bad.json").string()), 1);
  EXPECT_EQ(cli("run " + (dir / "absent.json").string()), 1);
  EXPECT_EQ(cli("frobnicate"), 1);

  json diverge = good;
  diverge["federation"]["lr"] = 1e30;
  diverge["output_dir"] = (dir / "nan").string();
  dump(dir / "nan.json", diverge);
  EXPECT_EQ(cli("run " + (dir / "nan.json").string()), 2);
  EXPECT_TRUE(fs::exists(dir / "nan" / "psinet" / "checkpoint.psnf"));

  const std::string ckpt = (dir / "run" / "psinet" / "checkpoint.psnf").string();
  const std::string cfg = " --config " + (dir / "good.json").string();
  const fs::path fm = dir / "fm.csv";
  EXPECT_EQ(cli("diag featuremap " + ckpt + " c2_1" + cfg + " -o " + fm.string()), 0);
  EXPECT_EQ(csv_rows(fm).size(), 1u + 8u);
  EXPECT_EQ(cli("diag featuremap " + ckpt + " logits" + cfg), 1);
  write_bytes(dir / "junk.psnf", std::vector<std::uint8_t>{'P', 'S'});
  EXPECT_EQ(cli("diag featuremap " + (dir / "junk.psnf").string() + " c2_1" + cfg), 2);
}

TEST(Presets, EveryShippedConfigValidates) {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(PSINET_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    SCOPED_TRACE(entry.path().string());
    EXPECT_NO_THROW(validate(load_config(entry.path())));
    ++n;
  }
  EXPECT_GE(n, 5u);
}

TEST(Presets, GroupCountValuesValidate) {
  json j = json::parse(slurp(fs::path(PSINET_CONFIG_DIR) / "group_count.json"));
  for (int g : {1, 2, 20}) {
    j["psinet"]["groups"] = g;
    EXPECT_EQ(field_error(j), "") << g;
  }
  json d = json::parse(slurp(fs::path(PSINET_CONFIG_DIR) / "depth_sweep.json"));
  for (const char* depth : {"c1_1", "c2_1", "c3_1"}) {
    d["psinet"]["shared_depth"] = depth;
    EXPECT_EQ(field_error(d), "") << depth;
  }
}
