// Drives the installed binary through temp directories and checks exit codes,
// artifact shapes, atomicity, and determinism. EHMAC_CLI_PATH is injected by
// the build so the tests always exercise the freshly built front end.
#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "ehmac/io.hpp"

using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" + EHMAC_CLI_PATH + "' " + args +
                          " >> cli_stdout.txt 2>> cli_stderr.txt";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
}

void write_config(const fs::path& path, const std::string& body) {
  std::ofstream out(path);
  out << body;
}

int count_lines(const fs::path& path) {
  std::istringstream in(ehmac::read_text_file(path));
  int n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

const std::string kConfig = "k = 1\nharvest_mean = 10\nharvest_var = 1\nseed = 7\n";

}  // namespace

TEST_CASE("gen-data row count follows episodes times horizon") {
  TempDir dir("ehmac_cli_gen");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "gen-data -c sys.cfg --episodes 10 --horizon 5 --out d.csv") == 0);
  CHECK(count_lines(dir.path / "d.csv") == 1 + 10 * 5);  // header + rows
  CHECK(fs::exists(dir.path / "d.csv.meta.json"));
  CHECK(fs::exists(dir.path / "d.csv.manifest.json"));

  const auto manifest = nlohmann::json::parse(ehmac::read_text_file(dir.path / "d.csv.manifest.json"));
  CHECK(manifest.at("subcommand") == "gen-data");
  CHECK(manifest.at("outputs").size() == 2);
  // Hashes must be recomputable from the files on disk.
  for (const auto& out : manifest.at("outputs")) {
    const auto p = dir.path / out.at("path").get<std::string>();
    CHECK(out.at("hash").get<std::string>() == ehmac::hash_hex(ehmac::hash_file(p)));
  }
}

TEST_CASE("gen-data help advertises the full-scale defaults") {
  TempDir dir("ehmac_cli_help");
  REQUIRE(run_cli(dir.path, "gen-data --help") == 0);
  const std::string help = ehmac::read_text_file(dir.path / "cli_stdout.txt");
  CHECK(help.find("10000") != std::string::npos);  // episodes -> 2e5 points at horizon 20
  CHECK(help.find("20") != std::string::npos);
}

TEST_CASE("missing config exits nonzero without partial output") {
  TempDir dir("ehmac_cli_missing");
  CHECK(run_cli(dir.path, "gen-data -c absent.cfg --episodes 2 --out d.csv") != 0);
  CHECK_FALSE(fs::exists(dir.path / "d.csv"));
  CHECK_FALSE(fs::exists(dir.path / "d.csv.meta.json"));
}

TEST_CASE("gen-data is invariant to the jobs level") {
  TempDir dir("ehmac_cli_jobs");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "gen-data -c sys.cfg --episodes 6 --horizon 8 --jobs 1 --out a.csv") == 0);
  REQUIRE(run_cli(dir.path, "gen-data -c sys.cfg --episodes 6 --horizon 8 --jobs 4 --out b.csv") == 0);
  CHECK(ehmac::read_text_file(dir.path / "a.csv") == ehmac::read_text_file(dir.path / "b.csv"));
  CHECK(ehmac::read_text_file(dir.path / "a.csv.meta.json") ==
        ehmac::read_text_file(dir.path / "b.csv.meta.json"));
}

TEST_CASE("train repeats bit-identically under one seed and leaves inputs alone") {
  TempDir dir("ehmac_cli_train");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "gen-data -c sys.cfg --episodes 6 --horizon 10 --out d.csv") == 0);
  const auto data_hash = ehmac::hash_file(dir.path / "d.csv");
  const auto meta_hash = ehmac::hash_file(dir.path / "d.csv.meta.json");

  const std::string train = "train --data d.csv --epochs 3 --hidden-layers 4 --seed 42 --out ";
  REQUIRE(run_cli(dir.path, train + "m1.json") == 0);
  REQUIRE(run_cli(dir.path, train + "m2.json") == 0);
  CHECK(ehmac::read_text_file(dir.path / "m1.json") == ehmac::read_text_file(dir.path / "m2.json"));
  CHECK(fs::exists(dir.path / "m1.json.curves.csv"));
  CHECK(count_lines(dir.path / "m1.json.curves.csv") == 1 + 3);

  CHECK(ehmac::hash_file(dir.path / "d.csv") == data_hash);
  CHECK(ehmac::hash_file(dir.path / "d.csv.meta.json") == meta_hash);
}

TEST_CASE("divergent training exits nonzero but still writes curves") {
  TempDir dir("ehmac_cli_diverge");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "gen-data -c sys.cfg --episodes 4 --horizon 10 --out d.csv") == 0);
  CHECK(run_cli(dir.path,
                "train --data d.csv --epochs 3 --hidden-layers 2 --lr 1e100 --out m.json") != 0);
  CHECK_FALSE(fs::exists(dir.path / "m.json"));
  REQUIRE(fs::exists(dir.path / "m.json.curves.csv"));
  CHECK(count_lines(dir.path / "m.json.curves.csv") >= 2);  // header + the failing epoch
}

TEST_CASE("architecture override outside the legal range is a usage error") {
  TempDir dir("ehmac_cli_h0");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "gen-data -c sys.cfg --episodes 2 --horizon 5 --out d.csv") == 0);
  CHECK(run_cli(dir.path, "train --data d.csv --hidden-layers 0 --out m.json") != 0);
  CHECK_FALSE(fs::exists(dir.path / "m.json"));
}

TEST_CASE("eval baseline zero reports zero rate") {
  TempDir dir("ehmac_cli_zero");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "eval -c sys.cfg --baseline zero --slots 40 --out r.json") == 0);
  const auto j = nlohmann::json::parse(ehmac::read_text_file(dir.path / "r.json"));
  CHECK(j.at("policy") == "zero");
  CHECK(j.at("policy_rps").get<double>() == 0.0);
  CHECK(j.at("offline_rps").get<double>() > 0.0);
  CHECK(j.at("ratio_percent").get<double>() == 0.0);

  const std::string row = ehmac::read_text_file(dir.path / "r.json.csv");
  CHECK(row.rfind("policy,slots,offline_rps,policy_rps,percentage\nzero,40,", 0) == 0);
}

TEST_CASE("eval is reproducible and exactly one policy source is accepted") {
  TempDir dir("ehmac_cli_evalrep");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "eval -c sys.cfg --baseline greedy --slots 60 --out a.json") == 0);
  REQUIRE(run_cli(dir.path, "eval -c sys.cfg --baseline greedy --slots 60 --out b.json") == 0);
  CHECK(ehmac::read_text_file(dir.path / "a.json") == ehmac::read_text_file(dir.path / "b.json"));

  CHECK(run_cli(dir.path, "eval -c sys.cfg --slots 10 --out c.json") != 0);
  CHECK(run_cli(dir.path,
                "eval -c sys.cfg --baseline zero --baseline greedy --slots 10 --out c.json") != 0);
  CHECK_FALSE(fs::exists(dir.path / "c.json"));
}

TEST_CASE("eval rejects a checkpoint whose width disagrees with the config") {
  TempDir dir("ehmac_cli_kmismatch");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "gen-data -c sys.cfg --episodes 4 --horizon 10 --out d.csv") == 0);
  REQUIRE(run_cli(dir.path, "train --data d.csv --epochs 2 --hidden-layers 2 --out m.json") == 0);
  CHECK(run_cli(dir.path,
                "eval -c sys.cfg --k 2 --checkpoint m.json --slots 20 --out r.json") != 0);
  const std::string err = ehmac::read_text_file(dir.path / "cli_stderr.txt");
  CHECK(err.find("k = ") != std::string::npos);
}

TEST_CASE("mdp-solve feeds eval and the full pipeline glues together") {
  TempDir dir("ehmac_cli_pipeline");
  write_config(dir.path / "sys.cfg", kConfig);
  REQUIRE(run_cli(dir.path, "mdp-solve -c sys.cfg --out mdp.json") == 0);
  REQUIRE(run_cli(dir.path, "eval -c sys.cfg --mdp-policy mdp.json --slots 100 --out r.json") == 0);
  const auto j = nlohmann::json::parse(ehmac::read_text_file(dir.path / "r.json"));
  CHECK(j.at("policy") == "mdp");
  CHECK(j.at("policy_rps").get<double>() > 0.0);

  // A policy solved on a different battery grid must be rejected.
  write_config(dir.path / "small.cfg", "k = 1\nb_max = 10\np_max = 10\nseed = 7\n");
  CHECK(run_cli(dir.path, "eval -c small.cfg --mdp-policy mdp.json --slots 20 --out s.json") != 0);
}

TEST_CASE("report merges eval rows sorted by the sweep key") {
  TempDir dir("ehmac_cli_report");
  for (const char* v : {"6", "1", "3"}) {
    write_config(dir.path / ("v" + std::string(v) + ".cfg"),
                 "k = 1\nharvest_mean = 10\nharvest_var = " + std::string(v) + "\nseed = 7\n");
    REQUIRE(run_cli(dir.path, "eval -c v" + std::string(v) +
                                  ".cfg --baseline greedy --slots 40 --out ev" + v + ".json") == 0);
  }
  REQUIRE(run_cli(dir.path,
                  "report --inputs ev6.json ev1.json ev3.json --sweep v --out table.csv") == 0);
  std::istringstream in(ehmac::read_text_file(dir.path / "table.csv"));
  std::string header, l1, l2, l3;
  REQUIRE(std::getline(in, header));
  REQUIRE(std::getline(in, l1));
  REQUIRE(std::getline(in, l2));
  REQUIRE(std::getline(in, l3));
  CHECK(header == "v,offline_rps,policy_rps,percentage");
  CHECK(l1.rfind("1,", 0) == 0);
  CHECK(l2.rfind("3,", 0) == 0);
  CHECK(l3.rfind("6,", 0) == 0);
}
