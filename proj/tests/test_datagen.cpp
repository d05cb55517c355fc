#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ehmac/datagen.hpp"
#include "ehmac/io.hpp"

using Catch::Approx;
using namespace ehmac;

namespace {

Dataset small_dataset(int episodes = 4, int n = 5, int k = 2, std::uint64_t seed = 9) {
  SystemConfig cfg;
  cfg.k = k;
  cfg.harvest_mean = 6.0;
  cfg.harvest_var = 2.0;
  cfg.seed = seed;
  Rng rng(seed);
  return generate_training_set(cfg, episodes, n, rng);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("dataset size and widths follow episodes x N") {
  SystemConfig cfg;
  cfg.k = 5;
  cfg.harvest_mean = 7.0;
  cfg.harvest_var = 3.5;
  Rng rng(3u);
  const Dataset ds = generate_training_set(cfg, 1, 20, rng);
  REQUIRE(ds.points.size() == 20);
  CHECK(ds.points.front().features.size() == 15);
  CHECK(ds.points.front().label.size() == 5);
  CHECK(ds.provenance.episodes == 1);
  CHECK(ds.provenance.horizon == 20);
}

TEST_CASE("labels are feasible against their own battery feature") {
  const Dataset ds = small_dataset(30, 20, 2);
  REQUIRE(ds.points.size() == 600);
  const auto& cfg = ds.provenance.config;
  for (const auto& pt : ds.points) {
    for (int k = 0; k < cfg.k; ++k) {
      const double battery = pt.features(cfg.k + k);
      REQUIRE(battery >= 0.0);
      REQUIRE(battery <= cfg.battery_capacity);
      REQUIRE(pt.label(k) >= 0.0);
      REQUIRE(pt.label(k) <= std::min(battery, cfg.power_cap) + 1e-9);
    }
  }
}

TEST_CASE("generation is reproducible and parallelism does not change it") {
  SystemConfig cfg;
  cfg.k = 2;
  cfg.harvest_mean = 5.0;
  cfg.harvest_var = 1.5;
  Rng a(77u), b(77u), c(78u), d(77u);
  const Dataset da = generate_training_set(cfg, 6, 8, a);
  const Dataset db = generate_training_set(cfg, 6, 8, b);
  const Dataset dc = generate_training_set(cfg, 6, 8, c);
  const Dataset dd = generate_training_set(cfg, 6, 8, d, 4);
  REQUIRE(da.points.size() == db.points.size());
  bool all_equal = true, any_diff = false, jobs_equal = true;
  for (std::size_t i = 0; i < da.points.size(); ++i) {
    all_equal = all_equal && da.points[i].features == db.points[i].features &&
                da.points[i].label == db.points[i].label;
    any_diff = any_diff || da.points[i].features != dc.points[i].features;
    jobs_equal = jobs_equal && da.points[i].features == dd.points[i].features &&
                 da.points[i].label == dd.points[i].label;
  }
  CHECK(all_equal);
  CHECK(any_diff);
  CHECK(jobs_equal);
}

TEST_CASE("split produces exact disjoint sizes") {
  const Dataset ds = small_dataset(10, 10, 1);
  Rng rng(5u);
  const auto [train, val] = split_train_validation(ds, 40, rng);
  CHECK(train.points.size() == 60);
  CHECK(val.points.size() == 40);

  // Same seed reproduces the split exactly.
  Rng rng2(5u);
  const auto [train2, val2] = split_train_validation(ds, 40, rng2);
  bool same = true;
  for (std::size_t i = 0; i < val.points.size(); ++i)
    same = same && val.points[i].features == val2.points[i].features;
  CHECK(same);

  // Disjoint cover: multiset of first-feature values matches the original.
  std::vector<double> orig, split_union;
  for (const auto& pt : ds.points) orig.push_back(pt.features(0));
  for (const auto& pt : train.points) split_union.push_back(pt.features(0));
  for (const auto& pt : val.points) split_union.push_back(pt.features(0));
  std::sort(orig.begin(), orig.end());
  std::sort(split_union.begin(), split_union.end());
  CHECK(orig == split_union);

  Rng rng3(6u);
  const auto [t3, v3] = split_train_validation(ds, static_cast<int>(ds.points.size()) - 1, rng3);
  CHECK(t3.points.size() == 1);
  CHECK_THROWS_AS(split_train_validation(ds, 0, rng3), std::invalid_argument);
  CHECK_THROWS_AS(split_train_validation(ds, 100, rng3), std::invalid_argument);
}

TEST_CASE("normalization is fit on train and applied to both splits") {
  Dataset ds = small_dataset(12, 10, 2);
  Rng rng(21u);
  auto [train, val] = split_train_validation(ds, 30, rng);
  const FeatureStats stats = normalize_features(train, val);
  REQUIRE(stats.mean.size() == 6);

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(6);
  for (const auto& pt : train.points) mean += pt.features;
  mean /= static_cast<double>(train.points.size());
  CHECK(mean.cwiseAbs().maxCoeff() < 1e-10);
  CHECK((stats.scale.array() > 0.0).all());
  CHECK(!train.normalization_stats.empty());
  CHECK(!val.normalization_stats.empty());
  CHECK_THROWS_AS(normalize_features(train, val), std::invalid_argument);

  // Labels untouched by normalization.
  Dataset raw = small_dataset(12, 10, 2);
  Rng rng2(21u);
  auto [rtrain, rval] = split_train_validation(raw, 30, rng2);
  bool labels_same = true;
  for (std::size_t i = 0; i < rtrain.points.size(); ++i)
    labels_same = labels_same && rtrain.points[i].label == train.points[i].label;
  CHECK(labels_same);
}

TEST_CASE("constant feature column maps to zeros with unit scale") {
  Dataset train, val;
  train.provenance.config.k = 1;
  for (int i = 0; i < 8; ++i) {
    DataPoint pt;
    pt.features = Eigen::Vector3d(4.0, static_cast<double>(i), 1.0 + i);
    pt.label = Eigen::VectorXd::Constant(1, 0.5);
    train.points.push_back(pt);
    val.points.push_back(pt);
  }
  const FeatureStats stats = normalize_features(train, val);
  CHECK(stats.scale(0) == 1.0);
  for (const auto& pt : train.points) CHECK(pt.features(0) == 0.0);
}

TEST_CASE("dataset round-trips through CSV at serialization precision") {
  Dataset ds = small_dataset(3, 6, 2, 31u);
  const auto path = temp_path("ehmac_test_dataset.csv");
  write_dataset(ds, path);
  const Dataset back = read_dataset(path);
  REQUIRE(back.points.size() == ds.points.size());
  CHECK(back.provenance.seed == ds.provenance.seed);
  CHECK(back.provenance.episodes == ds.provenance.episodes);
  CHECK(back.provenance.config.harvest_mean == ds.provenance.config.harvest_mean);
  for (std::size_t i = 0; i < ds.points.size(); ++i) {
    for (int j = 0; j < 6; ++j)
      CHECK(format_value(back.points[i].features(j)) == format_value(ds.points[i].features(j)));
    for (int j = 0; j < 2; ++j)
      CHECK(format_value(back.points[i].label(j)) == format_value(ds.points[i].label(j)));
  }
  // Re-writing the read dataset reproduces the file byte for byte.
  const auto path2 = temp_path("ehmac_test_dataset2.csv");
  Dataset back2 = back;
  back2.provenance = ds.provenance;
  back2.normalization_stats = ds.normalization_stats;
  write_dataset(back2, path2);
  CHECK(read_text_file(path) == read_text_file(path2));
  std::filesystem::remove(path);
  std::filesystem::remove(detail::sidecar_path(path));
  std::filesystem::remove(path2);
  std::filesystem::remove(detail::sidecar_path(path2));
}

TEST_CASE("csv reader validates header and rows") {
  const auto path = temp_path("ehmac_test_bad.csv");

  SECTION("empty dataset with valid header") {
    write_text_atomic(path, "k=2,n=20\n");
    const Dataset ds = read_dataset(path);
    CHECK(ds.points.empty());
    CHECK(ds.provenance.config.k == 2);
  }
  SECTION("malformed header") {
    write_text_atomic(path, "nodes=2\n");
    CHECK_THROWS_AS(read_dataset(path), std::runtime_error);
  }
  SECTION("row width mismatch against header") {
    write_text_atomic(path, "k=2,n=1\n1,2,3\n");
    CHECK_THROWS_AS(read_dataset(path), std::runtime_error);
  }
  SECTION("overlong row rejected") {
    write_text_atomic(path, "k=1,n=1\n1,2,3,4,5\n");
    CHECK_THROWS_AS(read_dataset(path), std::runtime_error);
  }
  SECTION("non-numeric cell rejected") {
    write_text_atomic(path, "k=1,n=1\n1,2,x,4\n");
    CHECK_THROWS_AS(read_dataset(path), std::runtime_error);
  }
  std::filesystem::remove(path);
}
