#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "vsdf/data/dataset.hpp"
#include "vsdf/evaluation/metrics.hpp"
#include "vsdf/nn/ops.hpp"

using namespace vsdf;
using namespace vsdf::eval;

namespace {

OccupancyGrid occ(int R, std::initializer_list<int> on) {
  OccupancyGrid g{R, std::vector<std::uint8_t>(static_cast<std::size_t>(R) * R * R, 0)};
  for (int i : on) g.bits[static_cast<std::size_t>(i)] = 1;
  return g;
}

OccupancyGrid random_occ(int R, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  OccupancyGrid g{R, std::vector<std::uint8_t>(static_cast<std::size_t>(R) * R * R, 0)};
  for (auto& v : g.bits) v = b(rng);
  return g;
}

// naive set-based oracle
double iou_oracle(const OccupancyGrid& a, const OccupancyGrid& b) {
  std::set<int> sa, sb, u, in;
  for (int z = 0; z < a.R; ++z)
    for (int y = 0; y < a.R; ++y)
      for (int x = 0; x < a.R; ++x) {
        const int i = (z * a.R + y) * a.R + x;
        if (a.bits[i]) sa.insert(i);
        if (b.bits[i]) sb.insert(i);
      }
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(u, u.begin()));
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(in, in.begin()));
  return u.empty() ? 1.0 : static_cast<double>(in.size()) / static_cast<double>(u.size());
}

double tmd_oracle(const std::vector<OccupancyGrid>& s) {
  // per-shape mean IoU to the other k-1 shapes, then the mean over shapes
  double total = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double m = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (j != i) m += iou_oracle(s[i], s[j]);
    total += m / static_cast<double>(s.size() - 1);
  }
  return total / static_cast<double>(s.size());
}

const std::vector<std::string> kNames{"chair", "table", "stool"};

LabeledGrids procedural(int n, int R, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LabeledGrids out;
  for (int i = 0; i < n; ++i) {
    auto s = data::sample_shape(kNames[i % 3], rng);
    out.grids.push_back(geometry::to_occupancy(geometry::analytic_sdf(s.shape, R, geometry::default_tau(R)), R));
    out.labels.push_back(i % 3);
  }
  return out;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("iou and tmd hand examples") {
  CHECK(iou(occ(2, {0, 1}), occ(2, {0, 1})) == 1.0);
  CHECK(iou(occ(2, {0}), occ(2, {5})) == 0.0);
  CHECK(iou(occ(2, {0, 1}), occ(2, {1, 2})) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(iou(occ(2, {}), occ(2, {})) == 1.0);
  CHECK_THROWS_AS(iou(occ(2, {}), occ(4, {})), std::invalid_argument);

  auto a = occ(2, {0, 1}), b = occ(2, {1, 2}), c = occ(2, {6, 7});
  // pairwise IoUs {1/3, 0, 0}
  CHECK(tmd({a, b, c}) == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
  CHECK(tmd({a, a, a, a}) == 1.0);
  CHECK(tmd({occ(2, {0}), occ(2, {1}), occ(2, {2})}) == 0.0);
  CHECK_THROWS_AS(tmd({a}), std::invalid_argument);
}

TEST_CASE("iou and tmd match the brute-force oracle on random 8^3 grids") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const double p = 0.05 + 0.9 * (trial / 50.0);
    auto a = random_occ(8, p, rng), b = random_occ(8, 1.0 - p, rng);
    REQUIRE(iou(a, b) == iou_oracle(a, b));
    REQUIRE(iou(a, b) == iou(b, a));
    REQUIRE(iou(a, b) >= 0.0);
    REQUIRE(iou(a, b) <= 1.0);
  }
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<OccupancyGrid> s;
    for (int k = 0; k < 2 + trial; ++k) s.push_back(random_occ(8, 0.3, rng));
    const double t = tmd(s);
    CHECK(t == doctest::Approx(tmd_oracle(s)).epsilon(1e-12));
    std::shuffle(s.begin(), s.end(), rng);
    CHECK(tmd(s) == doctest::Approx(t).epsilon(1e-12));
  }
}

TEST_CASE("accuracy bookkeeping") {
  CHECK(accuracy(std::vector<int>{0, 1, 2, 2}, std::vector<int>{0, 1, 2, 0}) == 75.0);
  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
  CHECK_THROWS_AS(accuracy(std::vector<int>{1}, std::vector<int>{1, 2}), std::invalid_argument);
  // random intended labels against fixed predictions: about one in three
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> lab(0, 2);
  std::vector<int> pred(30000), intended(30000);
  for (auto& v : pred) v = lab(rng);
  for (auto& v : intended) v = lab(rng);
  CHECK(std::abs(accuracy(pred, intended) - 100.0 / 3.0) < 5.0);
  // reordering samples does not matter
  std::vector<int> idx(pred.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<int> p2, i2;
  for (int i : idx) {
    p2.push_back(pred[i]);
    i2.push_back(intended[i]);
  }
  CHECK(accuracy(p2, i2) == accuracy(pred, intended));
}

TEST_CASE("classifier gradients") {
  ClassifierConfig cfg{8, 3, 2};
  auto ps = init_classifier_params<double>(cfg, kNames, 1);
  std::mt19937_64 rng(4);
  auto x = testutil::random_tensor({2, 1, 8, 8, 8}, rng, 0.0, 1.0);
  std::vector<int> labels{1, 2};
  auto loss = [&](nn::ParamStore<double>& p) {
    return nn::cross_entropy(classifier_forward(cfg, p, nn::constant(x)), std::span<const int>(labels));
  };
  for (int slice = 0; slice < 3; ++slice) CHECK(testutil::param_slice_grad_error(ps, loss, 16, 1e-5, rng) < 1e-4);
}

TEST_CASE("toy classifier separates the procedural categories") {
  auto train = procedural(90, 16, 1), held = procedural(30, 16, 2);
  ClassifierConfig cfg{16, 3, 8};
  ClassifierTrainConfig tc{.epochs = 10, .batch_size = 8, .lr = 3e-3, .seed = 5};
  ClassifierTrainResult res;
  auto c = train_toy_classifier(train, kNames, cfg, tc, &held, &res);
  CAPTURE(res.heldout_accuracy);
  CHECK(res.heldout_accuracy >= 90.0);
  CHECK(res.loss_curve.back() < res.loss_curve.front());
  CHECK(c.logits(held.grids[0]) == c.logits(held.grids[0]));

  // relabeling classes (names with labels) relabels the confusion matrix
  const std::vector<int> perm{2, 0, 1};
  LabeledGrids ptrain = train, pheld = held;
  for (auto& l : ptrain.labels) l = perm[l];
  for (auto& l : pheld.labels) l = perm[l];
  std::vector<std::string> pnames(3);
  for (int k = 0; k < 3; ++k) pnames[perm[k]] = kNames[k];
  auto pc = train_toy_classifier(ptrain, pnames, cfg, tc);
  auto m = confusion_matrix(c, held), pm = confusion_matrix(pc, pheld);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(pm[perm[i]][perm[j]] == m[i][j]);

  // the default scorer
  ScorerRegistry reg;
  reg.add(kDefaultScorer, classifier_scorer(c));
  std::mt19937_64 rng(8);
  auto chair = data::sample_shape("chair", rng);
  auto grid = geometry::analytic_sdf(chair.shape, 16, geometry::default_tau(16));
  const double s = reg.score(kDefaultScorer, grid, "A chair with four legs");
  CHECK(s == reg.score(kDefaultScorer, grid, "a chair"));
  CHECK(s == c.probabilities(geometry::to_occupancy(grid, 16))[0]);
  CHECK_THROWS_WITH(reg.score(kDefaultScorer, grid, "a sofa"), doctest::Contains("names no known category"));
  CHECK_THROWS_AS(reg.score("clip", grid, "a chair"), std::invalid_argument);
  CHECK(reg.names() == std::vector<std::string>{kDefaultScorer});

  // accuracy over grids checks the resolution
  CHECK_THROWS_AS(accuracy({occ(8, {})}, {0}, c), std::invalid_argument);

  auto dir = std::filesystem::temp_directory_path() / "vsdf_test_classifier";
  save_classifier(c, dir);
  auto back = load_classifier(dir);
  CHECK(back.class_names() == kNames);
  CHECK(back.logits(held.grids[3]) == c.logits(held.grids[3]));
  std::filesystem::remove_all(dir);
}

TEST_CASE("classifier training preconditions") {
  auto data = procedural(6, 16, 1);
  ClassifierConfig cfg{16, 3, 4};
  LabeledGrids one = data;
  for (auto& l : one.labels) l = 0;
  CHECK_THROWS_WITH(train_toy_classifier(one, kNames, cfg, {}), doctest::Contains("at least two classes"));
  LabeledGrids two = data;
  for (auto& l : two.labels) l = l == 2 ? 1 : l;
  CHECK_THROWS_WITH(train_toy_classifier(two, kNames, cfg, {}), doctest::Contains("'stool' has no samples"));
  CHECK_THROWS_AS(train_toy_classifier(data, {"a", "b"}, cfg, {}), std::invalid_argument);
  CHECK_THROWS_AS((ClassifierConfig{12, 3, 4}.validate()), std::invalid_argument);
}

TEST_CASE("metrics report json") {
  MetricsReport r;
  r.acc = 90;
  r.tmd = 0.4;
  r.scorer = kDefaultScorer;
  r.samples.push_back({"a.tsdf", "a chair", 0, 0, std::nullopt, 0.9});
  auto j = r.to_json();
  CHECK(j["format_version"] == 1);
  CHECK(j["iou_mean"].is_null());
  CHECK(j["tmd"] == 0.4);
  CHECK(j["samples"][0]["score"] == 0.9);
  CHECK(j["samples"][0]["iou"].is_null());
}

}  // TEST_SUITE
