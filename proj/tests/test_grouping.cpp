#include <algorithm>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "grouppref/grouping.hpp"
#include "planted.hpp"
#include "support.hpp"

using namespace grouppref;

namespace {

Mat four_points() {
  Mat p(4, 2);
  p << 0, 0, 0, 1, 10, 0, 10, 1;
  return p;
}

// Exhaustive minimum WCSS over every labelling of the rows into at most k
// non-empty clusters.
double brute_force_wcss(const Mat& pts, int k) {
  const int n = static_cast<int>(pts.rows());
  std::vector<int> lab(static_cast<std::size_t>(n), 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    double cost = 0;
    for (int c = 0; c < k; ++c) {
      Vec mean = Vec::Zero(pts.cols());
      int m = 0;
      for (int i = 0; i < n; ++i)
        if (lab[static_cast<std::size_t>(i)] == c) mean += pts.row(i).transpose(), ++m;
      if (m == 0) continue;
      mean /= m;
      for (int i = 0; i < n; ++i)
        if (lab[static_cast<std::size_t>(i)] == c) cost += (pts.row(i).transpose() - mean).squaredNorm();
    }
    best = std::min(best, cost);
    int i = 0;
    while (i < n && ++lab[static_cast<std::size_t>(i)] == k) lab[static_cast<std::size_t>(i++)] = 0;
    if (i == n) break;
  }
  return best;
}

// 12 members at radii 1..12 around the origin: four collinear triples
// x + y = z placed on separate axes, so the centroid is exactly zero.
Mat radius_fixture() {
  const int triples[4][3] = {{8, 4, 12}, {10, 1, 11}, {6, 3, 9}, {5, 2, 7}};
  Mat p = Mat::Zero(12, 4);
  int row = 0;
  for (int t = 0; t < 4; ++t) {
    p(row++, t) = triples[t][0];
    p(row++, t) = triples[t][1];
    p(row++, t) = -triples[t][2];
  }
  return p;
}

}  // namespace

TEST(KMeans, FourPointFixtureMatchesBruteForce) {
  const Mat p = four_points();
  const auto a = kmeans(p, 2, 1);
  EXPECT_NEAR(a.wcss, 1.0, 1e-12);
  EXPECT_NEAR(a.wcss, brute_force_wcss(p, 2), 1e-12);
  EXPECT_EQ(a.labels[0], a.labels[1]);
  EXPECT_EQ(a.labels[2], a.labels[3]);
  EXPECT_NE(a.labels[0], a.labels[2]);
  const int left = a.labels[0];
  EXPECT_TRUE(a.centroids.row(left).isApprox(Eigen::RowVector2d(0, 0.5)));
  EXPECT_TRUE(a.centroids.row(1 - left).isApprox(Eigen::RowVector2d(10, 0.5)));
}

TEST(KMeans, KEqualsNGivesZeroWcss) {
  const Mat p = four_points();
  const auto a = kmeans(p, 4, 3);
  EXPECT_NEAR(a.wcss, 0.0, 1e-15);
  EXPECT_EQ(std::set<int>(a.labels.begin(), a.labels.end()).size(), 4u);
}

TEST(KMeans, DuplicatedPointsKeepPartitionStructure) {
  const Mat p = four_points();
  Mat d(8, 2);
  d << p, p;
  const auto a = kmeans(d, 2, 5);
  EXPECT_NEAR(a.wcss, 2.0, 1e-12);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(a.labels[static_cast<std::size_t>(i)], a.labels[static_cast<std::size_t>(i + 4)]);
}

TEST(KMeans, RandomFourPointFixturesMatchBruteForce) {
  gp_test::for_all(60, 11, [](Rng& rng) {
    const Mat p = gp_test::random_mat(4, 2, rng, 3.0);
    for (int k = 1; k <= 3; ++k) EXPECT_NEAR(kmeans(p, k, rng()).wcss, brute_force_wcss(p, k), 1e-9);
  });
}

TEST(Silhouette, FourPointFixture) {
  EXPECT_NEAR(mean_silhouette(four_points(), std::vector<int>{0, 0, 1, 1}), 0.90024876, 1e-6);
}

TEST(Silhouette, SplitScoresHighOnlyWithSeparation) {
  Rng rng(2);
  std::vector<int> split(40);
  for (int i = 0; i < 40; ++i) split[static_cast<std::size_t>(i)] = i < 20 ? 0 : 1;
  Mat apart(40, 2), together(40, 2);
  apart.topRows(20) = gp_test::random_mat(20, 2, rng, 0.3);
  apart.bottomRows(20) = gp_test::random_mat(20, 2, rng, 0.3).rowwise() + Eigen::RowVector2d(6, 0);
  together.topRows(20) = gp_test::random_mat(20, 2, rng, 0.3);
  together.bottomRows(20) = gp_test::random_mat(20, 2, rng, 0.3);
  EXPECT_GT(mean_silhouette(apart, split), 0.8);
  EXPECT_LT(mean_silhouette(together, split), 0.1);
  EXPECT_THROW(mean_silhouette(apart, std::vector<int>(40, 0)), PreconditionError);
}

TEST(Silhouette, IdenticalPointsScoreZero) {
  const Mat p = Mat::Ones(6, 3);
  EXPECT_EQ(mean_silhouette(p, std::vector<int>{0, 0, 0, 1, 1, 1}), 0.0);
}

TEST(SelectK, RecoversThreePlantedClusters) {
  int hits = 0;
  for (int s = 0; s < 50; ++s) {
    const auto pts = gp_test::planted_clusters(3, 30, 8.0, static_cast<std::uint64_t>(s));
    hits += select_k(pts.points, 2, 6, static_cast<std::uint64_t>(1000 + s)).k == 3;
  }
  EXPECT_GE(hits, 48);
}

TEST(SelectK, TwoPointsFallBackToOneCluster) {
  const auto r = select_k(Mat::Identity(2, 2), 2, 5, 1);
  EXPECT_EQ(r.k, 1);
  EXPECT_EQ(r.assignment.labels, (std::vector<int>{0, 0}));
}

TEST(SelectK, UniformBlobStillReturnsArgmax) {
  Rng rng(4);
  Mat blob(60, 2);
  for (Eigen::Index i = 0; i < blob.size(); ++i) blob.data()[i] = gp_test::uniform_real(rng, 0, 1);
  const auto r = select_k(blob, 2, 5, 9);
  ASSERT_EQ(r.scores.size(), 4u);
  double best = -1;
  int arg = 0;
  for (auto [k, s] : r.scores) {
    EXPECT_LT(s, 0.6);
    if (s > best) best = s, arg = k;
  }
  EXPECT_EQ(r.k, arg);
}

TEST(Percentile, LinearInterpolation) {
  std::vector<double> v(12);
  std::iota(v.begin(), v.end(), 1.0);
  EXPECT_NEAR(percentile_linear(v, 15.0), 2.65, 1e-12);
  EXPECT_DOUBLE_EQ(percentile_linear(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(percentile_linear(v, 100.0), 12.0);
}

TEST(Aggregate, FifteenthPercentilePicksRadiiThreeThenTwo) {
  const Mat p = radius_fixture();
  std::vector<int> ids(12);
  std::iota(ids.begin(), ids.end(), 100);
  ClusterAssignment a;
  a.labels.assign(12, 0);
  const auto g = aggregate_group(p, ids, a, 0, PercentileSpec{});
  ASSERT_EQ(g.size(), 11u);
  EXPECT_LT(g.centroid.norm(), 1e-15);
  EXPECT_NEAR(g.peripherals[0].norm(), 3.0, 1e-12);
  EXPECT_NEAR(g.peripherals[1].norm(), 2.0, 1e-12);
  EXPECT_FALSE(g.degenerate);
}

TEST(Aggregate, SingleMemberIsDegenerate) {
  Mat p(1, 3);
  p << 1, 2, 3;
  ClusterAssignment a;
  a.labels = {0};
  const std::vector<int> ids{7};
  const auto g = aggregate_group(p, ids, a, 0, PercentileSpec{});
  EXPECT_TRUE(g.degenerate);
  EXPECT_EQ(g.centroid, p.row(0).transpose());
  ASSERT_EQ(g.peripherals.size(), 10u);
  for (const auto& v : g.peripherals) EXPECT_EQ(v, p.row(0).transpose());
}

TEST(Aggregate, PermutingMembersChangesNothing) {
  gp_test::for_all(30, 5, [](Rng& rng) {
    const int n = gp_test::uniform_int(rng, 1, 25);
    const Mat p = gp_test::random_mat(n, 4, rng);
    std::vector<int> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    ClusterAssignment a;
    a.labels.assign(static_cast<std::size_t>(n), 0);
    const auto g1 = aggregate_group(p, ids, a, 0, PercentileSpec{});

    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat q(n, 4);
    std::vector<int> ids2(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      q.row(i) = p.row(perm[static_cast<std::size_t>(i)]);
      ids2[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    const auto g2 = aggregate_group(q, ids2, a, 0, PercentileSpec{});
    EXPECT_EQ(nlohmann::json(g1).dump(), nlohmann::json(g2).dump());
  });
}

TEST(PercentileSpecText, ParseAndValidate) {
  const auto s = PercentileSpec::parse("15:2,55:3,95:5", 10);
  EXPECT_EQ(s.total(), 10);
  EXPECT_EQ(s.to_string(), "15:2,55:3,95:5");
  EXPECT_THROW(PercentileSpec::parse("15:6,55:6", 10), ConfigError);
  EXPECT_THROW(PercentileSpec::parse("150:1", 10), ConfigError);
}

TEST(GroupEncoder, ZeroAndIdenticalInputs) {
  GroupEncoderParams enc = init_group_encoder(6, 5, 3, 1);
  GroupRepresentation g;
  g.centroid = Vec::LinSpaced(2, 0.1, 0.2);
  g.peripherals = {Vec::Ones(2), Vec::Zero(2)};
  EXPECT_EQ(encode_group(g, enc), encode_group(g, enc));
  for (auto* m : {&enc.w1, &enc.w2}) m->setZero();
  enc.b1.setZero();
  enc.b2.setZero();
  EXPECT_EQ(encode_group(g, enc), Vec::Zero(3));
}

TEST(GroupEncoder, BackwardMatchesFiniteDifferences) {
  Rng rng(3);
  const GroupEncoderParams enc = init_group_encoder(12, 7, 4, 2);
  const Vec x = gp_test::random_vec(12, rng);
  const Vec w = gp_test::random_vec(4, rng);
  GroupEncoderCache cache;
  encode_group_flat(x, enc, &cache);
  GroupEncoderParams grad = enc;
  for (auto* m : {&grad.w1, &grad.w2}) m->setZero();
  grad.b1.setZero();
  grad.b2.setZero();
  encode_group_backward(cache, enc, w, grad);
  const auto rep = gp_test::finite_difference_check<GroupEncoderParams>(
      enc, grad, [&](const GroupEncoderParams& e) { return w.dot(encode_group_flat(x, e)); }, 200, 4);
  EXPECT_LT(rep.max_rel_error, 1e-6) << rep.worst;
}
