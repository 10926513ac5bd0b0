#include <cmath>

#include <gtest/gtest.h>

#include "grouppref/metrics.hpp"
#include "support.hpp"

using namespace grouppref;

TEST(Ndcg, HandCase) {
  const std::map<int, double> rel{{3, 1.0}, {7, 0.5}};
  const std::vector<int> order{7, 3};
  const double dcg = 0.5 + 1.0 / std::log2(3.0);
  const double ideal = 1.0 + 0.5 / std::log2(3.0);
  EXPECT_NEAR(ndcg_at_5(order, rel), dcg / ideal, 1e-15);
  EXPECT_NEAR(ndcg_at_5(order, rel), 0.85972, 1e-5);
}

TEST(Ndcg, IdealOrderIsOneAndScaleInvariant) {
  gp_test::for_all(50, 1, [](Rng& rng) {
    std::map<int, double> rel;
    const int n = gp_test::uniform_int(rng, 1, 9);
    for (int i = 0; i < n; ++i) rel[i * 3] = gp_test::uniform_real(rng, 0.0, 1.0);
    const auto ideal = order_by_score(rel);
    EXPECT_NEAR(ndcg_at_5(ideal, rel), 1.0, 1e-12);

    std::vector<int> shuffled = ideal;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const double c = gp_test::uniform_real(rng, 0.1, 10.0);
    auto scaled = rel;
    for (auto& [k, v] : scaled) v *= c;
    const double a = ndcg_at_5(shuffled, rel);
    EXPECT_NEAR(a, ndcg_at_5(shuffled, scaled), 1e-12);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0 + 1e-12);
  });
}

TEST(Ndcg, AllZeroRelevanceIsFlaggedDegenerate) {
  const std::map<int, double> rel{{1, 0.0}, {2, 0.0}};
  const std::vector<int> order{2, 1};
  const auto r = ndcg_at_k(order, rel, 5);
  EXPECT_TRUE(r.degenerate);
}

TEST(CrossGroupNdcg, IdenticalRankingsScoreOne) {
  CtrTable t;
  for (int g = 0; g < 3; ++g) t[{0, g}] = {{10, 0.5}, {11, 0.3}, {12, 0.1}};
  EXPECT_NEAR(cross_group_ndcg(t), 1.0, 1e-15);
}

TEST(CrossGroupNdcg, ReversedRankingsMatchHandComputation) {
  CtrTable t;
  const std::vector<double> v{0.5, 0.4, 0.3, 0.2, 0.1};
  for (int i = 0; i < 5; ++i) {
    t[{0, 0}][i] = v[static_cast<std::size_t>(i)];
    t[{0, 1}][i] = v[static_cast<std::size_t>(4 - i)];
  }
  // Each direction ranks the other's relevances exactly backwards.
  double dcg = 0, ideal = 0;
  for (int r = 0; r < 5; ++r) {
    dcg += v[static_cast<std::size_t>(4 - r)] / std::log2(r + 2.0);
    ideal += v[static_cast<std::size_t>(r)] / std::log2(r + 2.0);
  }
  EXPECT_NEAR(cross_group_ndcg(t), dcg / ideal, 1e-12);
  EXPECT_LT(cross_group_ndcg(t), 1.0);
}

TEST(CrossGroupNdcg, NeedsAProductWithTwoGroups) {
  CtrTable t;
  t[{0, 0}] = {{1, 0.3}};
  EXPECT_ANY_THROW(cross_group_ndcg(t));
}

TEST(Auroc, HandCases) {
  const std::vector<double> perfect{0.9, 0.8, 0.2, 0.1};
  const std::vector<int> perfect_labels{1, 1, 0, 0};
  EXPECT_EQ(auroc(perfect, perfect_labels), 1.0);
  const std::vector<double> s{0.9, 0.1, 0.8, 0.2};
  const std::vector<int> l{1, 0, 0, 1};
  EXPECT_EQ(auroc(s, l), 0.75);
}

TEST(Auroc, RandomScoresNearHalfAndTiesCountHalf) {
  Rng rng(3);
  std::vector<double> s(10000);
  std::vector<int> l(10000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = gp_test::uniform_real(rng, 0, 1);
    l[i] = static_cast<int>(i % 2);
  }
  EXPECT_NEAR(auroc(s, l), 0.5, 0.02);
  const std::vector<double> tied{0.5, 0.5};
  const std::vector<int> tl{1, 0};
  EXPECT_EQ(auroc(tied, tl), 0.5);
}

TEST(Auroc, MatchesPairwiseCountOracle) {
  gp_test::for_all(40, 4, [](Rng& rng) {
    const int n = gp_test::uniform_int(rng, 2, 40);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> l(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = gp_test::uniform_int(rng, 0, 5) / 5.0;  // frequent ties
      l[static_cast<std::size_t>(i)] = i < 1 ? 1 : (i < 2 ? 0 : gp_test::uniform_int(rng, 0, 1));
    }
    double wins = 0, total = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (l[static_cast<std::size_t>(i)] == 1 && l[static_cast<std::size_t>(j)] == 0) {
          total += 1;
          wins += s[static_cast<std::size_t>(i)] > s[static_cast<std::size_t>(j)] ? 1.0
                  : s[static_cast<std::size_t>(i)] == s[static_cast<std::size_t>(j)] ? 0.5 : 0.0;
        }
    EXPECT_NEAR(auroc(s, l), wins / total, 1e-12);
  });
}

TEST(PairAccuracy, Conventions) {
  std::vector<PrefPairSample> pairs(4);
  for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i].label = static_cast<int>(i % 2);
  const std::vector<double> oracle{0.9, 0.1, 0.8, 0.2};
  EXPECT_EQ(pair_accuracy(oracle, pairs), 1.0);
  const std::vector<double> half(4, 0.5);
  EXPECT_EQ(pair_accuracy(half, pairs), 0.0);

  Rng rng(5);
  std::vector<PrefPairSample> many(1000);
  std::vector<double> random(1000);
  for (std::size_t i = 0; i < many.size(); ++i) {
    many[i].label = gp_test::uniform_int(rng, 0, 1);
    random[i] = gp_test::uniform_real(rng, 0, 1);
  }
  EXPECT_NEAR(pair_accuracy(random, many), 0.5, 0.05);
}

namespace {

struct CtrFixture {
  World world;
  std::vector<GroupRepresentation> groups;
};

CtrFixture ctr_fixture() {
  auto cfg = gp_test::tiny_world_config();
  cfg.n_products = 2;
  cfg.n_styles = 6;
  CtrFixture f{build_world(cfg, 11), {}};
  for (const auto& p : f.world.products)
    for (int seg = 0; seg < 2; ++seg) {
      GroupRepresentation g;
      g.product_id = p.product_id;
      g.group_index = seg;
      for (const auto& u : f.world.users)
        if (f.world.oracle.segment(u, p.category) == seg) g.member_ids.push_back(u.user_id);
      f.groups.push_back(g);
    }
  return f;
}

}  // namespace

TEST(SimulatedCtr, BestStylesBeatWorstStyles) {
  const auto f = ctr_fixture();
  const PromptRenderer r(f.world.style_prototypes, 4, 16, 3);
  std::map<std::pair<int, int>, PromptSeq> best, worst;
  for (const auto& g : f.groups) {
    const int cat = f.world.product(g.product_id).category;
    int b = 0, w = 0;
    for (int s = 1; s < 6; ++s) {
      if (group_oracle_ctr(f.world, g, cat, s) > group_oracle_ctr(f.world, g, cat, b)) b = s;
      if (group_oracle_ctr(f.world, g, cat, s) < group_oracle_ctr(f.world, g, cat, w)) w = s;
    }
    best[{g.product_id, g.group_index}] = r.template_prompt(b);
    worst[{g.product_id, g.group_index}] = r.template_prompt(w);
  }
  EXPECT_LT(simulated_ctr(f.world, f.groups, worst, r), simulated_ctr(f.world, f.groups, best, r));
}

TEST(SimulatedCtr, SharedPromptEqualsExposingEveryGroup) {
  const auto f = ctr_fixture();
  const PromptRenderer r(f.world.style_prototypes, 4, 16, 3);
  const PromptSeq y = r.template_prompt(2);
  std::map<std::pair<int, int>, PromptSeq> shared;
  for (const auto& g : f.groups) shared[{g.product_id, g.group_index}] = y;
  // direct: every user of every product sees y
  double clicks = 0, users = 0;
  for (const auto& p : f.world.products)
    for (const auto& u : f.world.users) {
      clicks += oracle_click_prob(u, p.category, r.latent_style(y), f.world.oracle);
      users += 1;
    }
  EXPECT_NEAR(simulated_ctr(f.world, f.groups, shared, r), clicks / users, 1e-12);
}

TEST(SimulatedCtr, EqualSizedGroupsAverage) {
  auto cfg = gp_test::tiny_world_config();
  cfg.n_products = 1;
  World w = build_world(cfg, 2);
  const PromptRenderer r(w.style_prototypes, 4, 16, 3);
  const PromptSeq y = r.template_prompt(0);
  const int style = r.latent_style(y);
  const int cat = w.products[0].category;
  const double a = -std::log(1.0 / 0.02 - 1.0), b = -std::log(1.0 / 0.04 - 1.0);
  w.oracle.base_logit = 0.0;
  std::vector<GroupRepresentation> groups(2);
  for (int seg = 0; seg < w.oracle.n_segments; ++seg) w.oracle.affinity_at(cat, seg, style) = seg == 0 ? a : b;
  for (const auto& u : w.users) {
    const int seg = w.oracle.segment(u, cat);
    if (seg > 1) continue;
    if (groups[static_cast<std::size_t>(seg)].member_ids.size() < 10)
      groups[static_cast<std::size_t>(seg)].member_ids.push_back(u.user_id);
  }
  groups[1].group_index = 1;
  ASSERT_EQ(groups[0].member_ids.size(), groups[1].member_ids.size());
  const std::map<std::pair<int, int>, PromptSeq> prompts{{{0, 0}, y}, {{0, 1}, y}};
  EXPECT_NEAR(simulated_ctr(w, groups, prompts, r), 0.03, 1e-12);
}

TEST(EvalReportJson, RoundTrip) {
  EvalReport r;
  r.ndcg_at_5_mean = 0.5;
  r.auroc = 0.9;
  r.pair_accuracy = 0.95;
  r.ctr_by_policy = {{"pretrained", 0.4}, {"group_dpo", 0.9}, {"group_agnostic_dpo", 0.5}};
  r.n_products = 12;
  r.n_pairs = 100;
  r.seed = 3;
  const auto back = nlohmann::json(r).get<EvalReport>();
  EXPECT_EQ(nlohmann::json(back).dump(), nlohmann::json(r).dump());
}
