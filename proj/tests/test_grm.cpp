#include <gtest/gtest.h>

#include "grouppref/grm.hpp"
#include "grouppref/metrics.hpp"
#include "support.hpp"

using namespace grouppref;

namespace {

// Two groups per product, one per planted segment, labelled with oracle CTRs.
// The group vector is a noisy segment indicator.
struct PairData {
  World world;
  std::vector<PrefPairSample> pairs;
};

PairData segment_pairs(PreferenceMode mode, int n_products, std::uint64_t seed) {
  auto cfg = gp_test::tiny_world_config();
  cfg.n_products = n_products;
  cfg.creatives_per_product = 6;
  cfg.n_styles = 6;
  cfg.mode = mode;
  PairData d{build_world(cfg, seed), {}};
  Rng rng(seed + 100);
  for (const auto& p : d.world.products) {
    const auto cr = d.world.creatives_of(p.product_id);
    for (int seg = 0; seg < 2; ++seg) {
      Vec g = gp_test::random_vec(4, rng, 0.1);
      g[seg] += 1.0;
      for (std::size_t i = 0; i < cr.size(); ++i)
        for (std::size_t j = i + 1; j < cr.size(); ++j) {
          const double ca = sigmoid(d.world.oracle.base_logit +
                                    d.world.oracle.affinity_at(p.category, seg, cr[i]->latent_style));
          const double cb = sigmoid(d.world.oracle.base_logit +
                                    d.world.oracle.affinity_at(p.category, seg, cr[j]->latent_style));
          if (ca == cb) continue;
          PrefPairSample s;
          s.product_id = p.product_id;
          s.group_index = seg;
          s.group = g;
          s.creative_a = cr[i]->creative_id;
          s.creative_b = cr[j]->creative_id;
          s.ctr_a = ca;
          s.ctr_b = cb;
          s.label = ca > cb ? 0 : 1;
          d.pairs.push_back(s);
        }
    }
  }
  return d;
}

GrmConfig small_grm(bool use_group) {
  GrmConfig c;
  c.hidden = 16;
  c.d_g = 4;
  c.encoder_hidden = 8;
  c.epochs = 200;
  c.lr = 0.02;
  c.use_group = use_group;
  return c;
}

GaipRecord gaip(int product, int group, int creative, double ctr) {
  GaipRecord r;
  r.product_id = product;
  r.title_ref = product;
  r.group_index = group;
  r.creative_id = creative;
  r.ctr = ctr;
  r.group_embedding = {0.5, -0.5};
  return r;
}

}  // namespace

TEST(GrmPredict, IdenticalCreativesAndSwapAntisymmetry) {
  const auto d = segment_pairs(PreferenceMode::kConflict, 2, 1);
  const auto p = init_grm_params(4, d.world.config.d_raw, small_grm(true), 3);
  auto pair = d.pairs.front();
  auto same = pair;
  same.creative_b = same.creative_a;
  EXPECT_EQ(grm_predict(same, d.world, p), 0.5);
  gp_test::for_all(50, 2, [&](Rng& rng) {
    auto q = d.pairs[static_cast<std::size_t>(gp_test::uniform_int(rng, 0, static_cast<int>(d.pairs.size()) - 1))];
    q.group = gp_test::random_vec(4, rng, 3.0);
    auto swapped = q;
    std::swap(swapped.creative_a, swapped.creative_b);
    EXPECT_NEAR(grm_predict(q, d.world, p) + grm_predict(swapped, d.world, p), 1.0, 1e-12);
  });
}

TEST(GrmPredict, ZeroScorerPredictsHalfAndProductMismatchThrows) {
  const auto d = segment_pairs(PreferenceMode::kConflict, 2, 1);
  auto p = init_grm_params(4, d.world.config.d_raw, small_grm(true), 3);
  p.w2.setZero();
  for (const auto& q : d.pairs) EXPECT_EQ(grm_predict(q, d.world, p), 0.5);
  auto bad = d.pairs.front();
  bad.product_id = 1;
  EXPECT_THROW(grm_predict(bad, d.world, p), InputError);
}

TEST(GrmLoss, GradientMatchesFiniteDifferences) {
  const auto d = segment_pairs(PreferenceMode::kConflict, 2, 2);
  for (bool use_group : {true, false}) {
    const auto p = init_grm_params(4, d.world.config.d_raw, small_grm(use_group), 5);
    const auto lg = grm_loss_and_grad(d.pairs, d.world, p);
    const auto rep = gp_test::finite_difference_check<GrmParams>(
        p, lg.grad, [&](const GrmParams& q) { return grm_loss_and_grad(d.pairs, d.world, q).loss; },
        300, 7);
    EXPECT_LT(rep.max_rel_error, 1e-4) << (use_group ? "with group: " : "no group: ") << rep.worst;
  }
}

TEST(GrmTrain, ZeroLearningRateLeavesParameters) {
  const auto d = segment_pairs(PreferenceMode::kConflict, 2, 3);
  auto cfg = small_grm(true);
  cfg.lr = 0.0;
  cfg.epochs = 5;
  const auto p = init_grm_params(4, d.world.config.d_raw, cfg, 3);
  EXPECT_TRUE(params_equal(grm_train(d.pairs, d.world, cfg, p).params, p));
}

TEST(GrmTrain, RandomModelIsNearChanceOnReversedGroups) {
  const auto d = segment_pairs(PreferenceMode::kReversed, 40, 4);
  ASSERT_GE(d.pairs.size(), 1000u);
  const auto p = init_grm_params(4, d.world.config.d_raw, small_grm(true), 9);
  EXPECT_NEAR(pair_accuracy(p, d.pairs, d.world), 0.5, 0.05);
}

TEST(GrmTrain, GroupTokenResolvesReversedRankings) {
  const auto d = segment_pairs(PreferenceMode::kReversed, 16, 5);
  const auto [train, test] = split_pairs(d.pairs, 0.25, 3);
  const auto with = grm_train(train, d.world, small_grm(true),
                              init_grm_params(4, d.world.config.d_raw, small_grm(true), 1));
  const auto without = grm_train(train, d.world, small_grm(false),
                                 init_grm_params(4, d.world.config.d_raw, small_grm(false), 1));
  const double acc = pair_accuracy(with.params, test, d.world);
  const double acc_ng = pair_accuracy(without.params, test, d.world);
  EXPECT_GE(acc, 0.9);
  EXPECT_LT(acc_ng, acc);

  // Sensitivity: same creatives, opposite groups, opposite verdicts.
  int agree = 0, total = 0;
  for (const auto& q : test) {
    if (q.group_index != 0) continue;
    PrefPairSample other = q;
    for (const auto& r : d.pairs)
      if (r.product_id == q.product_id && r.group_index == 1) other.group = r.group;
    const double p0 = grm_predict(q, d.world, with.params);
    const double p1 = grm_predict(other, d.world, with.params);
    const bool a_better_for_g0 = q.label == 0;
    agree += a_better_for_g0 ? (p0 > 0.5 && p1 < 0.5) : (p0 < 0.5 && p1 > 0.5);
    ++total;
  }
  ASSERT_GT(total, 0);
  EXPECT_GE(static_cast<double>(agree) / total, 0.9);
}

TEST(GrmTrain, GroupAblationIsWorseOnConflictWorld) {
  const auto d = segment_pairs(PreferenceMode::kConflict, 16, 6);
  const auto [train, test] = split_pairs(d.pairs, 0.25, 4);
  const auto with = grm_train(train, d.world, small_grm(true),
                              init_grm_params(4, d.world.config.d_raw, small_grm(true), 2));
  const auto without = grm_train(train, d.world, small_grm(false),
                                 init_grm_params(4, d.world.config.d_raw, small_grm(false), 2));
  EXPECT_LT(pair_accuracy(without.params, test, d.world), pair_accuracy(with.params, test, d.world));
}

TEST(BuildPairs, LabelTieAndCountRules) {
  auto cfg = gp_test::tiny_world_config();
  cfg.n_products = 2;
  const World w = build_world(cfg, 1);
  const auto c0 = w.creatives_of(0);
  const auto c1 = w.creatives_of(1);

  auto one = build_pairs({gaip(0, 0, c0[0]->creative_id, 0.1), gaip(0, 0, c0[1]->creative_id, 0.3)}, w);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].creative_a, c0[0]->creative_id);
  EXPECT_EQ(one[0].label, 1);  // creative_b holds the 0.3

  EXPECT_TRUE(build_pairs({gaip(0, 0, c0[0]->creative_id, 0.2), gaip(0, 0, c0[1]->creative_id, 0.2)}, w).empty());

  std::vector<GaipRecord> four;
  for (int i = 0; i < 4; ++i) four.push_back(gaip(1, 0, c1[static_cast<std::size_t>(i)]->creative_id, 0.1 * (i + 1)));
  EXPECT_EQ(build_pairs(four, w).size(), 6u);

  EXPECT_THROW(build_pairs({gaip(0, 0, c0[0]->creative_id, 0.1), gaip(0, 0, c1[0]->creative_id, 0.3)}, w),
               InputError);
}

TEST(SplitPairs, SizesAndDeterminism) {
  const auto d = segment_pairs(PreferenceMode::kConflict, 4, 7);
  const auto [a, b] = split_pairs(d.pairs, 0.2, 9);
  EXPECT_EQ(a.size() + b.size(), d.pairs.size());
  EXPECT_EQ(b.size(), static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(d.pairs.size()))));
  const auto [a2, b2] = split_pairs(d.pairs, 0.2, 9);
  EXPECT_EQ(nlohmann::json(b).dump(), nlohmann::json(b2).dump());
}

TEST(GrmArchive, RoundTrip) {
  const auto d = segment_pairs(PreferenceMode::kConflict, 2, 1);
  const auto cfg = small_grm(false);
  const auto p = init_grm_params(4, d.world.config.d_raw, cfg, 3);
  const auto back = grm_from_archive(archive_from_json(archive_to_json(grm_to_archive(p, cfg))));
  EXPECT_TRUE(params_equal(p, back));
  EXPECT_FALSE(back.use_group);
}
