#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "grouppref/metrics.hpp"
#include "grouppref/prefnet.hpp"
#include "support.hpp"

using namespace grouppref;
using gp_test::random_mat;
using gp_test::random_vec;

namespace {

PrefNetConfig small_config(const World& w, int d = 8) {
  PrefNetConfig c = PrefNetConfig::for_world(w.config);
  c.dim_d = d;
  c.dim_dprime = 3;
  return c;
}

// Random parameters with non-zero heads so every branch carries gradient.
PrefModelParams random_params(const PrefNetConfig& c, std::uint64_t seed) {
  PrefModelParams p = init_pref_params(c, seed);
  Rng rng(seed + 1);
  p.head_t = random_vec(c.dim_d, rng, 0.5);
  p.head_v = random_vec(c.dim_d, rng, 0.5);
  p.head_uc = random_vec(c.dim_d, rng, 0.5);
  p.head_bias = random_vec(3, rng, 0.5);
  return p;
}

std::vector<PrefSample> all_samples(const World& w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PrefSample> out;
  for (const auto& u : w.users)
    for (const auto& c : w.creatives)
      out.push_back({&u, &w.product(c.product_id), &c, gp_test::uniform_int(rng, 0, 1)});
  return out;
}

// Straight-line evaluation of the model with plain loops, kept separate from
// the batched implementation.
double reference_logit(const PrefSample& s, const PrefModelParams& p) {
  const int d = p.dim();
  std::vector<double> x;
  for (std::size_t a = 0; a < s.user->attributes.size(); ++a)
    for (Eigen::Index j = 0; j < p.attr_tables[a].cols(); ++j)
      x.push_back(p.attr_tables[a](s.user->attributes[a], j));
  std::vector<double> h(static_cast<std::size_t>(p.mlp_w1.cols()));
  for (std::size_t j = 0; j < h.size(); ++j) {
    double acc = p.mlp_b1[static_cast<Eigen::Index>(j)];
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * p.mlp_w1(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    h[j] = std::tanh(acc);
  }
  std::vector<double> eu(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    double acc = p.mlp_b2[j];
    for (std::size_t i = 0; i < h.size(); ++i) acc += h[i] * p.mlp_w2(static_cast<Eigen::Index>(i), j);
    eu[static_cast<std::size_t>(j)] = acc;
  }

  auto project = [&](const Mat& tokens, const Mat& proj) {
    std::vector<std::vector<double>> k(static_cast<std::size_t>(tokens.rows()), std::vector<double>(static_cast<std::size_t>(d)));
    for (Eigen::Index r = 0; r < tokens.rows(); ++r)
      for (int j = 0; j < d; ++j) {
        double acc = 0;
        for (Eigen::Index i = 0; i < tokens.cols(); ++i) acc += tokens(r, i) * proj(i, j);
        k[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)] = acc;
      }
    return k;
  };
  auto mean_rows = [&](const std::vector<std::vector<double>>& k) {
    std::vector<double> m(static_cast<std::size_t>(d), 0.0);
    for (const auto& row : k)
      for (int j = 0; j < d; ++j) m[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(j)] / static_cast<double>(k.size());
    return m;
  };
  auto mul = [&](const std::vector<double>& v, const Mat& w) {
    std::vector<double> o(static_cast<std::size_t>(d), 0.0);
    for (int j = 0; j < d; ++j)
      for (int i = 0; i < d; ++i) o[static_cast<std::size_t>(j)] += v[static_cast<std::size_t>(i)] * w(i, j);
    return o;
  };
  auto attend = [&](const std::vector<double>& q, const std::vector<std::vector<double>>& keys,
                    const CrossAttentionParams& ca) {
    const auto qw = mul(q, ca.w_q);
    std::vector<double> scores;
    for (const auto& k : keys) {
      const auto kw = mul(k, ca.w_k);
      double dot = 0;
      for (int j = 0; j < d; ++j) dot += qw[static_cast<std::size_t>(j)] * kw[static_cast<std::size_t>(j)];
      scores.push_back(dot / std::sqrt(static_cast<double>(d)));
    }
    const double mx = *std::max_element(scores.begin(), scores.end());
    double z = 0;
    for (double& s : scores) z += (s = std::exp(s - mx));
    std::vector<double> out = q;
    for (std::size_t r = 0; r < keys.size(); ++r) {
      const auto v = mul(keys[r], ca.w_v);
      for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += scores[r] / z * v[static_cast<std::size_t>(j)];
    }
    return out;
  };

  const auto kt = project(s.product->title_tokens, p.proj_text);
  const auto kv = project(s.creative->style_tokens, p.proj_image);
  const auto et = mean_rows(kt);
  const auto ev = mean_rows(kv);
  const auto eut = attend(eu, kt, p.ca1);
  const auto euc = attend(eut, kv, p.ca2);
  double y = p.head_bias[0] + p.head_bias[1] + p.head_bias[2];
  for (int j = 0; j < d; ++j)
    y += p.head_t[j] * et[static_cast<std::size_t>(j)] + p.head_v[j] * ev[static_cast<std::size_t>(j)] +
         p.head_uc[j] * euc[static_cast<std::size_t>(j)];
  return y;
}

}  // namespace

TEST(PrefNet, ZeroWeightsGiveZeroUserEmbedding) {
  const World w = build_world(gp_test::tiny_world_config(), 1);
  const auto p = zero_pref_params(small_config(w));
  EXPECT_EQ(encode_user(w.users[0].attributes, p), Vec::Zero(p.dim()));
}

TEST(PrefNet, IdenticalAttributesIdenticalEmbedding) {
  const World w = build_world(gp_test::tiny_world_config(), 1);
  const auto p = random_params(small_config(w), 3);
  auto other = w.users[0].attributes;
  EXPECT_EQ(encode_user(w.users[0].attributes, p), encode_user(other, p));
}

TEST(PrefNet, OneAttributeIdentityMlpReturnsTableRow) {
  auto cfg = gp_test::tiny_world_config();
  cfg.n_attr = 1;
  cfg.cardinalities = {5};
  const World w = build_world(cfg, 1);
  PrefNetConfig c = small_config(w, 4);
  c.dim_dprime = 4;
  auto p = zero_pref_params(c);
  Rng rng(2);
  p.attr_tables[0] = random_mat(5, 4, rng, 0.3);
  // identity weights and zero biases leave only the tanh of the hidden layer
  p.mlp_w1 = Mat::Identity(4, 4);
  p.mlp_w2 = Mat::Identity(4, 4);
  const int code = w.users[0].attributes[0];
  const Vec row = p.attr_tables[0].row(code).transpose();
  EXPECT_TRUE(encode_user(w.users[0].attributes, p).isApprox(row.array().tanh().matrix(), 1e-14));
}

TEST(PrefNet, SingleKeyAttentionIsResidualPlusValue) {
  Rng rng(4);
  CrossAttentionParams ca{random_mat(3, 3, rng), random_mat(3, 3, rng), random_mat(3, 3, rng)};
  const Vec q = random_vec(3, rng);
  const Mat k = random_mat(1, 3, rng);
  const auto r = cross_attention(q, k, ca);
  EXPECT_DOUBLE_EQ(r.weights[0], 1.0);
  EXPECT_TRUE(r.output.isApprox(q + (k * ca.w_v).transpose(), 1e-14));

  ca.w_v.setZero();
  EXPECT_EQ(cross_attention(q, random_mat(4, 3, rng), ca).output, q);
}

TEST(PrefNet, AttentionMatchesHandEvaluation) {
  // d = 2, m = 3, identity projections: scores = K q / sqrt(2)
  CrossAttentionParams ca{Mat::Identity(2, 2), Mat::Identity(2, 2), Mat::Identity(2, 2)};
  Vec q(2);
  q << 1.0, 0.0;
  Mat k(3, 2);
  k << 1.0, 0.0, 0.0, 1.0, -1.0, 0.0;
  const double s = 1.0 / std::sqrt(2.0);
  const double z = std::exp(s) + 1.0 + std::exp(-s);
  const double w0 = std::exp(s) / z, w1 = 1.0 / z, w2 = std::exp(-s) / z;
  const auto r = cross_attention(q, k, ca);
  EXPECT_NEAR(r.weights[0], w0, 1e-15);
  EXPECT_NEAR(r.weights[1], w1, 1e-15);
  EXPECT_NEAR(r.weights[2], w2, 1e-15);
  EXPECT_NEAR(r.output[0], 1.0 + w0 - w2, 1e-15);
  EXPECT_NEAR(r.output[1], w1, 1e-15);
}

TEST(PrefNet, ZeroModelPredictsHalf) {
  const World w = build_world(gp_test::tiny_world_config(), 1);
  const auto p = zero_pref_params(small_config(w));
  const PrefSample s{&w.users[0], &w.products[0], w.creatives_of(0)[0], 1};
  const auto t = forward(s, p);
  EXPECT_EQ(t.y_hat, 0.0);
  EXPECT_EQ(sigmoid(t.y_hat), 0.5);
  const PrefSample one[] = {s};
  EXPECT_NEAR(loss_and_grad(one, p).loss, std::log(2.0), 1e-15);
}

TEST(PrefNet, TitleOnlyHeadsDependOnTitleBranch) {
  const World w = build_world(gp_test::tiny_world_config(), 2);
  auto p = random_params(small_config(w), 5);
  p.head_v.setZero();
  p.head_uc.setZero();
  const Product& prod = w.products[0];
  const auto cr = w.creatives_of(prod.product_id);
  const double a = forward({&w.users[0], &prod, cr[0], 0}, p).y_hat;
  const double b = forward({&w.users[5], &prod, cr[1], 0}, p).y_hat;
  EXPECT_NEAR(a, b, 1e-14);
  EXPECT_NEAR(a, forward({&w.users[0], &prod, cr[0], 0}, p).e_t.dot(p.head_t) + p.head_bias.sum(), 1e-14);
}

TEST(PrefNet, ForwardMatchesStraightLineReference) {
  const World w = build_world(gp_test::tiny_world_config(), 3);
  const auto p = random_params(small_config(w), 7);
  const auto samples = all_samples(w, 1);
  for (std::size_t i = 0; i < samples.size(); i += 17)
    EXPECT_NEAR(forward(samples[i], p).y_hat, reference_logit(samples[i], p), 1e-11);
}

TEST(PrefNet, GradientMatchesFiniteDifferences) {
  const World w = build_world(gp_test::tiny_world_config(), 4);
  const auto p = random_params(small_config(w, 8), 9);
  auto samples = all_samples(w, 2);
  samples.resize(40);
  const auto lg = loss_and_grad(samples, p);
  const auto rep = gp_test::finite_difference_check<PrefModelParams>(
      p, lg.grad, [&](const PrefModelParams& q) { return loss_and_grad(samples, q).loss; }, 400, 3);
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
}

TEST(PrefNet, DuplicatingTheBatchChangesNothing) {
  const World w = build_world(gp_test::tiny_world_config(), 4);
  const auto p = random_params(small_config(w), 9);
  auto samples = all_samples(w, 2);
  samples.resize(30);
  auto doubled = samples;
  doubled.insert(doubled.end(), samples.begin(), samples.end());
  const auto a = loss_and_grad(samples, p);
  const auto b = loss_and_grad(doubled, p);
  EXPECT_NEAR(a.loss, b.loss, 1e-13);
  EXPECT_LT((flatten(a.grad) - flatten(b.grad)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(PrefNet, ZeroLearningRateAndDeterminism) {
  const World w = build_world(gp_test::tiny_world_config(), 5);
  auto c = small_config(w);
  c.epochs = 2;
  const auto init = init_pref_params(c, 1);
  const auto samples = all_samples(w, 3);
  c.lr = 0.0;
  EXPECT_TRUE(params_equal(train(samples, c, init).params, init));
  c.lr = 0.1;
  c.seed = 77;
  EXPECT_TRUE(params_equal(train(samples, c, init).params, train(samples, c, init).params));
}

TEST(PrefNet, LearnsSeparableLogAndSeparatesSegments) {
  auto wc = gp_test::tiny_world_config();
  wc.n_users = 120;
  wc.n_products = 2;
  const World w = build_world(wc, 6);
  // Deterministic labels: click exactly when the oracle favours the creative.
  std::vector<PrefSample> train_set, test_set;
  for (const auto& u : w.users)
    for (const auto& cr : w.creatives) {
      const auto& prod = w.product(cr.product_id);
      const int label = oracle_click_prob(u, prod, cr, w.oracle) > 0.5 ? 1 : 0;
      (u.user_id % 5 == 0 ? test_set : train_set).push_back({&u, &prod, &cr, label});
    }
  PrefNetConfig c = PrefNetConfig::for_world(wc);
  c.dim_d = 16;
  c.dim_dprime = 4;
  c.lr = 0.1;
  c.epochs = 30;
  c.batch_size = 32;
  c.seed = 5;
  const auto res = train(train_set, c, init_pref_params(c, 8));
  const auto logits = predict_logits(test_set, res.params);
  std::vector<int> labels;
  for (const auto& s : test_set) labels.push_back(s.label);
  EXPECT_GE(auroc(logits, labels), 0.95);

  // Best 2-partition (by squared error) of 16 users' embeddings for product 0,
  // found by enumeration, against the planted segments.
  const Product& prod = w.products[0];
  std::vector<UserProfile> pick;
  std::vector<int> seg;
  for (int want = 0; want < 2; ++want)
    for (const auto& u : w.users)
      if (w.oracle.segment(u, prod.category) == want && static_cast<int>(pick.size()) < 8 * (want + 1)) {
        pick.push_back(u);
        seg.push_back(want);
      }
  ASSERT_EQ(pick.size(), 16u);
  const Mat e = extract_user_product_embeddings(pick, prod, res.params);
  double best = std::numeric_limits<double>::infinity();
  unsigned best_mask = 0;
  for (unsigned mask = 1; mask < (1u << 15); ++mask) {  // user 15 fixed in part 0
    double cost = 0;
    for (int part = 0; part < 2; ++part) {
      Vec mean = Vec::Zero(e.cols());
      int n = 0;
      for (int i = 0; i < 16; ++i)
        if (((mask >> i) & 1u) == static_cast<unsigned>(part)) mean += e.row(i).transpose(), ++n;
      if (n == 0) continue;
      mean /= n;
      for (int i = 0; i < 16; ++i)
        if (((mask >> i) & 1u) == static_cast<unsigned>(part)) cost += (e.row(i).transpose() - mean).squaredNorm();
    }
    if (cost < best) best = cost, best_mask = mask;
  }
  int agree = 0;
  for (int i = 0; i < 16; ++i) agree += static_cast<int>((best_mask >> i) & 1u) == seg[static_cast<std::size_t>(i)];
  const int purity = std::max(agree, 16 - agree);
  EXPECT_GE(purity / 16.0, 0.95);
}

TEST(PrefNet, ArchiveRoundTrip) {
  const World w = build_world(gp_test::tiny_world_config(), 1);
  const auto c = small_config(w);
  const auto p = random_params(c, 2);
  const auto back = pref_params_from_archive(archive_from_json(archive_to_json(pref_params_to_archive(p, c))));
  EXPECT_TRUE(params_equal(p, back));
}
