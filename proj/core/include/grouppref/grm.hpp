#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppref/archive.hpp"
#include "grouppref/common.hpp"
#include "grouppref/grouping.hpp"
#include "grouppref/simworld.hpp"

namespace grouppref {

struct GrmConfig {
  int hidden = 64;
  int d_g = 16;
  int encoder_hidden = 32;
  double lr = 0.01;
  int epochs = 300;
  std::uint64_t seed = 0;
  bool use_group = true;            // false: e_G is replaced by zeros
  std::string labels = "empirical";  // or "oracle"

  void validate() const;
};

void to_json(nlohmann::json& j, const GrmConfig& c);
void from_json(const nlohmann::json& j, GrmConfig& c);

/// Group encoder plus a per-creative scorer
///   score = w2 · tanh(W1 [e_G; pooled title; pooled creative] + b1).
struct GrmParams {
  GroupEncoderParams encoder;
  Mat w1;  // hidden × (d_g + 2·d_raw)
  Vec b1;
  Vec w2;
  bool use_group = true;

  int d_g() const { return encoder.output_dim(); }

  template <class F>
  void visit(F&& f) {
    encoder.visit(f);
    f("scorer.w1", w1);
    f("scorer.b1", b1);
    f("scorer.w2", w2);
  }
  template <class F>
  void visit(F&& f) const {
    encoder.visit(f);
    f("scorer.w1", w1);
    f("scorer.b1", b1);
    f("scorer.w2", w2);
  }
};

GrmParams init_grm_params(int group_input_dim, int d_raw, const GrmConfig& config,
                          std::uint64_t seed);

/// Labeled comparison of two creatives of one product for one group.
struct PrefPairSample {
  int product_id = 0;
  int group_index = 0;
  Vec group;  // flattened group representation
  int creative_a = 0;
  int creative_b = 0;
  int label = 0;  // 0: creative_a has the higher CTR, 1: creative_b
  double ctr_a = 0.0;
  double ctr_b = 0.0;
};

void to_json(nlohmann::json& j, const PrefPairSample& p);
void from_json(const nlohmann::json& j, PrefPairSample& p);

/// Mean of the token rows.
Vec pool_tokens(const Mat& tokens);

/// Group token used by the scorer (zeros when the model ignores the group).
Vec grm_group_token(const Vec& group_flat, const GrmParams& params);

double grm_score(const Vec& e_g, const Vec& title_pooled, const Vec& creative_pooled,
                 const GrmParams& params);

/// P(CTR_a > CTR_b | group) = sigmoid(score_a - score_b).
double grm_predict_features(const Vec& group_flat, const Mat& title_tokens, const Mat& tokens_a,
                            const Mat& tokens_b, const GrmParams& params);
double grm_predict(const PrefPairSample& pair, const World& world, const GrmParams& params);

struct GrmLossGrad {
  double loss = 0.0;
  GrmParams grad;
};

/// Mean cross-entropy of grm_predict against the labels, with its gradient.
GrmLossGrad grm_loss_and_grad(std::span<const PrefPairSample> pairs, const World& world,
                              const GrmParams& params);

struct GrmTrainResult {
  GrmParams params;
  std::vector<std::pair<int, double>> curve;
};

/// Full-batch Adam on the pair cross-entropy.
GrmTrainResult grm_train(std::span<const PrefPairSample> pairs, const World& world,
                         const GrmConfig& config, GrmParams params_init);

/// All unordered distinct-CTR creative pairs within each (product, group),
/// ordered by (product, group, creative_a, creative_b) with creative_a < creative_b.
std::vector<PrefPairSample> build_pairs(const std::vector<GaipRecord>& gaip, const World& world);

/// Same pairs with CTRs replaced by the mean oracle click probability over the
/// group's members; pairs whose oracle CTRs tie are dropped.
std::vector<PrefPairSample> relabel_with_oracle(std::span<const PrefPairSample> pairs,
                                                const World& world,
                                                const std::vector<GroupRepresentation>& groups);

/// Seeded shuffle then split; the second part holds round(fraction·n) pairs.
std::pair<std::vector<PrefPairSample>, std::vector<PrefPairSample>> split_pairs(
    std::vector<PrefPairSample> pairs, double holdout_fraction, std::uint64_t seed);

ModelArchive grm_to_archive(const GrmParams& params, const GrmConfig& config);
GrmParams grm_from_archive(const ModelArchive& archive);

}  // namespace grouppref
