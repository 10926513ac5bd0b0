#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppref/aligner.hpp"
#include "grouppref/grm.hpp"
#include "grouppref/group_types.hpp"
#include "grouppref/simworld.hpp"

namespace grouppref {

struct NdcgResult {
  double value = 1.0;
  bool degenerate = false;  // every relevance was zero
};

/// NDCG@k with linear gains. `prediction_order` lists creative ids best first;
/// ids missing from `relevances` are skipped, and the ideal order is taken over
/// the shared ids.
NdcgResult ndcg_at_k(std::span<const int> prediction_order,
                     const std::map<int, double>& relevances, int k = 5);
double ndcg_at_5(std::span<const int> prediction_order, const std::map<int, double>& relevances);

/// Ids sorted by descending score, ties by ascending id.
std::vector<int> order_by_score(const std::map<int, double>& scores);

/// (product, group index) -> creative -> CTR.
using CtrTable = std::map<std::pair<int, int>, std::map<int, double>>;

CtrTable ctr_table_from_gaip(const std::vector<GaipRecord>& gaip);

/// Mean NDCG@5 over ordered group pairs (ref, pred) of each product, then over
/// products. Products with fewer than two groups are left out. Throws if no
/// product qualifies.
double cross_group_ndcg(const CtrTable& table, int k = 5);

/// Rank-statistic AUROC with ties counted as half.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Fraction of pairs whose prediction > 0.5 agrees with the label; exactly 0.5
/// counts as wrong.
double pair_accuracy(std::span<const double> predictions, std::span<const PrefPairSample> pairs);
double pair_accuracy(const GrmParams& params, std::span<const PrefPairSample> pairs,
                     const World& world);

/// Size-weighted mean, over groups, of the members' oracle click probability
/// for the latent style of the group's rendered prompt.
double simulated_ctr(const World& world, const std::vector<GroupRepresentation>& groups,
                     const std::map<std::pair<int, int>, PromptSeq>& prompts,
                     const PromptRenderer& renderer);

struct EvalReport {
  double ndcg_at_5_mean = 0.0;
  double auroc = 0.0;
  double pair_accuracy = 0.0;
  std::map<std::string, double> ctr_by_policy;
  int n_products = 0;
  int n_pairs = 0;
  nlohmann::json ablations = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

}  // namespace grouppref
