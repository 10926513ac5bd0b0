#include "grouppref/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

namespace grouppref {

namespace {

double dcg(const std::vector<double>& gains, int k) {
  double s = 0.0;
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), gains.size());
  for (std::size_t i = 0; i < n; ++i) s += gains[i] / std::log2(static_cast<double>(i) + 2.0);
  return s;
}

}  // namespace

NdcgResult ndcg_at_k(std::span<const int> prediction_order, const std::map<int, double>& relevances,
                     int k) {
  if (k < 1) throw PreconditionError("ndcg cutoff must be >= 1");
  std::vector<double> gains;
  std::set<int> seen;
  for (int id : prediction_order) {
    auto it = relevances.find(id);
    if (it == relevances.end() || !seen.insert(id).second) continue;
    gains.push_back(it->second);
  }
  if (gains.empty()) throw PreconditionError("ndcg needs at least one shared creative");
  std::vector<double> ideal = gains;
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  const double best = dcg(ideal, k);
  if (best == 0.0) return {1.0, true};
  return {dcg(gains, k) / best, false};
}

double ndcg_at_5(std::span<const int> prediction_order, const std::map<int, double>& relevances) {
  return ndcg_at_k(prediction_order, relevances, 5).value;
}

std::vector<int> order_by_score(const std::map<int, double>& scores) {
  std::vector<std::pair<int, double>> items(scores.begin(), scores.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<int> out;
  for (const auto& [id, s] : items) out.push_back(id);
  return out;
}

CtrTable ctr_table_from_gaip(const std::vector<GaipRecord>& gaip) {
  CtrTable t;
  for (const auto& r : gaip) t[{r.product_id, r.group_index}][r.creative_id] = r.ctr;
  return t;
}

double cross_group_ndcg(const CtrTable& table, int k) {
  std::map<int, std::vector<const std::map<int, double>*>> by_product;
  for (const auto& [key, ctrs] : table) by_product[key.first].push_back(&ctrs);
  double total = 0.0;
  int n_products = 0;
  for (const auto& [pid, groups] : by_product) {
    if (groups.size() < 2) continue;
    double sum = 0.0;
    int n = 0;
    for (std::size_t r = 0; r < groups.size(); ++r) {
      for (std::size_t p = 0; p < groups.size(); ++p) {
        if (r == p) continue;
        // shared candidate set of the two groups
        std::map<int, double> pred_scores, ref_rel;
        for (const auto& [cid, ctr] : *groups[p])
          if (groups[r]->count(cid)) {
            pred_scores[cid] = ctr;
            ref_rel[cid] = groups[r]->at(cid);
          }
        if (ref_rel.size() < 2) continue;
        const auto res = ndcg_at_k(order_by_score(pred_scores), ref_rel, k);
        if (res.degenerate) spdlog::debug("product {}: all-zero reference CTRs", pid);
        sum += res.value;
        ++n;
      }
    }
    if (n == 0) continue;
    total += sum / n;
    ++n_products;
  }
  if (n_products == 0) throw PreconditionError("cross_group_ndcg: no product has two comparable groups");
  return total / n_products;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw PreconditionError("auroc: scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + j) + 1.0) / 2.0;  // 1-based average rank
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum += mid_rank;
    i = j;
  }
  for (int l : labels) n_pos += l ? 1.0 : 0.0;
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw PreconditionError("auroc needs both positive and negative labels");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double pair_accuracy(std::span<const double> predictions, std::span<const PrefPairSample> pairs) {
  if (pairs.empty()) throw PreconditionError("pair_accuracy on an empty pair list");
  if (predictions.size() != pairs.size()) throw PreconditionError("one prediction per pair required");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double p = predictions[i];
    if ((p > 0.5 && pairs[i].label == 0) || (p < 0.5 && pairs[i].label == 1)) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

double pair_accuracy(const GrmParams& params, std::span<const PrefPairSample> pairs,
                     const World& world) {
  std::vector<double> preds;
  for (const auto& p : pairs) preds.push_back(grm_predict(p, world, params));
  return pair_accuracy(preds, pairs);
}

double simulated_ctr(const World& world, const std::vector<GroupRepresentation>& groups,
                     const std::map<std::pair<int, int>, PromptSeq>& prompts,
                     const PromptRenderer& renderer) {
  if (groups.empty()) throw PreconditionError("simulated_ctr needs at least one group");
  double weighted = 0.0;
  double total = 0.0;
  for (const auto& g : groups) {
    auto it = prompts.find({g.product_id, g.group_index});
    if (it == prompts.end())
      throw LookupError("no prompt for group " + std::to_string(g.group_index) + " of product " +
                        std::to_string(g.product_id));
    const int style = renderer.latent_style(it->second);
    const double ctr = group_oracle_ctr(world, g, world.product(g.product_id).category, style);
    weighted += ctr * static_cast<double>(g.member_ids.size());
    total += static_cast<double>(g.member_ids.size());
  }
  return weighted / total;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"ndcg_at_5_mean", r.ndcg_at_5_mean},
       {"auroc", r.auroc},
       {"pair_accuracy", r.pair_accuracy},
       {"ctr_by_policy", r.ctr_by_policy},
       {"n_products", r.n_products},
       {"n_pairs", r.n_pairs},
       {"ablations", r.ablations},
       {"config", r.config},
       {"seed", r.seed}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("ndcg_at_5_mean").get_to(r.ndcg_at_5_mean);
  j.at("auroc").get_to(r.auroc);
  j.at("pair_accuracy").get_to(r.pair_accuracy);
  j.at("ctr_by_policy").get_to(r.ctr_by_policy);
  j.at("n_products").get_to(r.n_products);
  j.at("n_pairs").get_to(r.n_pairs);
  r.ablations = j.at("ablations");
  r.config = j.at("config");
  j.at("seed").get_to(r.seed);
}

}  // namespace grouppref
