#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "grouppref/common.hpp"

namespace grouppref {

/// Collective representation of one user group of one product: the centroid
/// followed by |J| peripheral member embeddings in percentile-pick order.
struct GroupRepresentation {
  int product_id = 0;
  int group_index = 0;
  Vec centroid;
  std::vector<Vec> peripherals;
  std::vector<int> member_ids;
  bool degenerate = false;

  std::size_t size() const { return 1 + peripherals.size(); }

  /// [centroid; p_1; ...; p_|J|] as one vector of length (1+|J|)·d.
  Vec flattened() const;
};

void to_json(nlohmann::json& j, const GroupRepresentation& g);
void from_json(const nlohmann::json& j, GroupRepresentation& g);

}  // namespace grouppref
