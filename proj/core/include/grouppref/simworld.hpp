#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppref/common.hpp"
#include "grouppref/group_types.hpp"

namespace grouppref {

/// How the planted segment preferences relate to each other.
///  - conflict: a third of the styles are disliked by every segment; the
///    remaining styles are ranked in opposite orders by segments 0 and 1.
///  - reversed: segment 1's affinity row is the exact negation of segment 0's.
///  - homogeneous: every segment shares segment 0's conflict-mode row.
enum class PreferenceMode { kConflict, kReversed, kHomogeneous };

std::string to_string(PreferenceMode mode);
PreferenceMode preference_mode_from_string(const std::string& s);

struct WorldConfig {
  int n_users = 300;
  int n_products = 12;
  int n_categories = 2;
  int creatives_per_product = 6;
  int n_styles = 6;
  int n_attr = 8;
  std::vector<int> cardinalities;  // empty: 4..13 pattern, one per attribute
  int d_raw = 32;
  int m_t = 4;
  int m_v = 4;
  int n_segments = 2;
  double token_noise = 0.1;
  double title_noise = 0.3;
  double base_logit = 0.0;
  double affinity_scale = 5.0;
  PreferenceMode mode = PreferenceMode::kConflict;

  void validate() const;
  std::vector<int> resolved_cardinalities() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct UserProfile {
  int user_id = 0;
  std::vector<int> attributes;
};

struct Product {
  int product_id = 0;
  int category = 0;
  Mat title_tokens;  // m_t × d_raw
};

struct Creative {
  int creative_id = 0;
  int product_id = 0;
  Mat style_tokens;  // m_v × d_raw
  int latent_style = 0;
};

/// Per-category rule: the segment of a user is a lookup on one key attribute.
struct SegmentRule {
  int key_attribute = 0;
  std::vector<int> segment_of_code;
};

struct OracleParams {
  std::vector<SegmentRule> segment_rules;  // one per category
  int n_segments = 0;
  int n_styles = 0;
  std::vector<double> affinity;  // [category][segment][style], row-major
  double base_logit = 0.0;

  int n_categories() const { return static_cast<int>(segment_rules.size()); }
  int segment(const UserProfile& user, int category) const;
  double affinity_at(int category, int segment, int style) const;
  double& affinity_at(int category, int segment, int style);
};

struct ClickEvent {
  int user_id = 0;
  int product_id = 0;
  int creative_id = 0;
  int clicked = 0;
};

/// (creative, title, group embedding, group-level CTR) with exposure counts.
struct GaipRecord {
  int creative_id = 0;
  int title_ref = 0;
  int product_id = 0;
  int group_index = 0;
  std::vector<double> group_embedding;
  double ctr = 0.0;
  int clicks = 0;
  int exposures = 0;
};

struct World {
  WorldConfig config;
  std::uint64_t seed = 0;
  std::vector<UserProfile> users;
  std::vector<Product> products;
  std::vector<Creative> creatives;
  OracleParams oracle;
  std::vector<Mat> style_prototypes;  // n_styles × (m_v × d_raw)

  const UserProfile& user(int id) const;
  const Product& product(int id) const;
  const Creative& creative(int id) const;
  std::vector<const Creative*> creatives_of(int product_id) const;
};

World build_world(const WorldConfig& config, std::uint64_t seed);

/// sigmoid(base_logit + affinity[category][segment(user)][latent_style]).
double oracle_click_prob(const UserProfile& user, const Product& product,
                         const Creative& creative, const OracleParams& oracle);
double oracle_click_prob(const UserProfile& user, int category, int style,
                         const OracleParams& oracle);

std::vector<ClickEvent> sample_click_log(const World& world, int exposures_per_pair,
                                         std::uint64_t seed);

/// One record per (creative, group) with at least `min_exposure` exposures.
std::vector<GaipRecord> export_gaip(const World& world, const std::vector<ClickEvent>& log,
                                    const std::vector<GroupRepresentation>& groups,
                                    int min_exposure = 50);

/// Index of the style prototype nearest (Frobenius) to a token matrix.
int nearest_style(const World& world, const Mat& style_tokens);

void to_json(nlohmann::json& j, const UserProfile& u);
void from_json(const nlohmann::json& j, UserProfile& u);
void to_json(nlohmann::json& j, const Product& p);
void from_json(const nlohmann::json& j, Product& p);
void to_json(nlohmann::json& j, const Creative& c);
void from_json(const nlohmann::json& j, Creative& c);
void to_json(nlohmann::json& j, const OracleParams& o);
void from_json(const nlohmann::json& j, OracleParams& o);
void to_json(nlohmann::json& j, const ClickEvent& e);
void from_json(const nlohmann::json& j, ClickEvent& e);
void to_json(nlohmann::json& j, const GaipRecord& r);
void from_json(const nlohmann::json& j, GaipRecord& r);

nlohmann::json matrix_to_json(const Mat& m);
Mat matrix_from_json(const nlohmann::json& j);

/// One JSON document per line, in input order.
template <class T>
std::string to_jsonl(const std::vector<T>& items) {
  std::string out;
  for (const auto& it : items) {
    out += nlohmann::json(it).dump();
    out += '\n';
  }
  return out;
}

template <class T>
std::vector<T> from_jsonl(const std::string& text) {
  std::vector<T> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    if (nl > pos) out.push_back(nlohmann::json::parse(text.substr(pos, nl - pos)).get<T>());
    pos = nl + 1;
  }
  return out;
}

/// Writes users/products/creatives jsonl files plus world.json (config, seed,
/// oracle, style prototypes). The click log is written separately.
void save_world(const World& world, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& dir);

}  // namespace grouppref
