#include "grouppref/simworld.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "grouppref/archive.hpp"

namespace grouppref {

std::string to_string(PreferenceMode mode) {
  switch (mode) {
    case PreferenceMode::kConflict:
      return "conflict";
    case PreferenceMode::kReversed:
      return "reversed";
    case PreferenceMode::kHomogeneous:
      return "homogeneous";
  }
  return "conflict";
}

PreferenceMode preference_mode_from_string(const std::string& s) {
  if (s == "conflict") return PreferenceMode::kConflict;
  if (s == "reversed") return PreferenceMode::kReversed;
  if (s == "homogeneous") return PreferenceMode::kHomogeneous;
  throw ConfigError("unknown preference mode '" + s + "'");
}

std::vector<int> WorldConfig::resolved_cardinalities() const {
  if (!cardinalities.empty()) return cardinalities;
  std::vector<int> out;
  for (int a = 0; a < n_attr; ++a) out.push_back(4 + (3 * a) % 10);
  return out;
}

void WorldConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("world.") + name + " must be positive");
  };
  positive(n_users, "n_users");
  positive(n_products, "n_products");
  positive(n_categories, "n_categories");
  positive(creatives_per_product, "creatives_per_product");
  positive(n_attr, "n_attr");
  positive(d_raw, "d_raw");
  positive(m_t, "m_t");
  positive(m_v, "m_v");
  positive(n_segments, "n_segments");
  if (n_styles < 2) throw ConfigError("world.n_styles must be at least 2");
  if (!cardinalities.empty() && static_cast<int>(cardinalities.size()) != n_attr)
    throw ConfigError("world.cardinalities must list one value per attribute");
  for (int c : resolved_cardinalities())
    if (c <= 0) throw ConfigError("world.cardinalities must be positive");
  if (!(token_noise >= 0.0) || !(title_noise >= 0.0))
    throw ConfigError("world noise levels must be non-negative");
  if (!std::isfinite(base_logit) || !std::isfinite(affinity_scale) || affinity_scale <= 0.0)
    throw ConfigError("world.base_logit and world.affinity_scale must be finite, scale > 0");
}

int OracleParams::segment(const UserProfile& user, int category) const {
  if (category < 0 || category >= n_categories())
    throw LookupError("unknown product category " + std::to_string(category));
  const auto& rule = segment_rules[static_cast<std::size_t>(category)];
  if (rule.key_attribute >= static_cast<int>(user.attributes.size()))
    throw LookupError("user lacks key attribute " + std::to_string(rule.key_attribute));
  const int code = user.attributes[static_cast<std::size_t>(rule.key_attribute)];
  if (code < 0 || code >= static_cast<int>(rule.segment_of_code.size()))
    throw LookupError("attribute code out of range");
  return rule.segment_of_code[static_cast<std::size_t>(code)];
}

double OracleParams::affinity_at(int category, int segment, int style) const {
  return affinity[static_cast<std::size_t>((category * n_segments + segment) * n_styles + style)];
}

double& OracleParams::affinity_at(int category, int segment, int style) {
  return affinity[static_cast<std::size_t>((category * n_segments + segment) * n_styles + style)];
}

const UserProfile& World::user(int id) const {
  if (id < 0 || id >= static_cast<int>(users.size())) throw LookupError("unknown user id");
  return users[static_cast<std::size_t>(id)];
}

const Product& World::product(int id) const {
  if (id < 0 || id >= static_cast<int>(products.size())) throw LookupError("unknown product id");
  return products[static_cast<std::size_t>(id)];
}

const Creative& World::creative(int id) const {
  if (id < 0 || id >= static_cast<int>(creatives.size()))
    throw LookupError("unknown creative id");
  return creatives[static_cast<std::size_t>(id)];
}

std::vector<const Creative*> World::creatives_of(int product_id) const {
  std::vector<const Creative*> out;
  for (const auto& c : creatives)
    if (c.product_id == product_id) out.push_back(&c);
  return out;
}

namespace {

// Signed levels for the styles on which segments disagree: large positive
// magnitudes first, mirrored negatives after, with a gap around zero.
std::vector<double> conflict_levels(int n, double scale) {
  const int half = (n + 1) / 2;
  const double step = std::min(2.0, (scale - 1.0) / std::max(1, half - 1));
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int from_edge = std::min(i, n - 1 - i);
    const double mag = scale - step * from_edge;
    out[static_cast<std::size_t>(i)] = (2 * i < n - 1) ? mag : (2 * i == n - 1 ? 0.0 : -mag);
  }
  return out;
}

std::vector<int> shuffled_range(int n, Rng& rng) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

OracleParams build_oracle(const WorldConfig& cfg, const std::vector<int>& cards, Rng& rng) {
  OracleParams o;
  o.n_segments = cfg.n_segments;
  o.n_styles = cfg.n_styles;
  o.base_logit = cfg.base_logit;
  o.affinity.assign(
      static_cast<std::size_t>(cfg.n_categories * cfg.n_segments * cfg.n_styles), 0.0);

  const auto key_order = shuffled_range(cfg.n_attr, rng);
  for (int c = 0; c < cfg.n_categories; ++c) {
    SegmentRule rule;
    rule.key_attribute = key_order[static_cast<std::size_t>(c % cfg.n_attr)];
    const int card = cards[static_cast<std::size_t>(rule.key_attribute)];
    rule.segment_of_code.assign(static_cast<std::size_t>(card), 0);
    const auto codes = shuffled_range(card, rng);
    for (int i = 0; i < card; ++i)
      rule.segment_of_code[static_cast<std::size_t>(codes[static_cast<std::size_t>(i)])] =
          i % cfg.n_segments;
    o.segment_rules.push_back(std::move(rule));
  }

  const int S = cfg.n_styles;
  const double A = cfg.affinity_scale;
  for (int c = 0; c < cfg.n_categories; ++c) {
    const auto perm = shuffled_range(S, rng);
    if (cfg.mode == PreferenceMode::kReversed) {
      const auto lv = conflict_levels(S, A);
      for (int g = 0; g < cfg.n_segments; ++g)
        for (int i = 0; i < S; ++i)
          o.affinity_at(c, g, perm[static_cast<std::size_t>(i)]) =
              (g % 2 == 0 ? 1.0 : -1.0) * lv[static_cast<std::size_t>(i)];
      continue;
    }
    const int n_bad = S / 3;
    const int n_conf = S - n_bad;
    const auto lv = conflict_levels(n_conf, A);
    for (int g = 0; g < cfg.n_segments; ++g) {
      std::vector<int> order(static_cast<std::size_t>(n_conf));
      std::iota(order.begin(), order.end(), 0);
      if (cfg.mode == PreferenceMode::kConflict) {
        if (g == 1) std::reverse(order.begin(), order.end());
        if (g >= 2) std::shuffle(order.begin(), order.end(), rng);
      }
      for (int i = 0; i < n_conf; ++i)
        o.affinity_at(c, g, perm[static_cast<std::size_t>(i)]) =
            lv[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      for (int j = 0; j < n_bad; ++j)
        o.affinity_at(c, g, perm[static_cast<std::size_t>(n_conf + j)]) = -(A - 1.0) - 2.0 * j;
    }
  }
  return o;
}

}  // namespace

World build_world(const WorldConfig& config, std::uint64_t seed) {
  config.validate();
  World w;
  w.config = config;
  w.seed = seed;
  const auto cards = config.resolved_cardinalities();

  Rng oracle_rng(derive_seed(seed, "oracle"));
  w.oracle = build_oracle(config, cards, oracle_rng);

  Rng proto_rng(derive_seed(seed, "prototypes"));
  const Mat aspects = random_normal(config.m_v, config.d_raw, 1.0, proto_rng);
  for (int s = 0; s < config.n_styles; ++s)
    w.style_prototypes.push_back(aspects + random_normal(config.m_v, config.d_raw, 1.0, proto_rng));
  std::vector<Mat> category_titles;
  for (int c = 0; c < config.n_categories; ++c)
    category_titles.push_back(random_normal(config.m_t, config.d_raw, 1.0, proto_rng));

  Rng user_rng(derive_seed(seed, "users"));
  for (int u = 0; u < config.n_users; ++u) {
    UserProfile up;
    up.user_id = u;
    for (int card : cards) {
      std::uniform_int_distribution<int> pick(0, card - 1);
      up.attributes.push_back(pick(user_rng));
    }
    w.users.push_back(std::move(up));
  }

  Rng item_rng(derive_seed(seed, "items"));
  int next_creative = 0;
  for (int p = 0; p < config.n_products; ++p) {
    Product prod;
    prod.product_id = p;
    prod.category = p % config.n_categories;
    prod.title_tokens = category_titles[static_cast<std::size_t>(prod.category)] +
                        random_normal(config.m_t, config.d_raw, config.title_noise, item_rng);
    const auto styles = shuffled_range(config.n_styles, item_rng);
    for (int k = 0; k < config.creatives_per_product; ++k) {
      Creative cr;
      cr.creative_id = next_creative++;
      cr.product_id = p;
      cr.latent_style = styles[static_cast<std::size_t>(k % config.n_styles)];
      cr.style_tokens = w.style_prototypes[static_cast<std::size_t>(cr.latent_style)] +
                        random_normal(config.m_v, config.d_raw, config.token_noise, item_rng);
      w.creatives.push_back(std::move(cr));
    }
    w.products.push_back(std::move(prod));
  }
  return w;
}

double oracle_click_prob(const UserProfile& user, int category, int style,
                         const OracleParams& oracle) {
  if (style < 0 || style >= oracle.n_styles) throw LookupError("unknown style");
  const int seg = oracle.segment(user, category);
  return sigmoid(oracle.base_logit + oracle.affinity_at(category, seg, style));
}

double oracle_click_prob(const UserProfile& user, const Product& product,
                         const Creative& creative, const OracleParams& oracle) {
  return oracle_click_prob(user, product.category, creative.latent_style, oracle);
}

std::vector<ClickEvent> sample_click_log(const World& world, int exposures_per_pair,
                                         std::uint64_t seed) {
  if (exposures_per_pair < 1) throw PreconditionError("exposures_per_pair must be >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ClickEvent> log;
  log.reserve(world.users.size() * world.creatives.size() *
              static_cast<std::size_t>(exposures_per_pair));
  for (const auto& u : world.users) {
    for (const auto& c : world.creatives) {
      const auto& p = world.product(c.product_id);
      const double prob = oracle_click_prob(u, p, c, world.oracle);
      for (int e = 0; e < exposures_per_pair; ++e)
        log.push_back({u.user_id, c.product_id, c.creative_id, unif(rng) < prob ? 1 : 0});
    }
  }
  return log;
}

std::vector<GaipRecord> export_gaip(const World& world, const std::vector<ClickEvent>& log,
                                    const std::vector<GroupRepresentation>& groups,
                                    int min_exposure) {
  // (product, user) -> position in `groups`
  std::map<std::pair<int, int>, std::size_t> membership;
  for (std::size_t gi = 0; gi < groups.size(); ++gi)
    for (int uid : groups[gi].member_ids) membership[{groups[gi].product_id, uid}] = gi;

  // (group position, creative) -> (clicks, exposures)
  std::map<std::pair<std::size_t, int>, std::pair<int, int>> counts;
  for (const auto& ev : log) {
    auto it = membership.find({ev.product_id, ev.user_id});
    if (it == membership.end()) continue;
    auto& c = counts[{it->second, ev.creative_id}];
    c.first += ev.clicked;
    c.second += 1;
  }

  std::vector<GaipRecord> out;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    if (g.member_ids.empty()) {
      spdlog::warn("group {} of product {} has no members; skipped", g.group_index, g.product_id);
      continue;
    }
    const Vec flat = g.flattened();
    for (const Creative* c : world.creatives_of(g.product_id)) {
      auto it = counts.find({gi, c->creative_id});
      if (it == counts.end()) continue;
      const auto [clicks, exposures] = it->second;
      if (exposures < min_exposure) continue;
      GaipRecord r;
      r.creative_id = c->creative_id;
      r.title_ref = g.product_id;
      r.product_id = g.product_id;
      r.group_index = g.group_index;
      r.group_embedding.assign(flat.data(), flat.data() + flat.size());
      r.clicks = clicks;
      r.exposures = exposures;
      r.ctr = static_cast<double>(clicks) / static_cast<double>(exposures);
      out.push_back(std::move(r));
    }
  }
  return out;
}

int nearest_style(const World& world, const Mat& style_tokens) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < world.style_prototypes.size(); ++s) {
    const double d = (world.style_prototypes[s] - style_tokens).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(s);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json matrix_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

Mat matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty()) return Mat(0, 0);
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw InputError("ragged matrix in JSON input");
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"n_users", c.n_users},
       {"n_products", c.n_products},
       {"n_categories", c.n_categories},
       {"creatives_per_product", c.creatives_per_product},
       {"n_styles", c.n_styles},
       {"n_attr", c.n_attr},
       {"cardinalities", c.resolved_cardinalities()},
       {"d_raw", c.d_raw},
       {"m_t", c.m_t},
       {"m_v", c.m_v},
       {"n_segments", c.n_segments},
       {"token_noise", c.token_noise},
       {"title_noise", c.title_noise},
       {"base_logit", c.base_logit},
       {"affinity_scale", c.affinity_scale},
       {"preference_mode", to_string(c.mode)}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  j.at("n_users").get_to(c.n_users);
  j.at("n_products").get_to(c.n_products);
  j.at("n_categories").get_to(c.n_categories);
  j.at("creatives_per_product").get_to(c.creatives_per_product);
  j.at("n_styles").get_to(c.n_styles);
  j.at("n_attr").get_to(c.n_attr);
  j.at("cardinalities").get_to(c.cardinalities);
  j.at("d_raw").get_to(c.d_raw);
  j.at("m_t").get_to(c.m_t);
  j.at("m_v").get_to(c.m_v);
  j.at("n_segments").get_to(c.n_segments);
  j.at("token_noise").get_to(c.token_noise);
  j.at("title_noise").get_to(c.title_noise);
  j.at("base_logit").get_to(c.base_logit);
  j.at("affinity_scale").get_to(c.affinity_scale);
  c.mode = preference_mode_from_string(j.at("preference_mode").get<std::string>());
}

void to_json(nlohmann::json& j, const UserProfile& u) {
  j = {{"user_id", u.user_id}, {"attributes", u.attributes}};
}
void from_json(const nlohmann::json& j, UserProfile& u) {
  j.at("user_id").get_to(u.user_id);
  j.at("attributes").get_to(u.attributes);
}

void to_json(nlohmann::json& j, const Product& p) {
  j = {{"product_id", p.product_id},
       {"category", p.category},
       {"title_tokens", matrix_to_json(p.title_tokens)}};
}
void from_json(const nlohmann::json& j, Product& p) {
  j.at("product_id").get_to(p.product_id);
  j.at("category").get_to(p.category);
  p.title_tokens = matrix_from_json(j.at("title_tokens"));
}

void to_json(nlohmann::json& j, const Creative& c) {
  j = {{"creative_id", c.creative_id},
       {"product_id", c.product_id},
       {"style_tokens", matrix_to_json(c.style_tokens)},
       {"latent_style", c.latent_style}};
}
void from_json(const nlohmann::json& j, Creative& c) {
  j.at("creative_id").get_to(c.creative_id);
  j.at("product_id").get_to(c.product_id);
  c.style_tokens = matrix_from_json(j.at("style_tokens"));
  j.at("latent_style").get_to(c.latent_style);
}

void to_json(nlohmann::json& j, const OracleParams& o) {
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& r : o.segment_rules)
    rules.push_back({{"key_attribute", r.key_attribute}, {"segment_of_code", r.segment_of_code}});
  j = {{"segment_rule", rules},
       {"n_segments", o.n_segments},
       {"n_styles", o.n_styles},
       {"affinity", o.affinity},
       {"base_logit", o.base_logit}};
}
void from_json(const nlohmann::json& j, OracleParams& o) {
  o.segment_rules.clear();
  for (const auto& r : j.at("segment_rule")) {
    SegmentRule rule;
    r.at("key_attribute").get_to(rule.key_attribute);
    r.at("segment_of_code").get_to(rule.segment_of_code);
    o.segment_rules.push_back(std::move(rule));
  }
  j.at("n_segments").get_to(o.n_segments);
  j.at("n_styles").get_to(o.n_styles);
  j.at("affinity").get_to(o.affinity);
  j.at("base_logit").get_to(o.base_logit);
  if (o.affinity.size() !=
      static_cast<std::size_t>(o.n_categories() * o.n_segments * o.n_styles))
    throw InputError("oracle affinity tensor has the wrong size");
}

void to_json(nlohmann::json& j, const ClickEvent& e) {
  j = {{"user_id", e.user_id},
       {"product_id", e.product_id},
       {"creative_id", e.creative_id},
       {"clicked", e.clicked}};
}
void from_json(const nlohmann::json& j, ClickEvent& e) {
  j.at("user_id").get_to(e.user_id);
  j.at("product_id").get_to(e.product_id);
  j.at("creative_id").get_to(e.creative_id);
  j.at("clicked").get_to(e.clicked);
}

void to_json(nlohmann::json& j, const GaipRecord& r) {
  j = {{"creative_id", r.creative_id},
       {"title_ref", r.title_ref},
       {"group_key", {r.product_id, r.group_index}},
       {"group_embedding", r.group_embedding},
       {"ctr", r.ctr},
       {"clicks", r.clicks},
       {"exposures", r.exposures}};
}
void from_json(const nlohmann::json& j, GaipRecord& r) {
  j.at("creative_id").get_to(r.creative_id);
  j.at("title_ref").get_to(r.title_ref);
  const auto key = j.at("group_key").get<std::vector<int>>();
  if (key.size() != 2) throw InputError("group_key must be [product_id, group_index]");
  r.product_id = key[0];
  r.group_index = key[1];
  j.at("group_embedding").get_to(r.group_embedding);
  j.at("ctr").get_to(r.ctr);
  j.at("clicks").get_to(r.clicks);
  j.at("exposures").get_to(r.exposures);
}

void to_json(nlohmann::json& j, const GroupRepresentation& g) {
  nlohmann::json peri = nlohmann::json::array();
  for (const auto& p : g.peripherals) peri.push_back(std::vector<double>(p.data(), p.data() + p.size()));
  j = {{"product_id", g.product_id},
       {"group_index", g.group_index},
       {"centroid", std::vector<double>(g.centroid.data(), g.centroid.data() + g.centroid.size())},
       {"peripherals", peri},
       {"member_ids", g.member_ids},
       {"degenerate", g.degenerate}};
}

void from_json(const nlohmann::json& j, GroupRepresentation& g) {
  auto to_vec = [](const std::vector<double>& v) {
    return Vec(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  j.at("product_id").get_to(g.product_id);
  j.at("group_index").get_to(g.group_index);
  g.centroid = to_vec(j.at("centroid").get<std::vector<double>>());
  g.peripherals.clear();
  for (const auto& p : j.at("peripherals")) g.peripherals.push_back(to_vec(p.get<std::vector<double>>()));
  j.at("member_ids").get_to(g.member_ids);
  j.at("degenerate").get_to(g.degenerate);
}

Vec GroupRepresentation::flattened() const {
  const Eigen::Index d = centroid.size();
  Vec out(d * static_cast<Eigen::Index>(size()));
  out.head(d) = centroid;
  for (std::size_t j = 0; j < peripherals.size(); ++j)
    out.segment(d * static_cast<Eigen::Index>(j + 1), d) = peripherals[j];
  return out;
}

void save_world(const World& world, const std::filesystem::path& dir) {
  nlohmann::json meta;
  meta["config"] = world.config;
  meta["seed"] = world.seed;
  meta["oracle"] = world.oracle;
  nlohmann::json protos = nlohmann::json::array();
  for (const auto& p : world.style_prototypes) protos.push_back(matrix_to_json(p));
  meta["style_prototypes"] = protos;
  write_text_atomic(dir / "world.json", meta.dump() + "\n");
  write_text_atomic(dir / "users.jsonl", to_jsonl(world.users));
  write_text_atomic(dir / "products.jsonl", to_jsonl(world.products));
  write_text_atomic(dir / "creatives.jsonl", to_jsonl(world.creatives));
}

World load_world(const std::filesystem::path& dir) {
  World w;
  const auto meta = nlohmann::json::parse(read_text(dir / "world.json"));
  w.config = meta.at("config").get<WorldConfig>();
  w.seed = meta.at("seed").get<std::uint64_t>();
  w.oracle = meta.at("oracle").get<OracleParams>();
  for (const auto& p : meta.at("style_prototypes")) w.style_prototypes.push_back(matrix_from_json(p));
  w.users = from_jsonl<UserProfile>(read_text(dir / "users.jsonl"));
  w.products = from_jsonl<Product>(read_text(dir / "products.jsonl"));
  w.creatives = from_jsonl<Creative>(read_text(dir / "creatives.jsonl"));
  for (std::size_t i = 0; i < w.users.size(); ++i)
    if (w.users[i].user_id != static_cast<int>(i)) throw InputError("users.jsonl ids must be dense");
  for (std::size_t i = 0; i < w.products.size(); ++i)
    if (w.products[i].product_id != static_cast<int>(i))
      throw InputError("products.jsonl ids must be dense");
  for (std::size_t i = 0; i < w.creatives.size(); ++i)
    if (w.creatives[i].creative_id != static_cast<int>(i))
      throw InputError("creatives.jsonl ids must be dense");
  return w;
}

}  // namespace grouppref
