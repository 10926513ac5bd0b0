#include "grouppref/grm.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "grouppref/optim.hpp"

namespace grouppref {

void GrmConfig::validate() const {
  if (hidden <= 0 || d_g <= 0 || encoder_hidden <= 0)
    throw ConfigError("grm dimensions must be positive");
  if (!(lr >= 0.0) || epochs < 0) throw ConfigError("grm lr/epochs out of range");
  if (labels != "empirical" && labels != "oracle")
    throw ConfigError("grm.labels must be 'empirical' or 'oracle', got '" + labels + "'");
}

void to_json(nlohmann::json& j, const GrmConfig& c) {
  j = {{"hidden", c.hidden}, {"d_g", c.d_g},         {"encoder_hidden", c.encoder_hidden},
       {"lr", c.lr},         {"epochs", c.epochs},   {"seed", c.seed},
       {"use_group", c.use_group}, {"labels", c.labels}};
}

void from_json(const nlohmann::json& j, GrmConfig& c) {
  j.at("hidden").get_to(c.hidden);
  j.at("d_g").get_to(c.d_g);
  j.at("encoder_hidden").get_to(c.encoder_hidden);
  j.at("lr").get_to(c.lr);
  j.at("epochs").get_to(c.epochs);
  j.at("seed").get_to(c.seed);
  j.at("use_group").get_to(c.use_group);
  j.at("labels").get_to(c.labels);
}

GrmParams init_grm_params(int group_input_dim, int d_raw, const GrmConfig& config,
                          std::uint64_t seed) {
  config.validate();
  GrmParams p;
  p.encoder = init_group_encoder(group_input_dim, config.encoder_hidden, config.d_g,
                                 derive_seed(seed, "grm-encoder"));
  Rng rng(derive_seed(seed, "grm-scorer"));
  const int in = config.d_g + 2 * d_raw;
  p.w1 = random_normal(config.hidden, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  p.b1 = Vec::Zero(config.hidden);
  p.w2 = random_normal(config.hidden, 1, 1.0 / std::sqrt(static_cast<double>(config.hidden)), rng);
  p.use_group = config.use_group;
  return p;
}

void to_json(nlohmann::json& j, const PrefPairSample& p) {
  j = {{"product_id", p.product_id},
       {"group_index", p.group_index},
       {"creative_a", p.creative_a},
       {"creative_b", p.creative_b},
       {"label", p.label == 0 ? "a" : "b"},
       {"ctr_a", p.ctr_a},
       {"ctr_b", p.ctr_b},
       {"group", std::vector<double>(p.group.data(), p.group.data() + p.group.size())}};
}

void from_json(const nlohmann::json& j, PrefPairSample& p) {
  j.at("product_id").get_to(p.product_id);
  j.at("group_index").get_to(p.group_index);
  j.at("creative_a").get_to(p.creative_a);
  j.at("creative_b").get_to(p.creative_b);
  p.label = j.at("label").get<std::string>() == "a" ? 0 : 1;
  j.at("ctr_a").get_to(p.ctr_a);
  j.at("ctr_b").get_to(p.ctr_b);
  const auto g = j.at("group").get<std::vector<double>>();
  p.group = Eigen::Map<const Vec>(g.data(), static_cast<Eigen::Index>(g.size()));
}

Vec pool_tokens(const Mat& tokens) { return tokens.colwise().mean().transpose(); }

Vec grm_group_token(const Vec& group_flat, const GrmParams& params) {
  if (!params.use_group) return Vec::Zero(params.d_g());
  return encode_group_flat(group_flat, params.encoder);
}

namespace {

Vec scorer_input(const Vec& e_g, const Vec& title, const Vec& creative) {
  Vec x(e_g.size() + title.size() + creative.size());
  x << e_g, title, creative;
  return x;
}

void check_scorer_input(const Vec& x, const GrmParams& p) {
  if (x.size() != p.w1.cols())
    throw ConfigError("grm scorer expects input of size " + std::to_string(p.w1.cols()) +
                      ", got " + std::to_string(x.size()));
}

}  // namespace

double grm_score(const Vec& e_g, const Vec& title_pooled, const Vec& creative_pooled,
                 const GrmParams& params) {
  const Vec x = scorer_input(e_g, title_pooled, creative_pooled);
  check_scorer_input(x, params);
  return params.w2.dot((params.w1 * x + params.b1).array().tanh().matrix());
}

double grm_predict_features(const Vec& group_flat, const Mat& title_tokens, const Mat& tokens_a,
                            const Mat& tokens_b, const GrmParams& params) {
  const Vec e_g = grm_group_token(group_flat, params);
  const Vec title = pool_tokens(title_tokens);
  return sigmoid(grm_score(e_g, title, pool_tokens(tokens_a), params) -
                 grm_score(e_g, title, pool_tokens(tokens_b), params));
}

double grm_predict(const PrefPairSample& pair, const World& world, const GrmParams& params) {
  const Creative& a = world.creative(pair.creative_a);
  const Creative& b = world.creative(pair.creative_b);
  if (a.product_id != pair.product_id || b.product_id != pair.product_id)
    throw InputError("grm_predict: creatives " + std::to_string(a.creative_id) + " and " +
                     std::to_string(b.creative_id) + " do not both belong to product " +
                     std::to_string(pair.product_id));
  return grm_predict_features(pair.group, world.product(pair.product_id).title_tokens,
                              a.style_tokens, b.style_tokens, params);
}

GrmLossGrad grm_loss_and_grad(std::span<const PrefPairSample> pairs, const World& world,
                              const GrmParams& params) {
  if (pairs.empty()) throw PreconditionError("grm loss needs at least one pair");
  GrmLossGrad out;
  out.grad = zeros_like(params);
  const double inv_n = 1.0 / static_cast<double>(pairs.size());

  // Encode each distinct group once; pairs are matched by key and content.
  struct GroupSlot {
    std::pair<int, int> key;
    const Vec* flat;
    GroupEncoderCache cache;
    Vec e_g;
    Vec d_e_g;
  };
  std::vector<GroupSlot> slots;
  std::vector<std::size_t> slot_of(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto key = std::make_pair(pairs[i].product_id, pairs[i].group_index);
    auto it = std::find_if(slots.begin(), slots.end(), [&](const GroupSlot& s) {
      return s.key == key && *s.flat == pairs[i].group;
    });
    if (it == slots.end()) {
      GroupSlot s{key, &pairs[i].group, {}, {}, Vec::Zero(params.d_g())};
      s.e_g = params.use_group ? encode_group_flat(pairs[i].group, params.encoder, &s.cache)
                               : Vec::Zero(params.d_g());
      slots.push_back(std::move(s));
      it = slots.end() - 1;
    }
    slot_of[i] = static_cast<std::size_t>(it - slots.begin());
  }

  const Eigen::Index dg = params.d_g();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& pr = pairs[i];
    auto& slot = slots[slot_of[i]];
    const Vec title = pool_tokens(world.product(pr.product_id).title_tokens);
    const Vec xa = scorer_input(slot.e_g, title, pool_tokens(world.creative(pr.creative_a).style_tokens));
    const Vec xb = scorer_input(slot.e_g, title, pool_tokens(world.creative(pr.creative_b).style_tokens));
    check_scorer_input(xa, params);
    const Vec ha = (params.w1 * xa + params.b1).array().tanh().matrix();
    const Vec hb = (params.w1 * xb + params.b1).array().tanh().matrix();
    const double z = params.w2.dot(ha) - params.w2.dot(hb);
    const double t = pr.label == 0 ? 1.0 : 0.0;
    out.loss += (softplus(z) - t * z) * inv_n;
    const double dz = (sigmoid(z) - t) * inv_n;

    for (int side = 0; side < 2; ++side) {
      const double ds = side == 0 ? dz : -dz;
      const Vec& h = side == 0 ? ha : hb;
      const Vec& x = side == 0 ? xa : xb;
      out.grad.w2 += ds * h;
      const Vec du = ((ds * params.w2).array() * (1.0 - h.array().square())).matrix();
      out.grad.w1.noalias() += du * x.transpose();
      out.grad.b1 += du;
      if (params.use_group) slot.d_e_g.noalias() += params.w1.leftCols(dg).transpose() * du;
    }
  }
  if (params.use_group)
    for (const auto& s : slots) encode_group_backward(s.cache, params.encoder, s.d_e_g, out.grad.encoder);
  return out;
}

GrmTrainResult grm_train(std::span<const PrefPairSample> pairs, const World& world,
                         const GrmConfig& config, GrmParams params_init) {
  config.validate();
  if (pairs.empty()) throw PreconditionError("grm_train needs at least one pair");
  GrmTrainResult out;
  out.params = std::move(params_init);
  out.params.use_group = config.use_group;
  Adam<GrmParams> opt(out.params, config.lr);
  for (int e = 0; e < config.epochs; ++e) {
    auto lg = grm_loss_and_grad(pairs, world, out.params);
    if (!std::isfinite(lg.loss) || !all_finite(lg.grad))
      throw TrainingError("grm loss became non-finite at epoch " + std::to_string(e));
    out.curve.emplace_back(e, lg.loss);
    opt.step(out.params, lg.grad);
  }
  return out;
}

std::vector<PrefPairSample> build_pairs(const std::vector<GaipRecord>& gaip, const World& world) {
  std::map<std::pair<int, int>, std::vector<const GaipRecord*>> by_group;
  for (const auto& r : gaip) by_group[{r.product_id, r.group_index}].push_back(&r);

  std::vector<PrefPairSample> out;
  for (auto& [key, recs] : by_group) {
    std::sort(recs.begin(), recs.end(),
              [](const GaipRecord* a, const GaipRecord* b) { return a->creative_id < b->creative_id; });
    if (recs.size() < 2) continue;
    const auto& emb = recs.front()->group_embedding;
    const Vec flat = Eigen::Map<const Vec>(emb.data(), static_cast<Eigen::Index>(emb.size()));
    for (std::size_t i = 0; i < recs.size(); ++i) {
      for (std::size_t j = i + 1; j < recs.size(); ++j) {
        if (recs[i]->ctr == recs[j]->ctr) continue;
        if (world.creative(recs[i]->creative_id).product_id != key.first ||
            world.creative(recs[j]->creative_id).product_id != key.first)
          throw InputError("GAIP record pairs a creative with the wrong product");
        PrefPairSample p;
        p.product_id = key.first;
        p.group_index = key.second;
        p.group = flat;
        p.creative_a = recs[i]->creative_id;
        p.creative_b = recs[j]->creative_id;
        p.ctr_a = recs[i]->ctr;
        p.ctr_b = recs[j]->ctr;
        p.label = p.ctr_a > p.ctr_b ? 0 : 1;
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

std::vector<PrefPairSample> relabel_with_oracle(std::span<const PrefPairSample> pairs,
                                                const World& world,
                                                const std::vector<GroupRepresentation>& groups) {
  std::map<std::pair<int, int>, const GroupRepresentation*> index;
  for (const auto& g : groups) index[{g.product_id, g.group_index}] = &g;
  auto group_ctr = [&](const GroupRepresentation& g, int creative_id) {
    const Creative& c = world.creative(creative_id);
    const Product& p = world.product(c.product_id);
    double s = 0.0;
    for (int uid : g.member_ids) s += oracle_click_prob(world.user(uid), p, c, world.oracle);
    return s / static_cast<double>(g.member_ids.size());
  };
  std::vector<PrefPairSample> out;
  for (const auto& pr : pairs) {
    auto it = index.find({pr.product_id, pr.group_index});
    if (it == index.end())
      throw LookupError("no group " + std::to_string(pr.group_index) + " for product " +
                        std::to_string(pr.product_id));
    PrefPairSample q = pr;
    q.ctr_a = group_ctr(*it->second, pr.creative_a);
    q.ctr_b = group_ctr(*it->second, pr.creative_b);
    if (q.ctr_a == q.ctr_b) continue;
    q.label = q.ctr_a > q.ctr_b ? 0 : 1;
    out.push_back(std::move(q));
  }
  return out;
}

std::pair<std::vector<PrefPairSample>, std::vector<PrefPairSample>> split_pairs(
    std::vector<PrefPairSample> pairs, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
    throw ConfigError("holdout fraction must be in [0, 1)");
  Rng rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::lround(holdout_fraction * static_cast<double>(pairs.size())));
  std::vector<PrefPairSample> test(std::make_move_iterator(pairs.end() - static_cast<std::ptrdiff_t>(n_test)),
                                   std::make_move_iterator(pairs.end()));
  pairs.resize(pairs.size() - n_test);
  return {std::move(pairs), std::move(test)};
}

ModelArchive grm_to_archive(const GrmParams& params, const GrmConfig& config) {
  ModelArchive a;
  a.stage = "train-grm";
  a.config = config;
  a.config["use_group"] = params.use_group;
  a.config["group_input_dim"] = params.encoder.input_dim();
  a.config["scorer_input_dim"] = params.w1.cols();
  a.config_hash = hex64(fnv1a64(a.config.dump()));
  pack_params(params, a);
  return a;
}

GrmParams grm_from_archive(const ModelArchive& archive) {
  GrmParams p;
  unpack_params(p, archive);
  p.use_group = archive.config.at("use_group").get<bool>();
  if (p.w1.rows() != p.b1.size() || p.w1.rows() != p.w2.size() ||
      p.encoder.w1.rows() != p.encoder.b1.size() || p.encoder.w2.cols() != p.encoder.w1.rows() ||
      p.w1.cols() <= p.encoder.output_dim())
    throw ConfigError("grm archive has inconsistent tensor shapes");
  return p;
}

}  // namespace grouppref
