#include "grouppref/aligner.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "grouppref/optim.hpp"

namespace grouppref {

std::string PromptSeq::to_string() const {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < tokens.size(); ++i) ss << (i ? "," : "") << tokens[i];
  ss << ']';
  return ss.str();
}

void to_json(nlohmann::json& j, const PromptSeq& y) { j = y.tokens; }
void from_json(const nlohmann::json& j, PromptSeq& y) { y.tokens = j.get<std::vector<int>>(); }

void PolicyShape::validate() const {
  if (length <= 0 || vocab <= 1 || d_h <= 0 || d_tok <= 0 || context_dim <= 0)
    throw ConfigError("policy dimensions must be positive (vocab >= 2)");
}

PolicyParams zero_policy_params(const PolicyShape& shape) {
  shape.validate();
  PolicyParams p;
  p.context_map = Mat::Zero(shape.d_h, shape.context_dim);
  p.token_embeddings = Mat::Zero(shape.vocab + 1, shape.d_tok);
  for (int t = 0; t < shape.length; ++t) {
    p.step_w.push_back(Mat::Zero(shape.vocab, shape.d_h + shape.d_tok));
    p.step_b.push_back(Vec::Zero(shape.vocab));
  }
  return p;
}

PolicyParams init_policy_params(const PolicyShape& shape, std::uint64_t seed) {
  PolicyParams p = zero_policy_params(shape);
  Rng rng(seed);
  p.context_map = random_normal(shape.d_h, shape.context_dim,
                                1.0 / std::sqrt(static_cast<double>(shape.context_dim)), rng);
  p.token_embeddings = random_normal(shape.vocab + 1, shape.d_tok, 1.0, rng);
  const double s = 0.1 / std::sqrt(static_cast<double>(shape.d_h + shape.d_tok));
  for (auto& w : p.step_w) w = random_normal(w.rows(), w.cols(), s, rng);
  return p;
}

Vec policy_context(const Vec& e_g, const Product& product) {
  const Vec title = pool_tokens(product.title_tokens);
  Vec c(e_g.size() + title.size());
  c << e_g, title;
  return c;
}

namespace {

void check_context(const Vec& context, const PolicyParams& params) {
  if (context.size() != params.context_dim())
    throw ConfigError("policy expects a context of size " + std::to_string(params.context_dim()) +
                      ", got " + std::to_string(context.size()));
}

Vec step_input(const Vec& h, const PolicyParams& params, int prev) {
  Vec z(h.size() + params.token_embeddings.cols());
  z << h, params.token_embeddings.row(prev).transpose();
  return z;
}

}  // namespace

double policy_logprob(const PromptSeq& y, const Vec& context, const PolicyParams& params,
                      PolicyParams* grad, double scale) {
  check_context(context, params);
  const int L = params.length();
  const int V = params.vocab();
  if (static_cast<int>(y.tokens.size()) != L)
    throw InputError("prompt has " + std::to_string(y.tokens.size()) + " tokens, expected " +
                     std::to_string(L));
  for (int tok : y.tokens)
    if (tok < 0 || tok >= V) throw InputError("prompt token " + std::to_string(tok) + " out of range");

  const Vec h = params.context_map * context;
  const Eigen::Index dh = h.size();
  Vec dh_acc = Vec::Zero(dh);
  double logp = 0.0;
  int prev = V;
  for (int t = 0; t < L; ++t) {
    const Vec z = step_input(h, params, prev);
    const Vec logits = params.step_w[static_cast<std::size_t>(t)] * z + params.step_b[static_cast<std::size_t>(t)];
    const Vec lsm = log_softmax(logits);
    const int yt = y.tokens[static_cast<std::size_t>(t)];
    logp += lsm[yt];
    if (grad) {
      Vec dlogits = -scale * lsm.array().exp().matrix();
      dlogits[yt] += scale;
      grad->step_w[static_cast<std::size_t>(t)].noalias() += dlogits * z.transpose();
      grad->step_b[static_cast<std::size_t>(t)] += dlogits;
      const Vec dz = params.step_w[static_cast<std::size_t>(t)].transpose() * dlogits;
      dh_acc += dz.head(dh);
      grad->token_embeddings.row(prev) += dz.tail(dz.size() - dh).transpose();
    }
    prev = yt;
  }
  if (grad) grad->context_map.noalias() += dh_acc * context.transpose();
  return logp;
}

double policy_logprob(const PromptSeq& y, const Product& product, const Vec& e_g,
                      const PolicyParams& params) {
  return policy_logprob(y, policy_context(e_g, product), params);
}

namespace {

PromptSeq modal_sequence(const Vec& h, const PolicyParams& params) {
  const int L = params.length();
  const int V = params.vocab();
  // best[t][v]: highest log-probability of a prefix ending in v at step t
  std::vector<Vec> best(static_cast<std::size_t>(L));
  std::vector<std::vector<int>> back(static_cast<std::size_t>(L), std::vector<int>(static_cast<std::size_t>(V), -1));
  best[0] = log_softmax(params.step_w[0] * step_input(h, params, V) + params.step_b[0]);
  for (int t = 1; t < L; ++t) {
    Vec cur = Vec::Constant(V, -std::numeric_limits<double>::infinity());
    for (int u = 0; u < V; ++u) {
      const Vec lsm = log_softmax(params.step_w[static_cast<std::size_t>(t)] * step_input(h, params, u) +
                                  params.step_b[static_cast<std::size_t>(t)]);
      for (int v = 0; v < V; ++v) {
        const double cand = best[static_cast<std::size_t>(t - 1)][u] + lsm[v];
        if (cand > cur[v]) {
          cur[v] = cand;
          back[static_cast<std::size_t>(t)][static_cast<std::size_t>(v)] = u;
        }
      }
    }
    best[static_cast<std::size_t>(t)] = std::move(cur);
  }
  PromptSeq y;
  y.tokens.assign(static_cast<std::size_t>(L), 0);
  int v = 0;
  best[static_cast<std::size_t>(L - 1)].maxCoeff(&v);
  for (int t = L - 1; t >= 0; --t) {
    y.tokens[static_cast<std::size_t>(t)] = v;
    if (t > 0) v = back[static_cast<std::size_t>(t)][static_cast<std::size_t>(v)];
  }
  return y;
}

}  // namespace

PromptSeq generate(const Vec& context, const PolicyParams& params, DecodeMode mode,
                   std::uint64_t seed) {
  check_context(context, params);
  const Vec h = params.context_map * context;
  if (mode == DecodeMode::kModal) return modal_sequence(h, params);
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  PromptSeq y;
  int prev = params.vocab();
  for (int t = 0; t < params.length(); ++t) {
    Vec p = params.step_w[static_cast<std::size_t>(t)] * step_input(h, params, prev) +
            params.step_b[static_cast<std::size_t>(t)];
    int tok = 0;
    if (mode == DecodeMode::kArgmax) {
      p.maxCoeff(&tok);  // first maximal index
    } else {
      softmax_inplace(p);
      const double u = unif(rng);
      double acc = 0.0;
      tok = static_cast<int>(p.size()) - 1;
      for (Eigen::Index v = 0; v < p.size(); ++v) {
        acc += p[v];
        if (u < acc) {
          tok = static_cast<int>(v);
          break;
        }
      }
    }
    y.tokens.push_back(tok);
    prev = tok;
  }
  return y;
}

PromptSeq generate(const Product& product, const Vec& e_g, const PolicyParams& params,
                   DecodeMode mode, std::uint64_t seed) {
  return generate(policy_context(e_g, product), params, mode, seed);
}

PolicyTrainResult pretrain_policy(std::span<const PolicyExample> dataset,
                                  const PretrainConfig& config, PolicyParams params_init) {
  if (dataset.empty()) throw PreconditionError("pretrain_policy needs at least one example");
  if (!(config.lr >= 0.0) || config.epochs < 0) throw ConfigError("pretrain lr/epochs out of range");
  PolicyTrainResult out;
  out.params = std::move(params_init);
  Adam<PolicyParams> opt(out.params, config.lr);
  const double inv_n = 1.0 / static_cast<double>(dataset.size());
  for (int e = 0; e < config.epochs; ++e) {
    PolicyParams grad = zeros_like(out.params);
    double nll = 0.0;
    for (const auto& ex : dataset) nll -= policy_logprob(ex.y, ex.context, out.params, &grad, -inv_n);
    nll *= inv_n;
    if (!std::isfinite(nll) || !all_finite(grad))
      throw TrainingError("policy pretraining loss became non-finite at epoch " + std::to_string(e));
    out.curve.emplace_back(e, nll);
    opt.step(out.params, grad);
  }
  return out;
}

PromptRenderer::PromptRenderer(std::vector<Mat> prototypes, int length, int vocab,
                               std::uint64_t seed, double noise)
    : prototypes_(std::move(prototypes)), length_(length), vocab_(vocab), noise_(noise) {
  if (prototypes_.empty()) throw ConfigError("renderer needs at least one style prototype");
  if (vocab_ < static_cast<int>(prototypes_.size()))
    throw ConfigError("vocabulary (" + std::to_string(vocab_) + ") smaller than the number of styles (" +
                      std::to_string(prototypes_.size()) + ")");
  if (length_ <= 0) throw ConfigError("prompt length must be positive");
  Rng rng(derive_seed(seed, "renderer"));
  std::vector<int> perm(static_cast<std::size_t>(vocab_));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int v = 0; v < vocab_; ++v)
    token_style_.push_back(perm[static_cast<std::size_t>(v)] % n_styles());
  const auto& shape = prototypes_.front();
  for (int v = 0; v < vocab_; ++v) token_noise_.push_back(random_normal(shape.rows(), shape.cols(), 1.0, rng));
}

Mat PromptRenderer::render(const PromptSeq& y) const {
  if (static_cast<int>(y.tokens.size()) != length_)
    throw InputError("render: prompt length " + std::to_string(y.tokens.size()) + " != " +
                     std::to_string(length_));
  const double norm = length_ * (length_ + 1) / 2.0;
  Mat out = Mat::Zero(prototypes_.front().rows(), prototypes_.front().cols());
  for (int t = 0; t < length_; ++t) {
    const int tok = y.tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= vocab_) throw InputError("render: token out of range");
    const double w = (length_ - t) / norm;
    out += w * (prototypes_[static_cast<std::size_t>(style_of_token(tok))] +
                noise_ * token_noise_[static_cast<std::size_t>(tok)]);
  }
  return out;
}

int PromptRenderer::latent_style(const PromptSeq& y) const {
  const Mat f = render(y);
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < prototypes_.size(); ++s) {
    const double d = (prototypes_[s] - f).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(s);
    }
  }
  return best;
}

PromptSeq PromptRenderer::template_prompt(int style) const {
  std::vector<int> toks;
  for (int v = 0; v < vocab_; ++v)
    if (token_style_[static_cast<std::size_t>(v)] == style) toks.push_back(v);
  if (toks.empty()) throw LookupError("no token renders style " + std::to_string(style));
  PromptSeq y;
  for (int t = 0; t < length_; ++t) y.tokens.push_back(toks[static_cast<std::size_t>(t) % toks.size()]);
  return y;
}

Mat render_prompt(const World& world, const PromptSeq& y, std::uint64_t seed, int length,
                  int vocab) {
  return PromptRenderer(world.style_prototypes, length, vocab, seed).render(y);
}

double GrmJudge::prefer(const GroupRepresentation& group, const Product& product,
                        const PromptSeq& a, const PromptSeq& b) const {
  return grm_predict_features(group.flattened(), product.title_tokens, renderer_.render(a),
                              renderer_.render(b), grm_);
}

double group_oracle_ctr(const World& world, const GroupRepresentation& group, int category,
                        int style) {
  if (group.member_ids.empty()) throw PreconditionError("group has no members");
  double s = 0.0;
  for (int uid : group.member_ids) s += oracle_click_prob(world.user(uid), category, style, world.oracle);
  return s / static_cast<double>(group.member_ids.size());
}

double OracleJudge::prefer(const GroupRepresentation& group, const Product& product,
                           const PromptSeq& a, const PromptSeq& b) const {
  const double ca = group_oracle_ctr(world_, group, product.category, renderer_.latent_style(a));
  const double cb = group_oracle_ctr(world_, group, product.category, renderer_.latent_style(b));
  if (ca + cb == 0.0) return 0.5;
  return ca / (ca + cb);
}

void to_json(nlohmann::json& j, const PreferenceTuple& t) {
  j = {{"product_id", t.product_id},
       {"group_index", t.group_index},
       {"y_w", t.y_w},
       {"y_l", t.y_l},
       {"confidence", t.confidence},
       {"round", t.round},
       {"e_g", std::vector<double>(t.e_g.data(), t.e_g.data() + t.e_g.size())}};
}

void from_json(const nlohmann::json& j, PreferenceTuple& t) {
  j.at("product_id").get_to(t.product_id);
  j.at("group_index").get_to(t.group_index);
  j.at("y_w").get_to(t.y_w);
  j.at("y_l").get_to(t.y_l);
  j.at("confidence").get_to(t.confidence);
  t.round = j.value("round", 0);
  const auto e = j.at("e_g").get<std::vector<double>>();
  t.e_g = Eigen::Map<const Vec>(e.data(), static_cast<Eigen::Index>(e.size()));
}

std::vector<PreferenceTuple> build_tuples(const Product& product,
                                          const std::vector<GroupRepresentation>& groups,
                                          const std::vector<Vec>& group_tokens,
                                          const PolicyParams& params, const PromptJudge& judge,
                                          int n_candidates, std::uint64_t seed) {
  if (groups.size() != group_tokens.size())
    throw PreconditionError("build_tuples: one group token per group required");
  if (n_candidates < 2) throw ConfigError("n_candidates must be at least 2");
  std::vector<PreferenceTuple> out;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const Vec ctx = policy_context(group_tokens[g], product);
    std::set<PromptSeq> unique;
    for (int c = 0; c < n_candidates; ++c)
      unique.insert(generate(ctx, params, DecodeMode::kSample,
                             derive_seed(seed, "candidate", g * 100003u + static_cast<std::size_t>(c))));
    const std::vector<PromptSeq> cands(unique.begin(), unique.end());
    if (cands.size() < 2) {
      spdlog::debug("product {} group {}: all {} candidates identical, no tuples", product.product_id,
                   groups[g].group_index, n_candidates);
      continue;
    }
    for (std::size_t i = 0; i < cands.size(); ++i) {
      for (std::size_t j = i + 1; j < cands.size(); ++j) {
        const double p = judge.prefer(groups[g], product, cands[i], cands[j]);
        if (p == 0.5) continue;
        PreferenceTuple t;
        t.product_id = product.product_id;
        t.group_index = groups[g].group_index;
        t.e_g = group_tokens[g];
        t.y_w = p > 0.5 ? cands[i] : cands[j];
        t.y_l = p > 0.5 ? cands[j] : cands[i];
        t.confidence = p > 0.5 ? p : 1.0 - p;
        out.push_back(std::move(t));
      }
    }
  }
  return out;
}

double dpo_loss_from_logprobs(double logp_w, double ref_w, double logp_l, double ref_l,
                              double beta) {
  const double delta = beta * ((logp_w - ref_w) - (logp_l - ref_l));
  return softplus(-delta);
}

DpoLossGrad group_dpo_loss(const DpoExample& example, const PolicyParams& theta,
                           const PolicyParams& ref, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and positive");
  DpoLossGrad out;
  out.grad = zeros_like(theta);
  const double rw = policy_logprob(example.y_w, example.context, ref);
  const double rl = policy_logprob(example.y_l, example.context, ref);
  const double lw = policy_logprob(example.y_w, example.context, theta);
  const double ll = policy_logprob(example.y_l, example.context, theta);
  const double delta = beta * ((lw - rw) - (ll - rl));
  out.loss = softplus(-delta);
  const double coeff = -sigmoid(-delta) * beta;
  policy_logprob(example.y_w, example.context, theta, &out.grad, coeff);
  policy_logprob(example.y_l, example.context, theta, &out.grad, -coeff);
  return out;
}

void DpoConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("aligner.beta must be finite and > 0");
  if (!(lr >= 0.0) || steps < 0) throw ConfigError("aligner lr/steps out of range");
  if (optimizer != "sgd" && optimizer != "adam")
    throw ConfigError("aligner.optimizer must be 'sgd' or 'adam'");
}

PolicyTrainResult align(std::span<const DpoExample> examples, const DpoConfig& config,
                        const PolicyParams& ref, const PolicyParams* init) {
  config.validate();
  if (examples.empty()) throw PreconditionError("align needs at least one preference tuple");
  std::vector<double> ref_w, ref_l;
  for (const auto& ex : examples) {
    ref_w.push_back(policy_logprob(ex.y_w, ex.context, ref));
    ref_l.push_back(policy_logprob(ex.y_l, ex.context, ref));
  }
  PolicyTrainResult out;
  out.params = init ? *init : ref;
  Adam<PolicyParams> opt(out.params, config.lr);
  const bool use_adam = config.optimizer == "adam";
  const double inv_n = 1.0 / static_cast<double>(examples.size());
  for (int s = 0; s <= config.steps; ++s) {
    PolicyParams grad = zeros_like(out.params);
    double loss = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& ex = examples[i];
      const double lw = policy_logprob(ex.y_w, ex.context, out.params);
      const double ll = policy_logprob(ex.y_l, ex.context, out.params);
      const double delta = config.beta * ((lw - ref_w[i]) - (ll - ref_l[i]));
      loss += softplus(-delta) * inv_n;
      if (s == config.steps) continue;
      const double coeff = -sigmoid(-delta) * config.beta * inv_n;
      policy_logprob(ex.y_w, ex.context, out.params, &grad, coeff);
      policy_logprob(ex.y_l, ex.context, out.params, &grad, -coeff);
    }
    if (!std::isfinite(loss) || loss > 1e3)
      throw TrainingError("Group-DPO diverged at step " + std::to_string(s) + " (loss " +
                          std::to_string(loss) + ", beta " + std::to_string(config.beta) +
                          ", lr " + std::to_string(config.lr) + ")");
    out.curve.emplace_back(s, loss);
    if (s == config.steps) break;
    if (use_adam)
      opt.step(out.params, grad);
    else
      sgd_step(out.params, grad, config.lr);
  }
  return out;
}

std::vector<DpoExample> dpo_examples(std::span<const PreferenceTuple> tuples, const World& world,
                                     bool use_group) {
  std::vector<DpoExample> out;
  for (const auto& t : tuples) {
    const Vec e_g = use_group ? t.e_g : Vec::Zero(t.e_g.size());
    out.push_back({policy_context(e_g, world.product(t.product_id)), t.y_w, t.y_l});
  }
  return out;
}

ModelArchive policy_to_archive(const PolicyParams& params, const std::string& stage,
                               const nlohmann::json& config) {
  ModelArchive a;
  a.stage = stage;
  a.config = config;
  a.config["length"] = params.length();
  a.config["vocab"] = params.vocab();
  a.config["d_h"] = params.context_map.rows();
  a.config["d_tok"] = params.token_embeddings.cols();
  a.config["context_dim"] = params.context_dim();
  a.config_hash = hex64(fnv1a64(a.config.dump()));
  pack_params(params, a);
  return a;
}

PolicyParams policy_from_archive(const ModelArchive& archive) {
  PolicyShape shape;
  shape.length = archive.config.at("length").get<int>();
  shape.vocab = archive.config.at("vocab").get<int>();
  shape.d_h = archive.config.at("d_h").get<int>();
  shape.d_tok = archive.config.at("d_tok").get<int>();
  shape.context_dim = archive.config.at("context_dim").get<int>();
  PolicyParams p = zero_policy_params(shape);
  unpack_params(p, archive);
  return p;
}

}  // namespace grouppref
