#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppref/archive.hpp"
#include "grouppref/common.hpp"
#include "grouppref/grm.hpp"
#include "grouppref/simworld.hpp"

namespace grouppref {

/// Fixed-length token sequence standing in for an image prompt.
struct PromptSeq {
  std::vector<int> tokens;

  auto operator<=>(const PromptSeq&) const = default;
  std::string to_string() const;
};

void to_json(nlohmann::json& j, const PromptSeq& y);
void from_json(const nlohmann::json& j, PromptSeq& y);

struct PolicyShape {
  int length = 4;       // L
  int vocab = 16;       // V
  int d_h = 16;
  int d_tok = 8;
  int context_dim = 0;  // d_g + d_raw

  void validate() const;
};

/// Conditional autoregressive policy over PromptSeq:
///   h = C·context,  logits_t = W_t [h; E[prev_t]] + b_t,
/// with prev_0 the start row E[V].
struct PolicyParams {
  Mat context_map;            // d_h × context_dim
  Mat token_embeddings;       // (V+1) × d_tok, last row is the start token
  std::vector<Mat> step_w;    // L × (V × (d_h + d_tok))
  std::vector<Vec> step_b;    // L × V

  int length() const { return static_cast<int>(step_w.size()); }
  int vocab() const { return static_cast<int>(token_embeddings.rows()) - 1; }
  int context_dim() const { return static_cast<int>(context_map.cols()); }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    f("context_map", s.context_map);
    f("token_embeddings", s.token_embeddings);
    for (std::size_t t = 0; t < s.step_w.size(); ++t) {
      f("step." + std::to_string(t) + ".w", s.step_w[t]);
      f("step." + std::to_string(t) + ".b", s.step_b[t]);
    }
  }
};

PolicyParams init_policy_params(const PolicyShape& shape, std::uint64_t seed);
PolicyParams zero_policy_params(const PolicyShape& shape);

/// [e_G; pooled title tokens].
Vec policy_context(const Vec& e_g, const Product& product);

/// log π(y | context). When `grad` is given, adds scale·∇ log π into it.
double policy_logprob(const PromptSeq& y, const Vec& context, const PolicyParams& params,
                      PolicyParams* grad = nullptr, double scale = 1.0);
double policy_logprob(const PromptSeq& y, const Product& product, const Vec& e_g,
                      const PolicyParams& params);

enum class DecodeMode { kSample, kArgmax, kModal };

/// kArgmax: greedy per-step decoding (ties to the lower token).
/// kSample: ancestral sampling.
/// kModal: the single most probable sequence, found exactly by dynamic
/// programming (each step depends only on the context and the previous token).
PromptSeq generate(const Vec& context, const PolicyParams& params, DecodeMode mode,
                   std::uint64_t seed = 0);
PromptSeq generate(const Product& product, const Vec& e_g, const PolicyParams& params,
                   DecodeMode mode, std::uint64_t seed = 0);

struct PolicyExample {
  Vec context;
  PromptSeq y;
};

struct PretrainConfig {
  double lr = 0.05;
  int epochs = 150;
  std::uint64_t seed = 0;
};

struct PolicyTrainResult {
  PolicyParams params;
  std::vector<std::pair<int, double>> curve;  // (step, loss)
};

/// Full-batch Adam on the mean negative log-likelihood of the examples.
PolicyTrainResult pretrain_policy(std::span<const PolicyExample> dataset,
                                  const PretrainConfig& config, PolicyParams params_init);

/// Deterministic text-to-image stand-in. Token v draws style perm[v] mod S;
/// a prompt renders to Σ_t w_t (prototype[style(y_t)] + ε·R_{y_t}) with
/// positional weights w_t ∝ L − t summing to one.
class PromptRenderer {
 public:
  PromptRenderer(std::vector<Mat> prototypes, int length, int vocab, std::uint64_t seed,
                 double noise = 0.1);

  Mat render(const PromptSeq& y) const;
  int latent_style(const PromptSeq& y) const;
  int style_of_token(int token) const { return token_style_[static_cast<std::size_t>(token)]; }
  /// Prompt made only of tokens mapped to `style`, cycling through them.
  PromptSeq template_prompt(int style) const;

  int n_styles() const { return static_cast<int>(prototypes_.size()); }
  int length() const { return length_; }
  int vocab() const { return vocab_; }

 private:
  std::vector<Mat> prototypes_;
  int length_;
  int vocab_;
  double noise_;
  std::vector<int> token_style_;
  std::vector<Mat> token_noise_;
};

/// Rendered features for `y` from a renderer seeded with `seed`, using the
/// world's style prototypes.
Mat render_prompt(const World& world, const PromptSeq& y, std::uint64_t seed, int length = 4,
                  int vocab = 16);

/// Decides which of two prompts a group prefers; returns P(a beats b).
class PromptJudge {
 public:
  virtual ~PromptJudge() = default;
  virtual double prefer(const GroupRepresentation& group, const Product& product,
                        const PromptSeq& a, const PromptSeq& b) const = 0;
};

class GrmJudge : public PromptJudge {
 public:
  GrmJudge(const GrmParams& grm, const PromptRenderer& renderer)
      : grm_(grm), renderer_(renderer) {}
  double prefer(const GroupRepresentation& group, const Product& product, const PromptSeq& a,
                const PromptSeq& b) const override;

 private:
  const GrmParams& grm_;
  const PromptRenderer& renderer_;
};

/// Ranks prompts by the group's mean oracle click probability for the
/// rendered latent style; P = ctr_a / (ctr_a + ctr_b).
class OracleJudge : public PromptJudge {
 public:
  OracleJudge(const World& world, const PromptRenderer& renderer)
      : world_(world), renderer_(renderer) {}
  double prefer(const GroupRepresentation& group, const Product& product, const PromptSeq& a,
                const PromptSeq& b) const override;

 private:
  const World& world_;
  const PromptRenderer& renderer_;
};

/// Mean oracle click probability of `group`'s members for a creative of `style`.
double group_oracle_ctr(const World& world, const GroupRepresentation& group, int category,
                        int style);

struct PreferenceTuple {
  int product_id = 0;
  int group_index = 0;
  Vec e_g;  // group token the policy is conditioned on
  PromptSeq y_w, y_l;
  double confidence = 0.5;  // judge probability that y_w beats y_l
  int round = 0;            // sampling round that produced the pair
};

void to_json(nlohmann::json& j, const PreferenceTuple& t);
void from_json(const nlohmann::json& j, PreferenceTuple& t);

/// Samples n_candidates prompts per group from the policy, drops duplicates,
/// judges every unordered pair and keeps those with confidence ≠ 0.5.
/// `group_tokens[i]` is the policy's e_G for `groups[i]`.
std::vector<PreferenceTuple> build_tuples(const Product& product,
                                          const std::vector<GroupRepresentation>& groups,
                                          const std::vector<Vec>& group_tokens,
                                          const PolicyParams& params, const PromptJudge& judge,
                                          int n_candidates, std::uint64_t seed);

/// −log σ(β[(lθ_w − lr_w) − (lθ_l − lr_l)]), evaluated as softplus(−Δ).
double dpo_loss_from_logprobs(double logp_w, double ref_w, double logp_l, double ref_l,
                              double beta);

struct DpoExample {
  Vec context;
  PromptSeq y_w, y_l;
};

struct DpoLossGrad {
  double loss = 0.0;
  PolicyParams grad;  // w.r.t. the trained policy only
};

DpoLossGrad group_dpo_loss(const DpoExample& example, const PolicyParams& theta,
                           const PolicyParams& ref, double beta);

struct DpoConfig {
  double beta = 0.1;
  double lr = 1.0;
  int steps = 150;
  std::uint64_t seed = 0;
  std::string optimizer = "sgd";  // "sgd" | "adam"

  void validate() const;
};

/// Full-batch descent on the mean Group-DPO loss with the reference frozen,
/// starting from `init` (the reference when null).
/// Throws TrainingError if the loss exceeds 1e3 or becomes non-finite.
PolicyTrainResult align(std::span<const DpoExample> examples, const DpoConfig& config,
                        const PolicyParams& ref, const PolicyParams* init = nullptr);

/// Policy contexts for a set of tuples; zeroes e_G when `use_group` is false.
std::vector<DpoExample> dpo_examples(std::span<const PreferenceTuple> tuples, const World& world,
                                     bool use_group);

ModelArchive policy_to_archive(const PolicyParams& params, const std::string& stage,
                               const nlohmann::json& config);
PolicyParams policy_from_archive(const ModelArchive& archive);

}  // namespace grouppref
