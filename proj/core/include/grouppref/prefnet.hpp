#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grouppref/archive.hpp"
#include "grouppref/common.hpp"
#include "grouppref/simworld.hpp"

namespace grouppref {

struct PrefNetConfig {
  int dim_d = 128;
  int dim_dprime = 16;
  std::vector<int> cardinalities;
  int d_raw = 32;
  int m_t = 4;
  int m_v = 4;
  double lr = 0.05;
  int epochs = 12;
  int batch_size = 32;
  std::uint64_t seed = 0;

  int n_attr() const { return static_cast<int>(cardinalities.size()); }
  void validate() const;
  static PrefNetConfig for_world(const WorldConfig& world);
};

void to_json(nlohmann::json& j, const PrefNetConfig& c);
void from_json(const nlohmann::json& j, PrefNetConfig& c);

/// Single-head cross-attention weights, applied to row vectors: x·W.
struct CrossAttentionParams {
  Mat w_q, w_k, w_v;  // d × d
};

/// Parameters of the click-preference network. Also used as its gradient.
struct PrefModelParams {
  std::vector<Mat> attr_tables;  // card_a × d'
  Mat mlp_w1;                    // (n_attr·d') × d
  Vec mlp_b1;
  Mat mlp_w2;                    // d × d
  Vec mlp_b2;
  Mat proj_text;                 // d_raw × d
  Mat proj_image;                // d_raw × d
  CrossAttentionParams ca1, ca2;
  Vec head_t, head_v, head_uc;
  Vec head_bias;                 // [b_t, b_v, b_uc]

  int dim() const { return static_cast<int>(mlp_w2.cols()); }

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
    for (std::size_t a = 0; a < s.attr_tables.size(); ++a)
      f("attr_table." + std::to_string(a), s.attr_tables[a]);
    f("user_mlp.w1", s.mlp_w1);
    f("user_mlp.b1", s.mlp_b1);
    f("user_mlp.w2", s.mlp_w2);
    f("user_mlp.b2", s.mlp_b2);
    f("proj_text", s.proj_text);
    f("proj_image", s.proj_image);
    f("ca1.w_q", s.ca1.w_q);
    f("ca1.w_k", s.ca1.w_k);
    f("ca1.w_v", s.ca1.w_v);
    f("ca2.w_q", s.ca2.w_q);
    f("ca2.w_k", s.ca2.w_k);
    f("ca2.w_v", s.ca2.w_v);
    f("head_t", s.head_t);
    f("head_v", s.head_v);
    f("head_uc", s.head_uc);
    f("head_bias", s.head_bias);
  }
};

/// Seeded random initialization with heads at zero.
PrefModelParams init_pref_params(const PrefNetConfig& config, std::uint64_t seed);
/// All-zero parameters with the configured shapes.
PrefModelParams zero_pref_params(const PrefNetConfig& config);
/// Throws ConfigError when tensor shapes disagree with each other.
void check_shapes(const PrefModelParams& params);

/// Every intermediate embedding of one forward pass.
struct ForwardTrace {
  Vec e_u, e_t, e_v, e_ut, e_uc;
  Vec attn_text, attn_image;  // attention weights over title / style tokens
  double y_hat = 0.0;
};

struct PrefSample {
  const UserProfile* user = nullptr;
  const Product* product = nullptr;
  const Creative* creative = nullptr;
  int label = 0;
};

/// e_u = W2·tanh(W1·[u_1; ...; u_N] + b1) + b2 over per-attribute embeddings.
Vec encode_user(std::span<const int> attributes, const PrefModelParams& params);

struct AttentionResult {
  Vec output;
  Vec weights;
};

/// Single-head scaled dot-product attention with a residual:
///   weights = softmax((q·W_Q)(K·W_K)ᵀ / √d),  output = q + weights·(K·W_V).
AttentionResult cross_attention(const Vec& query, const Mat& keys,
                                const CrossAttentionParams& ca);

ForwardTrace forward(const PrefSample& sample, const PrefModelParams& params);

struct PrefLossGrad {
  double loss = 0.0;
  PrefModelParams grad;
};

/// Mean binary cross-entropy of sigmoid(y_hat) against the labels, with the
/// exact gradient. Identical samples are collapsed into weighted rows first.
PrefLossGrad loss_and_grad(std::span<const PrefSample> batch, const PrefModelParams& params);

struct PrefTrainResult {
  PrefModelParams params;
  std::vector<std::pair<int, double>> curve;  // (epoch, mean training loss)
};

/// Mini-batch SGD with a fixed learning rate. Batches are drawn over distinct
/// (user, product, creative) rows, each weighted by its exposure count.
PrefTrainResult train(std::span<const PrefSample> dataset, const PrefNetConfig& config,
                      PrefModelParams params_init);

/// y_hat for every sample, batched.
std::vector<double> predict_logits(std::span<const PrefSample> samples,
                                   const PrefModelParams& params);

/// Row u = e_{u|t} for (users[u], product).
Mat extract_user_product_embeddings(std::span<const UserProfile> users, const Product& product,
                                    const PrefModelParams& params);

ModelArchive pref_params_to_archive(const PrefModelParams& params, const PrefNetConfig& config);
PrefModelParams pref_params_from_archive(const ModelArchive& archive);

}  // namespace grouppref
