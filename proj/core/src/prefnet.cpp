#include "grouppref/prefnet.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

#include <spdlog/spdlog.h>

namespace grouppref {

void PrefNetConfig::validate() const {
  if (dim_d <= 0 || dim_dprime <= 0 || d_raw <= 0 || m_t <= 0 || m_v <= 0)
    throw ConfigError("prefnet dimensions must be positive");
  if (cardinalities.empty()) throw ConfigError("prefnet needs at least one attribute");
  for (int c : cardinalities)
    if (c <= 0) throw ConfigError("prefnet cardinalities must be positive");
  if (!(lr >= 0.0) || epochs < 0 || batch_size <= 0)
    throw ConfigError("prefnet lr/epochs/batch_size out of range");
}

PrefNetConfig PrefNetConfig::for_world(const WorldConfig& world) {
  PrefNetConfig c;
  c.cardinalities = world.resolved_cardinalities();
  c.d_raw = world.d_raw;
  c.m_t = world.m_t;
  c.m_v = world.m_v;
  return c;
}

void to_json(nlohmann::json& j, const PrefNetConfig& c) {
  j = {{"dim_d", c.dim_d},
       {"dim_dprime", c.dim_dprime},
       {"n_attr", c.n_attr()},
       {"cardinalities", c.cardinalities},
       {"d_raw", c.d_raw},
       {"m_t", c.m_t},
       {"m_v", c.m_v},
       {"lr", c.lr},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PrefNetConfig& c) {
  j.at("dim_d").get_to(c.dim_d);
  j.at("dim_dprime").get_to(c.dim_dprime);
  j.at("cardinalities").get_to(c.cardinalities);
  j.at("d_raw").get_to(c.d_raw);
  j.at("m_t").get_to(c.m_t);
  j.at("m_v").get_to(c.m_v);
  j.at("lr").get_to(c.lr);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
  if (j.at("n_attr").get<int>() != c.n_attr())
    throw ConfigError("prefnet config: n_attr disagrees with cardinalities");
}

PrefModelParams zero_pref_params(const PrefNetConfig& cfg) {
  cfg.validate();
  const int d = cfg.dim_d;
  PrefModelParams p;
  for (int card : cfg.cardinalities) p.attr_tables.push_back(Mat::Zero(card, cfg.dim_dprime));
  p.mlp_w1 = Mat::Zero(cfg.n_attr() * cfg.dim_dprime, d);
  p.mlp_b1 = Vec::Zero(d);
  p.mlp_w2 = Mat::Zero(d, d);
  p.mlp_b2 = Vec::Zero(d);
  p.proj_text = Mat::Zero(cfg.d_raw, d);
  p.proj_image = Mat::Zero(cfg.d_raw, d);
  for (auto* ca : {&p.ca1, &p.ca2}) {
    ca->w_q = Mat::Zero(d, d);
    ca->w_k = Mat::Zero(d, d);
    ca->w_v = Mat::Zero(d, d);
  }
  p.head_t = Vec::Zero(d);
  p.head_v = Vec::Zero(d);
  p.head_uc = Vec::Zero(d);
  p.head_bias = Vec::Zero(3);
  return p;
}

PrefModelParams init_pref_params(const PrefNetConfig& cfg, std::uint64_t seed) {
  PrefModelParams p = zero_pref_params(cfg);
  Rng rng(seed);
  const double d = cfg.dim_d;
  for (auto& t : p.attr_tables) t = random_normal(t.rows(), t.cols(), 0.5, rng);
  p.mlp_w1 = random_normal(p.mlp_w1.rows(), p.mlp_w1.cols(),
                           1.0 / std::sqrt(static_cast<double>(p.mlp_w1.rows())), rng);
  p.mlp_w2 = random_normal(p.mlp_w2.rows(), p.mlp_w2.cols(), 1.0 / std::sqrt(d), rng);
  p.proj_text = random_normal(cfg.d_raw, cfg.dim_d, 1.0 / std::sqrt(2.0 * cfg.d_raw), rng);
  p.proj_image = random_normal(cfg.d_raw, cfg.dim_d, 1.0 / std::sqrt(2.0 * cfg.d_raw), rng);
  for (auto* ca : {&p.ca1, &p.ca2}) {
    ca->w_q = random_normal(cfg.dim_d, cfg.dim_d, 1.0 / std::sqrt(d), rng);
    ca->w_k = random_normal(cfg.dim_d, cfg.dim_d, 1.0 / std::sqrt(d), rng);
    ca->w_v = random_normal(cfg.dim_d, cfg.dim_d, 0.5 / std::sqrt(d), rng);
  }
  return p;
}

void check_shapes(const PrefModelParams& p) {
  const Eigen::Index d = p.mlp_w2.cols();
  bool ok = p.mlp_w2.rows() == d && p.mlp_b1.size() == d && p.mlp_b2.size() == d &&
            p.mlp_w1.cols() == d && p.proj_text.cols() == d && p.proj_image.cols() == d &&
            p.head_t.size() == d && p.head_v.size() == d && p.head_uc.size() == d &&
            p.head_bias.size() == 3 && !p.attr_tables.empty();
  for (const auto* ca : {&p.ca1, &p.ca2})
    ok = ok && ca->w_q.rows() == d && ca->w_q.cols() == d && ca->w_k.rows() == d &&
         ca->w_k.cols() == d && ca->w_v.rows() == d && ca->w_v.cols() == d;
  Eigen::Index concat = 0;
  for (const auto& t : p.attr_tables) concat += t.cols();
  ok = ok && concat == p.mlp_w1.rows();
  if (!ok) throw ConfigError("preference model parameter shapes are inconsistent");
}

namespace {

void check_attributes(std::span<const int> attrs, const PrefModelParams& p) {
  if (attrs.size() != p.attr_tables.size())
    throw LookupError("user has " + std::to_string(attrs.size()) + " attributes, model expects " +
                      std::to_string(p.attr_tables.size()));
  for (std::size_t a = 0; a < attrs.size(); ++a)
    if (attrs[a] < 0 || attrs[a] >= p.attr_tables[a].rows())
      throw LookupError("attribute " + std::to_string(a) + " code " + std::to_string(attrs[a]) +
                        " outside its embedding table");
}

Vec concat_attributes(std::span<const int> attrs, const PrefModelParams& p) {
  Vec x(p.mlp_w1.rows());
  Eigen::Index off = 0;
  for (std::size_t a = 0; a < attrs.size(); ++a) {
    const auto& t = p.attr_tables[a];
    x.segment(off, t.cols()) = t.row(attrs[a]).transpose();
    off += t.cols();
  }
  return x;
}

// Weighted row of a batch: `count` exposures of which `clicks` were clicked.
struct WeightedRow {
  const UserProfile* user;
  const Product* product;
  const Creative* creative;
  double clicks;
  double count;
};

std::vector<WeightedRow> collapse(std::span<const PrefSample> samples) {
  std::map<std::tuple<const void*, const void*, const void*>, std::size_t> index;
  std::vector<WeightedRow> rows;
  for (const auto& s : samples) {
    if (!s.user || !s.product || !s.creative) throw InputError("sample with null reference");
    auto key = std::make_tuple(static_cast<const void*>(s.user), static_cast<const void*>(s.product),
                               static_cast<const void*>(s.creative));
    auto [it, inserted] = index.try_emplace(key, rows.size());
    if (inserted) rows.push_back({s.user, s.product, s.creative, 0.0, 0.0});
    rows[it->second].clicks += s.label;
    rows[it->second].count += 1.0;
  }
  return rows;
}

// Batched forward state. Activations are stored one sample per row.
struct Batch {
  std::vector<const UserProfile*> users;
  std::vector<int> prod_of;     // sample -> index into products
  std::vector<int> cre_of;      // sample -> index into creatives
  std::vector<const Product*> products;
  std::vector<const Creative*> creatives;

  Mat x, h, e_u, a1, r1, c1, e_ut, a2, r2, c2, e_uc;
  std::vector<Mat> kt, kv;      // projected tokens per unique product / creative
  std::vector<Vec> et, ev;      // pooled projections
  std::vector<Vec> alpha1, alpha2;
  Vec y;
};

template <class Row>
Batch make_batch(std::span<const Row> rows) {
  Batch b;
  std::map<const Product*, int> pidx;
  std::map<const Creative*, int> cidx;
  for (const auto& r : rows) {
    b.users.push_back(r.user);
    auto [pit, pnew] = pidx.try_emplace(r.product, static_cast<int>(b.products.size()));
    if (pnew) b.products.push_back(r.product);
    auto [cit, cnew] = cidx.try_emplace(r.creative, static_cast<int>(b.creatives.size()));
    if (cnew) b.creatives.push_back(r.creative);
    b.prod_of.push_back(pit->second);
    b.cre_of.push_back(cit->second);
  }
  return b;
}

void attend(const Mat& queries, const CrossAttentionParams& ca, const std::vector<Mat>& tokens,
            const std::vector<int>& token_of, Mat& a, Mat& r, Mat& c, std::vector<Vec>& alpha) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(queries.cols()));
  a.noalias() = queries * ca.w_q;
  r.noalias() = a * ca.w_k.transpose();
  c.resize(queries.rows(), queries.cols());
  alpha.resize(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    const Mat& k = tokens[static_cast<std::size_t>(token_of[static_cast<std::size_t>(i)])];
    Vec w = (k * r.row(i).transpose()) * scale;
    softmax_inplace(w);
    c.row(i).noalias() = w.transpose() * k;
    alpha[static_cast<std::size_t>(i)] = std::move(w);
  }
}

void forward_batch(Batch& b, const PrefModelParams& p) {
  check_shapes(p);
  const auto n = static_cast<Eigen::Index>(b.users.size());

  b.x.resize(n, p.mlp_w1.rows());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& attrs = b.users[static_cast<std::size_t>(i)]->attributes;
    check_attributes(attrs, p);
    b.x.row(i) = concat_attributes(attrs, p).transpose();
  }
  b.h.noalias() = b.x * p.mlp_w1;
  b.h.rowwise() += p.mlp_b1.transpose();
  b.h = b.h.array().tanh().matrix();
  b.e_u.noalias() = b.h * p.mlp_w2;
  b.e_u.rowwise() += p.mlp_b2.transpose();

  b.kt.clear();
  b.et.clear();
  for (const Product* prod : b.products) {
    if (prod->title_tokens.cols() != p.proj_text.rows() || prod->title_tokens.rows() < 1)
      throw ConfigError("title token shape does not match the text projection");
    Mat k = prod->title_tokens * p.proj_text;
    b.et.push_back(k.colwise().mean().transpose());
    b.kt.push_back(std::move(k));
  }
  b.kv.clear();
  b.ev.clear();
  for (const Creative* cr : b.creatives) {
    if (cr->style_tokens.cols() != p.proj_image.rows() || cr->style_tokens.rows() < 1)
      throw ConfigError("style token shape does not match the image projection");
    Mat k = cr->style_tokens * p.proj_image;
    b.ev.push_back(k.colwise().mean().transpose());
    b.kv.push_back(std::move(k));
  }

  attend(b.e_u, p.ca1, b.kt, b.prod_of, b.a1, b.r1, b.c1, b.alpha1);
  b.e_ut = b.e_u;
  b.e_ut.noalias() += b.c1 * p.ca1.w_v;
  attend(b.e_ut, p.ca2, b.kv, b.cre_of, b.a2, b.r2, b.c2, b.alpha2);
  b.e_uc = b.e_ut;
  b.e_uc.noalias() += b.c2 * p.ca2.w_v;

  const double bias = p.head_bias.sum();
  b.y = b.e_uc * p.head_uc;
  for (Eigen::Index i = 0; i < n; ++i)
    b.y[i] += b.et[static_cast<std::size_t>(b.prod_of[static_cast<std::size_t>(i)])].dot(p.head_t) +
              b.ev[static_cast<std::size_t>(b.cre_of[static_cast<std::size_t>(i)])].dot(p.head_v) +
              bias;
}

// Backward through one attention stage. Accumulates into the token gradients
// and the stage's weight gradients; returns dL/d(query).
Mat attend_backward(const Mat& queries, const Mat& a, const Mat& r, const Mat& c,
                    const std::vector<Vec>& alpha, const std::vector<Mat>& tokens,
                    const std::vector<int>& token_of, const CrossAttentionParams& ca,
                    const Mat& d_out, CrossAttentionParams& g_ca, std::vector<Mat>& d_tokens) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(queries.cols()));
  g_ca.w_v.noalias() += c.transpose() * d_out;
  const Mat dc = d_out * ca.w_v.transpose();
  Mat dr(r.rows(), r.cols());
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    const auto ti = static_cast<std::size_t>(token_of[static_cast<std::size_t>(i)]);
    const Mat& k = tokens[ti];
    const Vec& w = alpha[static_cast<std::size_t>(i)];
    const Vec dw = k * dc.row(i).transpose();
    const Vec dl = w.cwiseProduct((dw.array() - w.dot(dw)).matrix());
    dr.row(i).noalias() = (dl.transpose() * k) * scale;
    d_tokens[ti].noalias() += w * dc.row(i);
    d_tokens[ti].noalias() += (dl * scale) * r.row(i);
  }
  g_ca.w_k.noalias() += dr.transpose() * a;
  const Mat da = dr * ca.w_k;
  g_ca.w_q.noalias() += queries.transpose() * da;
  Mat d_query = d_out;
  d_query.noalias() += da * ca.w_q.transpose();
  return d_query;
}

void backward_batch(const Batch& b, const PrefModelParams& p, const Vec& g_y,
                    PrefModelParams& g) {
  const auto n = static_cast<Eigen::Index>(b.users.size());

  g.head_uc.noalias() += b.e_uc.transpose() * g_y;
  const double gsum = g_y.sum();
  g.head_bias.array() += gsum;

  std::vector<Vec> d_et(b.products.size(), Vec::Zero(p.dim()));
  std::vector<Vec> d_ev(b.creatives.size(), Vec::Zero(p.dim()));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto pi = static_cast<std::size_t>(b.prod_of[static_cast<std::size_t>(i)]);
    const auto ci = static_cast<std::size_t>(b.cre_of[static_cast<std::size_t>(i)]);
    g.head_t.noalias() += g_y[i] * b.et[pi];
    g.head_v.noalias() += g_y[i] * b.ev[ci];
    d_et[pi].noalias() += g_y[i] * p.head_t;
    d_ev[ci].noalias() += g_y[i] * p.head_v;
  }

  std::vector<Mat> d_kt, d_kv;
  for (std::size_t k = 0; k < b.kt.size(); ++k) {
    Mat z = Mat::Zero(b.kt[k].rows(), b.kt[k].cols());
    z.rowwise() += (d_et[k] / static_cast<double>(b.kt[k].rows())).transpose();
    d_kt.push_back(std::move(z));
  }
  for (std::size_t k = 0; k < b.kv.size(); ++k) {
    Mat z = Mat::Zero(b.kv[k].rows(), b.kv[k].cols());
    z.rowwise() += (d_ev[k] / static_cast<double>(b.kv[k].rows())).transpose();
    d_kv.push_back(std::move(z));
  }

  const Mat d_euc = g_y * p.head_uc.transpose();
  const Mat d_eut = attend_backward(b.e_ut, b.a2, b.r2, b.c2, b.alpha2, b.kv, b.cre_of, p.ca2,
                                    d_euc, g.ca2, d_kv);
  const Mat d_eu = attend_backward(b.e_u, b.a1, b.r1, b.c1, b.alpha1, b.kt, b.prod_of, p.ca1,
                                   d_eut, g.ca1, d_kt);

  for (std::size_t k = 0; k < b.products.size(); ++k)
    g.proj_text.noalias() += b.products[k]->title_tokens.transpose() * d_kt[k];
  for (std::size_t k = 0; k < b.creatives.size(); ++k)
    g.proj_image.noalias() += b.creatives[k]->style_tokens.transpose() * d_kv[k];

  g.mlp_w2.noalias() += b.h.transpose() * d_eu;
  g.mlp_b2.noalias() += d_eu.colwise().sum().transpose();
  const Mat dz = ((d_eu * p.mlp_w2.transpose()).array() * (1.0 - b.h.array().square())).matrix();
  g.mlp_w1.noalias() += b.x.transpose() * dz;
  g.mlp_b1.noalias() += dz.colwise().sum().transpose();
  const Mat dx = dz * p.mlp_w1.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& attrs = b.users[static_cast<std::size_t>(i)]->attributes;
    Eigen::Index off = 0;
    for (std::size_t a = 0; a < attrs.size(); ++a) {
      auto& t = g.attr_tables[a];
      t.row(attrs[a]) += dx.row(i).segment(off, t.cols());
      off += t.cols();
    }
  }
}

// Loss and gradient over weighted rows, normalized by the total count.
double weighted_loss_grad(std::span<const WeightedRow> rows, const PrefModelParams& p,
                          PrefModelParams* grad) {
  Batch b = make_batch(rows);
  forward_batch(b, p);
  double total = 0.0;
  for (const auto& r : rows) total += r.count;
  double loss = 0.0;
  Vec g_y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = b.y[static_cast<Eigen::Index>(i)];
    const auto& r = rows[i];
    loss += r.clicks * softplus(-y) + (r.count - r.clicks) * softplus(y);
    g_y[static_cast<Eigen::Index>(i)] = (r.count * sigmoid(y) - r.clicks) / total;
  }
  loss /= total;
  if (grad) backward_batch(b, p, g_y, *grad);
  return loss;
}

}  // namespace

Vec encode_user(std::span<const int> attributes, const PrefModelParams& params) {
  check_shapes(params);
  check_attributes(attributes, params);
  const Vec x = concat_attributes(attributes, params);
  const Vec h = (params.mlp_w1.transpose() * x + params.mlp_b1).array().tanh().matrix();
  return params.mlp_w2.transpose() * h + params.mlp_b2;
}

AttentionResult cross_attention(const Vec& query, const Mat& keys, const CrossAttentionParams& ca) {
  if (keys.rows() < 1) throw PreconditionError("cross_attention needs at least one key");
  if (keys.cols() != query.size() || ca.w_q.rows() != query.size())
    throw ConfigError("cross_attention dimension mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
  const Vec q = ca.w_q.transpose() * query;  // (q·W_Q)ᵀ
  const Mat k = keys * ca.w_k;
  Vec w = (k * q) * scale;
  softmax_inplace(w);
  const Mat v = keys * ca.w_v;
  AttentionResult out;
  out.output = query + v.transpose() * w;
  out.weights = std::move(w);
  return out;
}

ForwardTrace forward(const PrefSample& sample, const PrefModelParams& params) {
  const PrefSample one[] = {sample};
  Batch b = make_batch(std::span<const PrefSample>(one));
  forward_batch(b, params);
  ForwardTrace t;
  t.e_u = b.e_u.row(0).transpose();
  t.e_t = b.et[0];
  t.e_v = b.ev[0];
  t.e_ut = b.e_ut.row(0).transpose();
  t.e_uc = b.e_uc.row(0).transpose();
  t.attn_text = b.alpha1[0];
  t.attn_image = b.alpha2[0];
  t.y_hat = b.y[0];
  return t;
}

PrefLossGrad loss_and_grad(std::span<const PrefSample> batch, const PrefModelParams& params) {
  if (batch.empty()) throw PreconditionError("loss_and_grad needs a non-empty batch");
  const auto rows = collapse(batch);
  PrefLossGrad out;
  out.grad = zeros_like(params);
  out.loss = weighted_loss_grad(rows, params, &out.grad);
  return out;
}

PrefTrainResult train(std::span<const PrefSample> dataset, const PrefNetConfig& config,
                      PrefModelParams params_init) {
  if (dataset.empty()) throw PreconditionError("train needs a non-empty dataset");
  config.validate();
  check_shapes(params_init);
  auto rows = collapse(dataset);
  PrefTrainResult out;
  out.params = std::move(params_init);
  Rng rng(config.seed);
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<WeightedRow> batch;
  PrefModelParams grad = zeros_like(out.params);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, weight_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.clear();
      double w = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        batch.push_back(rows[order[k]]);
        w += rows[order[k]].count;
      }
      for (auto s : tensor_spans(grad)) std::fill(s.begin(), s.end(), 0.0);
      const double loss = weighted_loss_grad(batch, out.params, &grad);
      if (!std::isfinite(loss) || !all_finite(grad)) {
        std::ostringstream msg;
        msg << "preference model training diverged at epoch " << epoch << ", batch starting at "
            << start << " (loss=" << loss << ", lr=" << config.lr << ")";
        throw TrainingError(msg.str());
      }
      loss_sum += loss * w;
      weight_sum += w;
      axpy(out.params, -config.lr, grad);
    }
    out.curve.emplace_back(epoch, loss_sum / weight_sum);
    spdlog::debug("prefnet epoch {} loss {:.6f}", epoch, loss_sum / weight_sum);
  }
  return out;
}

std::vector<double> predict_logits(std::span<const PrefSample> samples,
                                   const PrefModelParams& params) {
  std::vector<double> out;
  out.reserve(samples.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    auto chunk = samples.subspan(start, std::min(kChunk, samples.size() - start));
    Batch b = make_batch(chunk);
    forward_batch(b, params);
    for (Eigen::Index i = 0; i < b.y.size(); ++i) out.push_back(b.y[i]);
  }
  return out;
}

Mat extract_user_product_embeddings(std::span<const UserProfile> users, const Product& product,
                                    const PrefModelParams& params) {
  check_shapes(params);
  const auto n = static_cast<Eigen::Index>(users.size());
  Mat x(n, params.mlp_w1.rows());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& attrs = users[static_cast<std::size_t>(i)].attributes;
    check_attributes(attrs, params);
    x.row(i) = concat_attributes(attrs, params).transpose();
  }
  Mat h = x * params.mlp_w1;
  h.rowwise() += params.mlp_b1.transpose();
  h = h.array().tanh().matrix();
  Mat e_u = h * params.mlp_w2;
  e_u.rowwise() += params.mlp_b2.transpose();

  if (product.title_tokens.cols() != params.proj_text.rows())
    throw ConfigError("title token shape does not match the text projection");
  std::vector<Mat> kt{product.title_tokens * params.proj_text};
  std::vector<int> token_of(static_cast<std::size_t>(n), 0);
  Mat a, r, c;
  std::vector<Vec> alpha;
  attend(e_u, params.ca1, kt, token_of, a, r, c, alpha);
  Mat e_ut = e_u;
  e_ut.noalias() += c * params.ca1.w_v;
  return e_ut;
}

ModelArchive pref_params_to_archive(const PrefModelParams& params, const PrefNetConfig& config) {
  ModelArchive a;
  a.stage = "train-pref";
  a.config = config;
  a.config_hash = hex64(fnv1a64(a.config.dump()));
  pack_params(params, a);
  return a;
}

PrefModelParams pref_params_from_archive(const ModelArchive& archive) {
  const auto cfg = archive.config.get<PrefNetConfig>();
  PrefModelParams p = zero_pref_params(cfg);
  unpack_params(p, archive);
  check_shapes(p);
  return p;
}

}  // namespace grouppref
