#include "grouppref/grouping.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

namespace grouppref {

double within_cluster_ss(const Mat& points, std::span<const int> labels, const Mat& centroids) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    s += (points.row(i) - centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
  return s;
}

namespace {

Mat seed_plus_plus(const Mat& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Mat centers(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centers.row(0) = points.row(first(rng));
  Vec d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (points.row(i) - centers.row(0)).squaredNorm();
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double target = unif(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    centers.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (points.row(i) - centers.row(c)).squaredNorm());
  }
  return centers;
}

std::vector<int> assign(const Mat& points, const Mat& centers) {
  std::vector<int> labels(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
      const double d = (points.row(i) - centers.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
  }
  return labels;
}

Mat means(const Mat& points, const std::vector<int>& labels, int k, std::vector<int>& counts) {
  Mat c = Mat::Zero(k, points.cols());
  counts.assign(static_cast<std::size_t>(k), 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    c.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
    ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
  }
  for (int j = 0; j < k; ++j)
    if (counts[static_cast<std::size_t>(j)] > 0) c.row(j) /= counts[static_cast<std::size_t>(j)];
  return c;
}

// Moves the point farthest from its centroid (in a cluster of size > 1) into
// each empty cluster until none is empty.
void fill_empty(const Mat& points, std::vector<int>& labels, Mat& centers, int k) {
  std::vector<int> counts;
  for (;;) {
    centers = means(points, labels, k, counts);
    auto empty = std::find(counts.begin(), counts.end(), 0);
    if (empty == counts.end()) return;
    Eigen::Index far = -1;
    double far_d = -1.0;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      const int l = labels[static_cast<std::size_t>(i)];
      if (counts[static_cast<std::size_t>(l)] <= 1) continue;
      const double d = (points.row(i) - centers.row(l)).squaredNorm();
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far < 0) throw std::logic_error("kmeans: cannot fill empty cluster");
    labels[static_cast<std::size_t>(far)] = static_cast<int>(empty - counts.begin());
  }
}

// Hartigan transfer pass: moves single points between clusters while the exact
// change in WCSS, including both centroid shifts, is negative. Escapes many
// Lloyd fixed points, which only ever compare distances to stale centroids.
bool transfer_pass(const Mat& points, std::vector<int>& labels, Mat& centers, int k) {
  std::vector<int> counts;
  centers = means(points, labels, k, counts);
  bool moved = false;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int a = labels[static_cast<std::size_t>(i)];
    const double na = counts[static_cast<std::size_t>(a)];
    if (na <= 1) continue;
    const double loss = na / (na - 1.0) * (points.row(i) - centers.row(a)).squaredNorm();
    int best = -1;
    double best_gain = 1e-12 * std::max(1.0, loss);
    for (int b = 0; b < k; ++b) {
      if (b == a) continue;
      const double nb = counts[static_cast<std::size_t>(b)];
      const double gain = loss - nb / (nb + 1.0) * (points.row(i) - centers.row(b)).squaredNorm();
      if (gain > best_gain) {
        best_gain = gain;
        best = b;
      }
    }
    if (best < 0) continue;
    labels[static_cast<std::size_t>(i)] = best;
    centers = means(points, labels, k, counts);
    moved = true;
  }
  return moved;
}

ClusterAssignment lloyd(const Mat& points, int k, Rng& rng, const KMeansOptions& opt) {
  ClusterAssignment out;
  Mat centers = seed_plus_plus(points, k, rng);
  std::vector<int> labels = assign(points, centers);
  fill_empty(points, labels, centers, k);
  out.objective_trace.push_back(within_cluster_ss(points, labels, centers));
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    std::vector<int> next = assign(points, centers);
    Mat next_centers;
    fill_empty(points, next, next_centers, k);
    const double shift = (next_centers - centers).rowwise().norm().maxCoeff();
    const double obj = within_cluster_ss(points, next, next_centers);
    const double prev = out.objective_trace.back();
    if (obj > prev + 1e-9 * std::max(1.0, prev))
      throw std::logic_error("kmeans: objective increased between Lloyd iterations");
    out.objective_trace.push_back(obj);
    labels = std::move(next);
    centers = std::move(next_centers);
    if (shift < opt.tol) {
      ++it;
      break;
    }
  }
  while (transfer_pass(points, labels, centers, k)) {
    const double obj = within_cluster_ss(points, labels, centers);
    if (obj > out.objective_trace.back() + 1e-9 * std::max(1.0, out.objective_trace.back()))
      throw std::logic_error("kmeans: transfer step increased the objective");
    out.objective_trace.push_back(obj);
  }
  out.labels = std::move(labels);
  out.centroids = std::move(centers);
  out.wcss = within_cluster_ss(points, out.labels, out.centroids);
  out.iterations = it;
  return out;
}

Mat pairwise_distances(const Mat& points) {
  const Eigen::Index n = points.rows();
  Mat d(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (points.row(i) - points.row(j)).norm();
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

double silhouette_from_distances(const Mat& dist, std::span<const int> labels) {
  const Eigen::Index n = dist.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw PreconditionError("silhouette: one label per point required");
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int l : labels) {
    if (l < 0) throw PreconditionError("silhouette: negative label");
    ++counts[static_cast<std::size_t>(l)];
  }
  const auto non_empty = std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; });
  if (non_empty < 2) throw PreconditionError("silhouette is undefined for a single cluster");

  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int li = labels[static_cast<std::size_t>(i)];
    if (counts[static_cast<std::size_t>(li)] == 1) continue;  // s(i) = 0
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j) sums[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += dist(i, j);
    const double a = sums[static_cast<std::size_t>(li)] / (counts[static_cast<std::size_t>(li)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == li || counts[static_cast<std::size_t>(c)] == 0) continue;
      b = std::min(b, sums[static_cast<std::size_t>(c)] / counts[static_cast<std::size_t>(c)]);
    }
    const double m = std::max(a, b);
    if (m > 0.0) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

ClusterAssignment single_cluster(const Mat& points) {
  ClusterAssignment out;
  out.labels.assign(static_cast<std::size_t>(points.rows()), 0);
  out.centroids = points.colwise().mean();
  out.wcss = within_cluster_ss(points, out.labels, out.centroids);
  out.objective_trace = {out.wcss};
  return out;
}

}  // namespace

ClusterAssignment kmeans(const Mat& points, int k, std::uint64_t seed, const KMeansOptions& options) {
  if (k < 1 || k > points.rows())
    throw PreconditionError("kmeans requires 1 <= K <= n (K=" + std::to_string(k) +
                            ", n=" + std::to_string(points.rows()) + ")");
  ClusterAssignment best;
  bool have = false;
  for (int r = 0; r < std::max(1, options.n_init); ++r) {
    Rng rng(derive_seed(seed, "kmeans-init", static_cast<std::uint64_t>(r)));
    auto run = lloyd(points, k, rng, options);
    if (!have || run.wcss < best.wcss) {
      best = std::move(run);
      have = true;
    }
  }
  return best;
}

double mean_silhouette(const Mat& points, std::span<const int> labels) {
  return silhouette_from_distances(pairwise_distances(points), labels);
}

SelectKResult select_k(const Mat& points, int k_min, int k_max, std::uint64_t seed,
                       const KMeansOptions& options) {
  if (k_min < 2) k_min = 2;
  const int n = static_cast<int>(points.rows());
  const int hi = std::min(k_max, n - 1);
  SelectKResult out;
  if (n < 2 || hi < k_min) {
    out.k = 1;
    out.assignment = single_cluster(points);
    return out;
  }
  const Mat dist = pairwise_distances(points);
  double best = -std::numeric_limits<double>::infinity();
  for (int k = k_min; k <= hi; ++k) {
    auto a = kmeans(points, k, derive_seed(seed, "select-k", static_cast<std::uint64_t>(k)), options);
    const double s = silhouette_from_distances(dist, a.labels);
    out.scores.emplace_back(k, s);
    if (s > best) {
      best = s;
      out.k = k;
      out.assignment = std::move(a);
    }
  }
  return out;
}

int PercentileSpec::total() const {
  int t = 0;
  for (const auto& [p, c] : picks) t += c;
  return t;
}

void PercentileSpec::validate() const {
  for (const auto& [p, c] : picks) {
    if (!(p >= 0.0 && p <= 100.0)) throw ConfigError("percentile outside [0, 100]");
    if (c < 1) throw ConfigError("percentile pick count must be >= 1");
  }
  if (total() > capacity)
    throw ConfigError("percentile picks (" + std::to_string(total()) + ") exceed capacity_J (" +
                      std::to_string(capacity) + ")");
}

std::string PercentileSpec::to_string() const {
  std::ostringstream ss;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    if (i) ss << ',';
    ss << picks[i].first << ':' << picks[i].second;
  }
  return ss.str();
}

PercentileSpec PercentileSpec::parse(const std::string& text, int capacity) {
  PercentileSpec spec;
  spec.picks.clear();
  spec.capacity = capacity;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("percentile_spec item '" + item + "' lacks ':'");
    try {
      spec.picks.emplace_back(std::stod(item.substr(0, colon)), std::stoi(item.substr(colon + 1)));
    } catch (const std::logic_error&) {
      throw ConfigError("cannot parse percentile_spec item '" + item + "'");
    }
  }
  spec.validate();
  return spec;
}

double percentile_linear(std::span<const double> sorted, double percentile) {
  if (sorted.empty()) throw PreconditionError("percentile of an empty sample");
  const double pos = percentile / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

GroupRepresentation aggregate_group(const Mat& points, std::span<const int> user_ids,
                                    const ClusterAssignment& assignment, int cluster_index,
                                    const PercentileSpec& spec, int product_id) {
  spec.validate();
  if (static_cast<Eigen::Index>(user_ids.size()) != points.rows() ||
      assignment.labels.size() != user_ids.size())
    throw PreconditionError("aggregate_group: points, ids and labels must align");

  // Members in user_id order so the result is independent of input order.
  std::vector<std::pair<int, Eigen::Index>> members;
  for (std::size_t i = 0; i < user_ids.size(); ++i)
    if (assignment.labels[i] == cluster_index)
      members.emplace_back(user_ids[i], static_cast<Eigen::Index>(i));
  if (members.empty())
    throw PreconditionError("aggregate_group: cluster " + std::to_string(cluster_index) + " is empty");
  std::sort(members.begin(), members.end());

  GroupRepresentation rep;
  rep.product_id = product_id;
  rep.group_index = cluster_index;
  rep.centroid = Vec::Zero(points.cols());
  for (const auto& [id, row] : members) {
    rep.centroid += points.row(row).transpose();
    rep.member_ids.push_back(id);
  }
  rep.centroid /= static_cast<double>(members.size());

  std::vector<double> dist;
  for (const auto& [id, row] : members) dist.push_back((points.row(row).transpose() - rep.centroid).norm());
  std::vector<double> sorted = dist;
  std::sort(sorted.begin(), sorted.end());

  auto picks = spec.picks;
  std::stable_sort(picks.begin(), picks.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  rep.degenerate = members.size() < static_cast<std::size_t>(1 + spec.total());
  std::vector<bool> used(members.size(), false);
  std::size_t n_used = 0;
  for (const auto& [pct, count] : picks) {
    const double radius = percentile_linear(sorted, pct);
    for (int c = 0; c < count; ++c) {
      if (n_used == members.size()) {  // pool exhausted: start reusing members
        std::fill(used.begin(), used.end(), false);
        n_used = 0;
      }
      std::size_t best = members.size();
      for (std::size_t m = 0; m < members.size(); ++m) {
        if (used[m]) continue;
        // members are in user_id order, so strict < keeps the lower id on ties
        if (best == members.size() ||
            std::abs(dist[m] - radius) < std::abs(dist[best] - radius))
          best = m;
      }
      used[best] = true;
      ++n_used;
      rep.peripherals.push_back(points.row(members[best].second).transpose());
    }
  }
  return rep;
}

GroupEncoderParams init_group_encoder(int input_dim, int hidden, int output_dim,
                                      std::uint64_t seed) {
  if (input_dim <= 0 || hidden <= 0 || output_dim <= 0)
    throw ConfigError("group encoder dimensions must be positive");
  Rng rng(seed);
  GroupEncoderParams p;
  p.w1 = random_normal(hidden, input_dim, 1.0 / std::sqrt(static_cast<double>(input_dim)), rng);
  p.b1 = Vec::Zero(hidden);
  p.w2 = random_normal(output_dim, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  p.b2 = Vec::Zero(output_dim);
  return p;
}

Vec encode_group_flat(const Vec& flat, const GroupEncoderParams& enc, GroupEncoderCache* cache) {
  if (flat.size() != enc.w1.cols())
    throw ConfigError("group encoder expects input of size " + std::to_string(enc.w1.cols()) +
                      ", got " + std::to_string(flat.size()));
  Vec h = (enc.w1 * flat + enc.b1).array().tanh().matrix();
  Vec out = enc.w2 * h + enc.b2;
  if (cache) {
    cache->input = flat;
    cache->hidden = std::move(h);
  }
  return out;
}

Vec encode_group(const GroupRepresentation& rep, const GroupEncoderParams& enc) {
  return encode_group_flat(rep.flattened(), enc);
}

void encode_group_backward(const GroupEncoderCache& cache, const GroupEncoderParams& enc,
                           const Vec& d_out, GroupEncoderParams& grad) {
  grad.w2.noalias() += d_out * cache.hidden.transpose();
  grad.b2 += d_out;
  const Vec dz = ((enc.w2.transpose() * d_out).array() * (1.0 - cache.hidden.array().square())).matrix();
  grad.w1.noalias() += dz * cache.input.transpose();
  grad.b1 += dz;
}

std::vector<GroupRepresentation> group_product_users(const World& world, const Product& product,
                                                     const PrefModelParams& params,
                                                     const GroupingConfig& config,
                                                     std::uint64_t seed) {
  const Mat emb = extract_user_product_embeddings(world.users, product, params);
  std::vector<int> ids;
  for (const auto& u : world.users) ids.push_back(u.user_id);
  const auto sel = select_k(emb, config.k_min, config.k_max, seed, config.kmeans);
  spdlog::debug("product {}: K*={} ", product.product_id, sel.k);
  std::vector<GroupRepresentation> out;
  for (int k = 0; k < sel.k; ++k)
    out.push_back(aggregate_group(emb, ids, sel.assignment, k, config.spec, product.product_id));
  return out;
}

}  // namespace grouppref
