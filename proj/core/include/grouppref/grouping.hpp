#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grouppref/common.hpp"
#include "grouppref/group_types.hpp"
#include "grouppref/prefnet.hpp"
#include "grouppref/simworld.hpp"

namespace grouppref {

struct KMeansOptions {
  int max_iter = 300;
  double tol = 1e-8;  // stop when no centroid moves farther than this
  int n_init = 10;    // k-means++ restarts; the lowest WCSS wins
};

struct ClusterAssignment {
  std::vector<int> labels;
  Mat centroids;  // K × d, row k = mean of the rows labelled k
  double wcss = 0.0;
  std::vector<double> objective_trace;  // WCSS after every Lloyd iteration
  int iterations = 0;

  int k() const { return static_cast<int>(centroids.rows()); }
};

/// Sum over points of the squared distance to the centroid of their label.
double within_cluster_ss(const Mat& points, std::span<const int> labels, const Mat& centroids);

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are re-seeded
/// with the point farthest from its centroid.
ClusterAssignment kmeans(const Mat& points, int k, std::uint64_t seed,
                         const KMeansOptions& options = {});

/// Mean silhouette over all points (Euclidean). Singleton clusters score 0,
/// as do points with a = b = 0.
double mean_silhouette(const Mat& points, std::span<const int> labels);

struct SelectKResult {
  int k = 1;
  ClusterAssignment assignment;
  std::vector<std::pair<int, double>> scores;  // (K, mean silhouette)
};

/// Clusters for every K in [k_min, min(k_max, n-1)] with independent sub-seeds
/// and keeps the best mean silhouette (ties go to the smaller K). With fewer
/// than three points, or an empty range, returns a single cluster.
SelectKResult select_k(const Mat& points, int k_min, int k_max, std::uint64_t seed,
                       const KMeansOptions& options = {});

/// Peripheral sampling plan: `count` members nearest each percentile radius.
struct PercentileSpec {
  std::vector<std::pair<double, int>> picks{{15.0, 2}, {55.0, 3}, {95.0, 5}};
  int capacity = 10;

  int total() const;
  void validate() const;
  std::string to_string() const;              // "15:2,55:3,95:5"
  static PercentileSpec parse(const std::string& text, int capacity);
};

/// Linear interpolation between order statistics of an ascending sample.
double percentile_linear(std::span<const double> sorted, double percentile);

/// Centroid plus peripheral member embeddings for cluster `cluster_index`.
/// Output is independent of the order of members in `points`.
GroupRepresentation aggregate_group(const Mat& points, std::span<const int> user_ids,
                                    const ClusterAssignment& assignment, int cluster_index,
                                    const PercentileSpec& spec, int product_id = 0);

/// One-hidden-layer MLP that maps a flattened representation to the group token.
struct GroupEncoderParams {
  Mat w1;  // hidden × input
  Vec b1;
  Mat w2;  // out × hidden
  Vec b2;

  int input_dim() const { return static_cast<int>(w1.cols()); }
  int output_dim() const { return static_cast<int>(w2.rows()); }

  template <class F>
  void visit(F&& f) {
    f("group_encoder.w1", w1);
    f("group_encoder.b1", b1);
    f("group_encoder.w2", w2);
    f("group_encoder.b2", b2);
  }
  template <class F>
  void visit(F&& f) const {
    f("group_encoder.w1", w1);
    f("group_encoder.b1", b1);
    f("group_encoder.w2", w2);
    f("group_encoder.b2", b2);
  }
};

GroupEncoderParams init_group_encoder(int input_dim, int hidden, int output_dim,
                                      std::uint64_t seed);

struct GroupEncoderCache {
  Vec input;
  Vec hidden;
};

Vec encode_group(const GroupRepresentation& rep, const GroupEncoderParams& enc);
Vec encode_group_flat(const Vec& flat, const GroupEncoderParams& enc,
                      GroupEncoderCache* cache = nullptr);
/// Accumulates dL/d(weights) into `grad` given dL/d(e_G).
void encode_group_backward(const GroupEncoderCache& cache, const GroupEncoderParams& enc,
                           const Vec& d_out, GroupEncoderParams& grad);

struct GroupingConfig {
  int k_min = 2;
  int k_max = 5;
  PercentileSpec spec;
  KMeansOptions kmeans;
};

/// Extracts e_{u|t} for every user of the world for `product`, selects K and
/// builds one representation per cluster (group_index = cluster label).
std::vector<GroupRepresentation> group_product_users(const World& world, const Product& product,
                                                     const PrefModelParams& params,
                                                     const GroupingConfig& config,
                                                     std::uint64_t seed);

}  // namespace grouppref
