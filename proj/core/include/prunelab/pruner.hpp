#pragma once

// Filter selection (l1 magnitude ranking and the functionality-oriented
// pipeline: clustering of AM patterns, singleton exclusion, size-proportional
// quotas, contribution ordering) and the network surgery that removes the
// selected filters.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "prunelab/am.hpp"
#include "prunelab/data.hpp"
#include "prunelab/model.hpp"

namespace prunelab::prune {

struct FilterId {
  std::size_t layer_id = 0;
  std::size_t filter_index = 0;
  auto operator<=>(const FilterId&) const = default;
};

/// Sum of absolute weights per filter (bias excluded).
std::vector<double> l1_norms(const nn::Model& model, std::size_t layer_id);

/// Filter indices in ascending l1 order; equal norms keep index order.
std::vector<std::size_t> l1_rank(const nn::Model& model, std::size_t layer_id);

struct LayerPlan {
  std::size_t layer_id = 0;
  std::size_t original_count = 0;
  std::vector<std::size_t> removed;    // ascending old indices
  std::vector<std::size_t> survivors;  // survivors[new_index] = old_index

  std::optional<std::size_t> new_index(std::size_t old_index) const;
};

enum class CutKind { kConvInput, kDenseRows };

/// Input slices of the consumer layer that disappear with a pruned filter.
struct DownstreamCut {
  std::size_t source_layer = 0;
  std::size_t consumer_layer = 0;
  CutKind kind = CutKind::kConvInput;
  std::vector<std::size_t> channels;
  std::size_t block = 1;  // dense rows per channel after flatten (H*W)
};

struct PrunePlan {
  std::vector<FilterId> removals;  // sorted
  std::vector<LayerPlan> layers;   // ascending layer_id
  std::vector<DownstreamCut> downstream;

  bool empty() const { return removals.empty(); }
  const LayerPlan* layer(std::size_t layer_id) const;
};

/// Validates the removals against the model (conv layers, in-range, unique,
/// never emptying a layer) and derives survivor maps and downstream cuts.
PrunePlan make_plan(const nn::Model& model, std::span<const FilterId> removals);

/// Removes the m smallest-l1 filters; 1 <= m < filter count.
PrunePlan l1_select(const nn::Model& model, std::size_t layer_id, std::size_t m);

/// Physically deletes the planned filters and the downstream slices that
/// consumed them. Velocity buffers of the result are zero. Throws
/// Error(kStaleCapture) when the plan was built for a different model.
nn::Model apply_prune(const nn::Model& model, const PrunePlan& plan);

using Vectors = std::vector<std::vector<double>>;

struct ClusterReport {
  std::vector<int> assignments;  // cluster id per filter, -1 for singletons
  Vectors centroids;             // k entries
  std::vector<std::size_t> singletons;
  std::size_t k = 0;
  double inertia = 0.0;               // over clustered (non-singleton) points
  std::vector<double> inertia_trace;  // one entry per Lloyd iteration
  std::size_t iterations = 0;

  std::vector<std::size_t> members(std::size_t cluster) const;
  std::vector<std::size_t> sizes() const;
};

inline constexpr std::size_t kMaxLloydIterations = 300;
inline constexpr double kDefaultTauPercentile = 90.0;

/// ceil(filters / 4).
std::size_t default_cluster_count(std::size_t filters);

/// k-means++ seeding then Lloyd iterations to an assignment fixpoint (or 300
/// iterations). Nearest-centroid ties go to the lowest cluster id; an empty
/// cluster takes over the point farthest from its centroid.
ClusterReport kmeans_patterns(const Vectors& vectors, std::size_t k, std::uint64_t seed);

/// Marks members of size-1 clusters and members whose centroid distance
/// exceeds the tau-th percentile (linear interpolation) of all member-to-
/// centroid distances as singletons, then refits centroids without them.
ClusterReport detect_singletons(ClusterReport report, const Vectors& vectors,
                                double tau_percentile = kDefaultTauPercentile);

struct ContributionTable {
  std::size_t layer_id = 0;
  std::size_t sample_count = 0;
  std::vector<double> gamma;  // per filter
};

/// Mean over the first sample_count images of the Frobenius norm of the
/// logit Jacobian with respect to the filter's pre-ReLU feature map.
ContributionTable contribution_index(const nn::Model& model, const data::Dataset& dataset,
                                     std::size_t layer_id, std::size_t sample_count);

/// Sum over clusters of (size - 1).
std::size_t max_removable(std::span<const std::size_t> cluster_sizes);

/// Integer removal counts summing to m, each at most size - 1, minimizing the
/// squared deviation from the proportional share m * size / total. Ties
/// favour larger clusters, then lower ids.
std::vector<std::size_t> allocate_quotas(std::span<const std::size_t> cluster_sizes, std::size_t m);

struct FunctionalSelection {
  ClusterReport clusters;
  std::vector<std::size_t> cluster_ids;  // non-empty clusters, parallel to quotas
  std::vector<std::size_t> quotas;
  PrunePlan plan;
};

FunctionalSelection functional_select(const nn::Model& model, std::size_t layer_id, std::size_t m,
                                      std::span<const am::Pattern> patterns,
                                      const ContributionTable& contributions, std::size_t k,
                                      std::uint64_t seed,
                                      double tau_percentile = kDefaultTauPercentile);

/// Everything the textual prune report can describe for one layer.
struct LayerReport {
  std::size_t layer_id = 0;
  std::vector<double> l1;
  const ContributionTable* contributions = nullptr;
  const FunctionalSelection* selection = nullptr;
};

/// Line-oriented text: a title line, "method <name>", then per layer a
/// "[layer N]" section, then the removal and downstream lines of the plan.
void write_report(std::ostream& out, const std::string& method, const PrunePlan& plan,
                  std::span<const LayerReport> layers);

}  // namespace prunelab::prune
