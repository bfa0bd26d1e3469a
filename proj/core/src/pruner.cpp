#include "prunelab/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>

#include "prunelab/error.hpp"
#include "prunelab/random.hpp"

namespace prunelab::prune {
namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return sq;
}

void check_vectors(const Vectors& vectors) {
  for (const auto& v : vectors) {
    if (v.size() != vectors.front().size()) {
      throw Error(ErrorCode::kShapeMismatch, "pattern vectors have differing lengths");
    }
  }
}

Vectors fit_centroids(const Vectors& vectors, const std::vector<int>& assignments, std::size_t k,
                      const Vectors& previous) {
  const std::size_t dim = vectors.empty() ? 0 : vectors.front().size();
  Vectors centroids(k, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (assignments[i] < 0) continue;
    const auto c = static_cast<std::size_t>(assignments[i]);
    ++counts[c];
    for (std::size_t d = 0; d < dim; ++d) centroids[c][d] += vectors[i][d];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) {
      if (c < previous.size()) centroids[c] = previous[c];
      continue;
    }
    for (double& x : centroids[c]) x /= static_cast<double>(counts[c]);
  }
  return centroids;
}

double total_inertia(const Vectors& vectors, const std::vector<int>& assignments,
                     const Vectors& centroids) {
  double sum = 0.0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (assignments[i] >= 0) {
      sum += squared_distance(vectors[i], centroids[static_cast<std::size_t>(assignments[i])]);
    }
  }
  return sum;
}

// Linear interpolation between closest ranks.
double percentile(std::vector<double> values, double tau) {
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(tau, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Tensor keep_conv_outputs(const Tensor& w, const std::vector<std::size_t>& keep) {
  const std::size_t per = w.size() / w.dim(0);
  Shape shape = w.shape();
  shape[0] = keep.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    std::memcpy(out.ptr() + i * per, w.ptr() + keep[i] * per, per * sizeof(float));
  }
  return out;
}

Tensor keep_conv_inputs(const Tensor& w, const std::vector<std::size_t>& keep) {
  const std::size_t o = w.dim(0), c = w.dim(1), area = w.dim(2) * w.dim(3);
  Tensor out({o, keep.size(), w.dim(2), w.dim(3)});
  for (std::size_t f = 0; f < o; ++f) {
    for (std::size_t i = 0; i < keep.size(); ++i) {
      std::memcpy(out.ptr() + (f * keep.size() + i) * area, w.ptr() + (f * c + keep[i]) * area,
                  area * sizeof(float));
    }
  }
  return out;
}

Tensor keep_dense_rows(const Tensor& w, const std::vector<std::size_t>& keep_channels,
                       std::size_t block) {
  const std::size_t m = w.dim(1);
  Tensor out({keep_channels.size() * block, m});
  for (std::size_t i = 0; i < keep_channels.size(); ++i) {
    std::memcpy(out.ptr() + i * block * m, w.ptr() + keep_channels[i] * block * m,
                block * m * sizeof(float));
  }
  return out;
}

std::vector<std::size_t> complement(std::size_t count, const std::vector<std::size_t>& removed) {
  std::vector<std::size_t> keep;
  keep.reserve(count - removed.size());
  std::size_t r = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (r < removed.size() && removed[r] == i) {
      ++r;
    } else {
      keep.push_back(i);
    }
  }
  return keep;
}

template <class T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(values[i]);
  }
  return out.empty() ? "-" : out;
}

}  // namespace

std::vector<double> l1_norms(const nn::Model& model, std::size_t layer_id) {
  const std::size_t filters = model.filter_count(layer_id);
  const Tensor& w = model.params[layer_id].weights;
  const std::size_t per = w.size() / filters;
  std::vector<double> norms(filters, 0.0);
  for (std::size_t f = 0; f < filters; ++f) {
    for (std::size_t i = 0; i < per; ++i) norms[f] += std::fabs(static_cast<double>(w[f * per + i]));
  }
  return norms;
}

std::vector<std::size_t> l1_rank(const nn::Model& model, std::size_t layer_id) {
  const auto norms = l1_norms(model, layer_id);
  std::vector<std::size_t> order(norms.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
  return order;
}

std::optional<std::size_t> LayerPlan::new_index(std::size_t old_index) const {
  const auto it = std::lower_bound(survivors.begin(), survivors.end(), old_index);
  if (it == survivors.end() || *it != old_index) return std::nullopt;
  return static_cast<std::size_t>(it - survivors.begin());
}

const LayerPlan* PrunePlan::layer(std::size_t layer_id) const {
  for (const auto& lp : layers) {
    if (lp.layer_id == layer_id) return &lp;
  }
  return nullptr;
}

PrunePlan make_plan(const nn::Model& model, std::span<const FilterId> removals) {
  PrunePlan plan;
  plan.removals.assign(removals.begin(), removals.end());
  std::sort(plan.removals.begin(), plan.removals.end());
  if (std::adjacent_find(plan.removals.begin(), plan.removals.end()) != plan.removals.end()) {
    throw Error(ErrorCode::kInvalidArgument, "prune plan lists a filter twice");
  }
  std::map<std::size_t, std::vector<std::size_t>> by_layer;
  for (const FilterId& id : plan.removals) {
    const std::size_t count = model.filter_count(id.layer_id);
    if (id.filter_index >= count) {
      throw Error(ErrorCode::kOutOfRange, "filter " + std::to_string(id.filter_index) +
                                              " out of range at layer " + std::to_string(id.layer_id) +
                                              " with " + std::to_string(count) + " filters");
    }
    by_layer[id.layer_id].push_back(id.filter_index);
  }
  const auto shapes = nn::infer_shapes(model.layers, model.input);
  for (auto& [layer_id, removed] : by_layer) {
    const std::size_t count = model.filter_count(layer_id);
    if (removed.size() >= count) {
      throw InfeasibleError(removed.size(), count - 1,
                            "layer " + std::to_string(layer_id) + " must keep at least one filter");
    }
    plan.layers.push_back({layer_id, count, removed, complement(count, removed)});

    DownstreamCut cut{layer_id, 0, CutKind::kConvInput, removed, 1};
    bool found = false;
    for (std::size_t j = layer_id + 1; j < model.layers.size() && !found; ++j) {
      if (model.is_conv(j)) {
        cut.consumer_layer = j;
        found = true;
      } else if (std::holds_alternative<nn::Flatten>(model.layers[j])) {
        const Shape& before = shapes[j - 1];
        cut.kind = CutKind::kDenseRows;
        cut.block = before[2] * before[3];
        for (std::size_t d = j + 1; d < model.layers.size(); ++d) {
          if (std::holds_alternative<nn::Dense>(model.layers[d])) {
            cut.consumer_layer = d;
            found = true;
            break;
          }
        }
        break;
      } else if (std::holds_alternative<nn::Dense>(model.layers[j])) {
        break;
      }
    }
    if (!found) {
      throw Error(ErrorCode::kInvalidModel,
                  "no consumer found for conv layer " + std::to_string(layer_id));
    }
    plan.downstream.push_back(std::move(cut));
  }
  return plan;
}

PrunePlan l1_select(const nn::Model& model, std::size_t layer_id, std::size_t m) {
  const std::size_t count = model.filter_count(layer_id);
  if (m == 0 || m >= count) {
    throw InfeasibleError(m, count - 1,
                          "l1 selection at layer " + std::to_string(layer_id) +
                              " needs 1 <= m < " + std::to_string(count));
  }
  const auto order = l1_rank(model, layer_id);
  std::vector<FilterId> removals;
  for (std::size_t i = 0; i < m; ++i) removals.push_back({layer_id, order[i]});
  return make_plan(model, removals);
}

nn::Model apply_prune(const nn::Model& model, const PrunePlan& plan) {
  nn::Model pruned = model;
  if (plan.empty()) return pruned;
  for (const LayerPlan& lp : plan.layers) {
    if (!model.is_conv(lp.layer_id) || model.filter_count(lp.layer_id) != lp.original_count) {
      throw Error(ErrorCode::kStaleCapture, "plan expects " + std::to_string(lp.original_count) +
                                                " filters at layer " + std::to_string(lp.layer_id) +
                                                ", model differs");
    }
  }
  for (const DownstreamCut& cut : plan.downstream) {
    const LayerPlan* lp = plan.layer(cut.source_layer);
    Tensor& w = pruned.params[cut.consumer_layer].weights;
    if (cut.kind == CutKind::kConvInput) {
      if (w.rank() != 4 || w.dim(1) != lp->original_count) {
        throw Error(ErrorCode::kStaleCapture, "consumer conv " + std::to_string(cut.consumer_layer) +
                                                  " input channels differ from plan");
      }
      w = keep_conv_inputs(w, lp->survivors);
    } else {
      if (w.rank() != 2 || w.dim(0) != lp->original_count * cut.block) {
        throw Error(ErrorCode::kStaleCapture, "consumer dense " + std::to_string(cut.consumer_layer) +
                                                  " rows differ from plan");
      }
      w = keep_dense_rows(w, lp->survivors, cut.block);
    }
  }
  for (const LayerPlan& lp : plan.layers) {
    nn::LayerParams& p = pruned.params[lp.layer_id];
    p.weights = keep_conv_outputs(p.weights, lp.survivors);
    p.bias = keep_conv_outputs(p.bias, lp.survivors);
    std::get<nn::Conv>(pruned.layers[lp.layer_id]).out_channels = lp.survivors.size();
  }
  nn::reset_velocity(pruned);
  nn::validate(pruned);
  return pruned;
}

std::vector<std::size_t> ClusterReport::members(std::size_t cluster) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] == static_cast<int>(cluster)) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> ClusterReport::sizes() const {
  std::vector<std::size_t> out(k, 0);
  for (int a : assignments) {
    if (a >= 0) ++out[static_cast<std::size_t>(a)];
  }
  return out;
}

std::size_t default_cluster_count(std::size_t filters) { return (filters + 3) / 4; }

ClusterReport kmeans_patterns(const Vectors& vectors, std::size_t k, std::uint64_t seed) {
  const std::size_t n = vectors.size();
  if (k == 0 || k > n) {
    throw Error(ErrorCode::kOutOfRange, "k = " + std::to_string(k) + " outside [1, " +
                                            std::to_string(n) + "]");
  }
  check_vectors(vectors);

  // k-means++ seeding.
  Rng rng(seed);
  std::vector<std::size_t> chosen{rng.index(n)};
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(vectors[i], vectors[chosen[0]]);
  while (chosen.size() < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double cumulative = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        cumulative += d2[i];
        pick = i;
        if (cumulative > target) break;
      }
    } else {
      for (std::size_t i = 0; i < n && pick == n; ++i) {
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) pick = i;
      }
    }
    chosen.push_back(pick);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(vectors[i], vectors[pick]));
    }
  }

  ClusterReport report;
  report.k = k;
  for (std::size_t c : chosen) report.centroids.push_back(vectors[c]);
  report.assignments.assign(n, -1);

  for (std::size_t iter = 0; iter < kMaxLloydIterations; ++iter) {
    std::vector<int> next(n, 0);
    std::vector<double> dist(n);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(vectors[i], report.centroids[c]);
        if (d < best) {
          best = d;
          next[i] = static_cast<int>(c);
        }
      }
      dist[i] = best;
      ++counts[static_cast<std::size_t>(next[i])];
    }
    // Empty-cluster repair; points already sitting on their centroid are
    // never moved, so fully degenerate inputs leave clusters empty.
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(next[i])] < 2 || dist[i] <= 0.0) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      if (far == n) continue;
      --counts[static_cast<std::size_t>(next[far])];
      next[far] = static_cast<int>(c);
      counts[c] = 1;
      dist[far] = 0.0;
    }
    const bool changed = next != report.assignments;
    report.assignments = std::move(next);
    report.centroids = fit_centroids(vectors, report.assignments, k, report.centroids);
    report.inertia = total_inertia(vectors, report.assignments, report.centroids);
    report.inertia_trace.push_back(report.inertia);
    report.iterations = iter + 1;
    if (!changed) break;
  }
  return report;
}

ClusterReport detect_singletons(ClusterReport report, const Vectors& vectors, double tau_percentile) {
  if (report.assignments.size() != vectors.size()) {
    throw Error(ErrorCode::kShapeMismatch, "cluster report and vectors disagree in count");
  }
  const auto sizes = report.sizes();
  std::vector<double> pooled;
  std::vector<double> dist(vectors.size(), 0.0);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const int a = report.assignments[i];
    if (a < 0 || sizes[static_cast<std::size_t>(a)] < 2) continue;
    dist[i] = std::sqrt(squared_distance(vectors[i], report.centroids[static_cast<std::size_t>(a)]));
    pooled.push_back(dist[i]);
  }
  const double threshold =
      pooled.empty() ? std::numeric_limits<double>::infinity() : percentile(pooled, tau_percentile);

  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const int a = report.assignments[i];
    if (a < 0) continue;
    if (sizes[static_cast<std::size_t>(a)] == 1 || dist[i] > threshold) {
      report.assignments[i] = -1;
      report.singletons.push_back(i);
    }
  }
  std::sort(report.singletons.begin(), report.singletons.end());
  report.centroids = fit_centroids(vectors, report.assignments, report.k, report.centroids);
  report.inertia = total_inertia(vectors, report.assignments, report.centroids);
  return report;
}

ContributionTable contribution_index(const nn::Model& model, const data::Dataset& dataset,
                                     std::size_t layer_id, std::size_t sample_count) {
  const std::size_t filters = model.filter_count(layer_id);
  if (sample_count == 0) {
    throw Error(ErrorCode::kInvalidArgument, "contribution index needs at least one sample");
  }
  if (sample_count > dataset.size()) {
    throw Error(ErrorCode::kOutOfRange, "requested " + std::to_string(sample_count) +
                                            " samples from a dataset of " +
                                            std::to_string(dataset.size()));
  }
  constexpr std::size_t kChunk = 64;
  const std::size_t classes = model.class_count();
  ContributionTable table{layer_id, sample_count, std::vector<double>(filters, 0.0)};

  for (std::size_t begin = 0; begin < sample_count; begin += kChunk) {
    const std::size_t count = std::min(kChunk, sample_count - begin);
    const data::Dataset chunk = data::slice(dataset, begin, count);
    const nn::ForwardTrace trace = nn::forward_trace(model, chunk.images);
    const Shape& act = trace.outputs[layer_id].shape();
    const std::size_t plane = act[2] * act[3];
    std::vector<double> squares(count * filters, 0.0);
    for (std::size_t j = 0; j < classes; ++j) {
      Tensor seed({count, classes});
      for (std::size_t n = 0; n < count; ++n) seed(n, j) = 1.0f;
      const nn::Gradients g = nn::backward(
          model, trace, seed, {.param_grads = false, .input_grad = false, .stop_after_layer = layer_id});
      for (std::size_t n = 0; n < count; ++n) {
        for (std::size_t f = 0; f < filters; ++f) {
          const float* p = g.at_stop.ptr() + (n * filters + f) * plane;
          double sq = 0.0;
          for (std::size_t s = 0; s < plane; ++s) sq += static_cast<double>(p[s]) * p[s];
          squares[n * filters + f] += sq;
        }
      }
    }
    for (std::size_t n = 0; n < count; ++n) {
      for (std::size_t f = 0; f < filters; ++f) table.gamma[f] += std::sqrt(squares[n * filters + f]);
    }
  }
  for (double& g : table.gamma) g /= static_cast<double>(sample_count);
  return table;
}

std::size_t max_removable(std::span<const std::size_t> cluster_sizes) {
  std::size_t total = 0;
  for (std::size_t s : cluster_sizes) total += s > 0 ? s - 1 : 0;
  return total;
}

std::vector<std::size_t> allocate_quotas(std::span<const std::size_t> cluster_sizes, std::size_t m) {
  const std::size_t feasible = max_removable(cluster_sizes);
  if (m > feasible) throw InfeasibleError(m, feasible, "quota allocation");
  const std::size_t clusters = cluster_sizes.size();
  const auto total = static_cast<std::int64_t>(
      std::accumulate(cluster_sizes.begin(), cluster_sizes.end(), std::size_t{0}));
  std::vector<std::size_t> quota(clusters, 0);
  // Greedy unit increments on the separable convex objective: each unit goes
  // to the cluster whose share m*size/total most exceeds its current quota.
  // Scaled by `total` so comparisons stay exact in integers.
  for (std::size_t unit = 0; unit < m; ++unit) {
    std::size_t best = clusters;
    std::int64_t best_gap = 0;
    for (std::size_t c = 0; c < clusters; ++c) {
      if (cluster_sizes[c] == 0 || quota[c] >= cluster_sizes[c] - 1) continue;
      const std::int64_t gap = static_cast<std::int64_t>(m * cluster_sizes[c]) -
                               static_cast<std::int64_t>(quota[c]) * total;
      if (best == clusters || gap > best_gap ||
          (gap == best_gap && cluster_sizes[c] > cluster_sizes[best])) {
        best = c;
        best_gap = gap;
      }
    }
    ++quota[best];
  }
  return quota;
}

FunctionalSelection functional_select(const nn::Model& model, std::size_t layer_id, std::size_t m,
                                      std::span<const am::Pattern> patterns,
                                      const ContributionTable& contributions, std::size_t k,
                                      std::uint64_t seed, double tau_percentile) {
  const std::size_t filters = model.filter_count(layer_id);
  if (patterns.size() != filters) {
    throw Error(ErrorCode::kInvalidArgument, "need one pattern per filter: got " +
                                                 std::to_string(patterns.size()) + " for " +
                                                 std::to_string(filters));
  }
  for (std::size_t i = 0; i < filters; ++i) {
    if (patterns[i].layer_id != layer_id || patterns[i].filter_id != i) {
      throw Error(ErrorCode::kInvalidArgument,
                  "pattern " + std::to_string(i) + " does not belong to filter " + std::to_string(i) +
                      " of layer " + std::to_string(layer_id));
    }
  }
  if (contributions.layer_id != layer_id || contributions.gamma.size() != filters) {
    throw Error(ErrorCode::kInvalidArgument, "contribution table does not match layer " +
                                                 std::to_string(layer_id));
  }
  if (m == 0) throw Error(ErrorCode::kInvalidArgument, "functional selection needs m >= 1");

  Vectors vectors;
  vectors.reserve(filters);
  for (const am::Pattern& p : patterns) vectors.push_back(am::pattern_vector(p));

  FunctionalSelection sel;
  sel.clusters = detect_singletons(kmeans_patterns(vectors, k, seed), vectors, tau_percentile);
  const auto sizes = sel.clusters.sizes();
  std::vector<std::size_t> live_sizes;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    if (sizes[c] == 0) continue;
    sel.cluster_ids.push_back(c);
    live_sizes.push_back(sizes[c]);
  }
  const std::size_t feasible = max_removable(live_sizes);
  if (m > feasible) {
    throw InfeasibleError(m, feasible,
                          "functional selection at layer " + std::to_string(layer_id) + " (" +
                              std::to_string(sel.clusters.singletons.size()) + " singletons kept)");
  }
  sel.quotas = allocate_quotas(live_sizes, m);

  const auto norms = l1_norms(model, layer_id);
  const auto& gamma = contributions.gamma;
  std::vector<FilterId> removals;
  for (std::size_t i = 0; i < sel.cluster_ids.size(); ++i) {
    auto members = sel.clusters.members(sel.cluster_ids[i]);
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      if (gamma[a] != gamma[b]) return gamma[a] < gamma[b];
      if (norms[a] != norms[b]) return norms[a] < norms[b];
      return a < b;
    });
    for (std::size_t q = 0; q < sel.quotas[i]; ++q) removals.push_back({layer_id, members[q]});
  }
  sel.plan = make_plan(model, removals);
  return sel;
}

void write_report(std::ostream& out, const std::string& method, const PrunePlan& plan,
                  std::span<const LayerReport> layers) {
  out << "prunelab-prune-report 1\n";
  out << "method " << method << "\n";
  out << std::setprecision(9);
  for (const LayerReport& lr : layers) {
    out << "[layer " << lr.layer_id << "]\n";
    out << "filters " << lr.l1.size() << "\n";
    for (std::size_t f = 0; f < lr.l1.size(); ++f) out << "l1 " << f << " " << lr.l1[f] << "\n";
    if (lr.contributions) {
      out << "samples " << lr.contributions->sample_count << "\n";
      for (std::size_t f = 0; f < lr.contributions->gamma.size(); ++f) {
        out << "gamma " << f << " " << lr.contributions->gamma[f] << "\n";
      }
    }
    if (lr.selection) {
      const ClusterReport& cr = lr.selection->clusters;
      out << "k " << cr.k << "\n";
      out << "inertia " << cr.inertia << "\n";
      out << "lloyd_iterations " << cr.iterations << "\n";
      for (std::size_t i = 0; i < lr.selection->cluster_ids.size(); ++i) {
        const std::size_t c = lr.selection->cluster_ids[i];
        const auto members = cr.members(c);
        out << "cluster " << c << " size " << members.size() << " quota " << lr.selection->quotas[i]
            << " members " << join(members) << "\n";
      }
      out << "singletons " << join(cr.singletons) << "\n";
    }
    if (const LayerPlan* lp = plan.layer(lr.layer_id)) {
      out << "removed " << join(lp->removed) << "\n";
      out << "survivors " << join(lp->survivors) << "\n";
    } else {
      out << "removed -\n";
    }
  }
  for (const DownstreamCut& cut : plan.downstream) {
    out << "downstream " << cut.source_layer << " -> " << cut.consumer_layer << " "
        << (cut.kind == CutKind::kConvInput ? "conv_input" : "dense_rows") << " block "
        << cut.block << " channels " << join(cut.channels) << "\n";
  }
  out << "total_removed " << plan.removals.size() << "\n";
}

}  // namespace prunelab::prune
