#pragma once

// Experiment orchestration: training, pruning sweeps, retraining with
// snapshots, pattern drift, and the two-method comparison pipeline.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "prunelab/am.hpp"
#include "prunelab/data.hpp"
#include "prunelab/model.hpp"
#include "prunelab/pruner.hpp"

namespace prunelab::lab {

enum class Method { kL1, kFunctional };

std::string_view to_string(Method method);
Method parse_method(std::string_view text);

/// Flat key/value experiment description. Keys in the text form match the
/// field names below (am.* for the AM block); see format_config.
struct ExperimentConfig {
  std::string arch = "vgg-mini";
  std::string dataset = "cifar10";  // cifar10 | mnist
  std::filesystem::path data_dir = "data/cifar-10-batches-bin";
  std::size_t train_size = 5000;
  std::size_t test_size = 1000;

  std::uint64_t seed = 1;
  float lr = 0.005f;
  float momentum = 0.9f;
  std::size_t batch = 16;
  std::size_t epochs = 3;
  std::optional<std::size_t> steps;  // overrides epochs when set

  Method method = Method::kL1;
  std::string layers = "last";  // last | all | comma-separated layer ids
  std::vector<double> ratios{0.2, 0.3, 0.5};
  std::size_t k = 0;  // 0: ceil(filters / 4)
  double tau = prune::kDefaultTauPercentile;
  std::size_t contribution_samples = 256;
  bool modelwise = true;

  am::AmConfig am{.eta = 0.1, .iterations = 256, .seed = 7, .init_scale = 0.1f, .normalize_grad = true};

  std::size_t retrain_steps = 700;
  float retrain_lr = 0.005f;
  std::size_t snapshot_interval = 100;
  std::size_t grid_filters = 4;
  std::size_t grid_columns = 8;

  std::filesystem::path out = "runs/default";
  std::size_t threads = 0;  // 0: PRUNELAB_THREADS or hardware concurrency

  /// Throws Error(kConfig) on out-of-range values.
  void validate() const;
  std::size_t worker_count() const;
};

/// Sets one key; throws Error(kConfig) on unknown keys or malformed values.
void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value);

/// "key = value" lines; '#' starts a comment.
ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});
std::string format_config(const ExperimentConfig& config);

/// "last", "all", or comma-separated ids; every id must be a conv layer.
std::vector<std::size_t> resolve_layers(const nn::Model& model, std::string_view spec);

/// round(ratio * filters).
std::size_t removal_count(std::size_t filters, double ratio);

struct Datasets {
  data::Dataset train;
  data::Dataset test;
};

/// CIFAR-10: first train_size records of data_batch_1..5, first test_size of
/// test_batch. MNIST: the standard *-idx?-ubyte file names.
Datasets load_datasets(const ExperimentConfig& config);
data::Dataset load_train_set(const ExperimentConfig& config);
data::Dataset load_test_set(const ExperimentConfig& config);

struct MetricsRecord {
  std::string kind;
  long layer = -1;  // -1: all conv layers / not applicable
  std::string method;
  double ratio = 0.0;
  std::size_t step = 0;
  double accuracy = -1.0;  // negative: not measured
  double loss = -1.0;
  double median_drift = -1.0;
  double wall_ms = 0.0;
};

inline constexpr std::string_view kMetricsHeader =
    "kind,layer,method,ratio,step,accuracy,loss,median_drift,wall_ms";

/// One row per record under kMetricsHeader; unmeasured values are blank.
/// With include_wall false the wall_ms column is left blank.
void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records,
                       bool include_wall = true);

/// Argmax accuracy (ties to the lowest class); throws on an empty dataset.
double evaluate(const nn::Model& model, const data::Dataset& dataset);

struct TrainResult {
  nn::Model model;
  std::vector<MetricsRecord> history;
};

/// Seeded SGD from a fresh model. With an output directory, writes
/// model.prlb at the end; on a non-finite loss it writes last_good.prlb and
/// throws Error(kDivergence).
TrainResult train(const ExperimentConfig& config, const Datasets& data,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Continues SGD on an existing model for `steps` steps.
std::vector<MetricsRecord> train_steps(nn::Model& model, const data::Dataset& train_set,
                                       std::size_t steps, float lr, float momentum,
                                       std::size_t batch, std::uint64_t seed,
                                       const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Patterns of every filter plus contribution indices for one layer.
struct LayerCriteria {
  std::size_t layer_id = 0;
  std::vector<am::Pattern> patterns;
  prune::ContributionTable contributions;
};

LayerCriteria compute_criteria(const nn::Model& model, std::size_t layer_id,
                               const ExperimentConfig& config, const data::Dataset& samples);

/// Criteria are a pure function of the (frozen) model, so sweeps memoize them.
class CriteriaCache {
 public:
  CriteriaCache(const nn::Model& model, const ExperimentConfig& config, const data::Dataset& samples);
  const LayerCriteria& get(std::size_t layer_id);

 private:
  const nn::Model* model_;
  const ExperimentConfig* config_;
  const data::Dataset* samples_;
  std::map<std::size_t, LayerCriteria> cache_;
};

struct PlanOutcome {
  prune::PrunePlan plan;
  std::vector<prune::FunctionalSelection> selections;  // functional only, per layer
  std::vector<std::size_t> layer_ids;
};

/// Removes round(ratio * filters) filters from each listed layer with the
/// given criterion. A zero count yields an empty plan for that layer.
PlanOutcome build_plan(const nn::Model& model, Method method, std::span<const std::size_t> layer_ids,
                       double ratio, const ExperimentConfig& config, CriteriaCache& cache);

struct SweepResult {
  std::vector<MetricsRecord> records;
  std::vector<std::string> skipped;
};

struct SweepScope {
  bool layerwise = true;
  bool modelwise = true;
};

/// For each ratio: plan, surgery on a fresh copy, evaluation without
/// retraining. Layer-wise rows per listed layer, model-wise rows pruning all
/// conv layers with the shared ratio. Infeasible points are skipped.
SweepResult accuracy_drop_sweep(const nn::Model& model, Method method,
                                std::span<const std::size_t> layer_ids, std::span<const double> ratios,
                                const ExperimentConfig& config, const Datasets& data,
                                CriteriaCache& cache, SweepScope scope = {});

struct Snapshot {
  std::size_t step = 0;
  nn::Model model;
};

struct RetrainResult {
  std::vector<Snapshot> snapshots;
  std::vector<MetricsRecord> records;  // kind "recovery", one per snapshot
};

/// Snapshots at step 0, every snapshot_interval steps, and at the final step.
RetrainResult retrain_with_snapshots(const nn::Model& pruned, const ExperimentConfig& config,
                                     const Datasets& data, std::string_view label = "",
                                     const std::optional<std::filesystem::path>& snapshot_dir = std::nullopt);

std::size_t snapshot_count(std::size_t steps, std::size_t interval);

using SurvivorMap = std::vector<std::pair<std::size_t, std::size_t>>;  // (old, new)

SurvivorMap survivor_map(const prune::PrunePlan& plan, std::size_t layer_id, std::size_t filter_count);

/// pattern_distance between AM(before, old) and AM(after, new) per pair.
std::vector<double> pattern_drift(const nn::Model& before, const nn::Model& after,
                                  std::size_t layer_id, const SurvivorMap& survivors,
                                  const am::AmConfig& config, std::size_t threads = worker_threads());

/// Same, reusing patterns of the original model indexed by old filter id.
std::vector<double> pattern_drift(std::span<const am::Pattern> before_patterns,
                                  const nn::Model& after, std::size_t layer_id,
                                  const SurvivorMap& survivors, const am::AmConfig& config,
                                  std::size_t threads = worker_threads());

double median(std::vector<double> values);

/// Index of the first snapshot whose accuracy is within `tolerance` of the
/// final snapshot's accuracy.
std::size_t snapshots_to_recover(std::span<const MetricsRecord> recovery, double tolerance = 0.01);

/// Filters of a layer whose weights and bias exactly equal another filter's.
std::vector<std::size_t> duplicate_filters(const nn::Model& model, std::size_t layer_id);

struct CompareRow {
  Method method = Method::kL1;
  std::size_t layer_id = 0;
  double ratio = 0.0;
  std::size_t removed = 0;
  std::size_t removed_duplicates = 0;
  double baseline_accuracy = 0.0;
  double pruned_accuracy = 0.0;
  double final_accuracy = 0.0;
  double median_drift = 0.0;
  std::size_t recovery_snapshots = 0;
  double wall_ms = 0.0;
};

inline constexpr std::string_view kCompareHeader =
    "method,layer,ratio,removed,removed_duplicates,baseline_accuracy,pruned_accuracy,"
    "final_accuracy,median_drift,recovery_snapshots,wall_ms";

void write_compare_csv(std::ostream& out, std::span<const CompareRow> rows, bool include_wall = true);

struct CompareResult {
  std::vector<CompareRow> rows;
  std::vector<MetricsRecord> metrics;
  std::vector<std::string> skipped;
};

/// Both-method sweep with retraining and drift on the configured layers.
/// With an output directory it writes comparison.csv, metrics.csv,
/// checkpoints, pattern grids per snapshot, digests.txt and config.txt.
CompareResult compare(const nn::Model& baseline, std::span<const Method> methods,
                      const ExperimentConfig& config, const Datasets& data,
                      const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Same, reusing criteria already computed for this baseline over data.test.
CompareResult compare(const nn::Model& baseline, std::span<const Method> methods,
                      const ExperimentConfig& config, const Datasets& data, CriteriaCache& cache,
                      const std::optional<std::filesystem::path>& out_dir = std::nullopt);

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace prunelab::lab
