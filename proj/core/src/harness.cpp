#include "prunelab/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "prunelab/error.hpp"

namespace prunelab::lab {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto pos = text.find(',', start);
    const auto stop = pos == std::string_view::npos ? text.size() : pos;
    std::string item = trim(text.substr(start, stop - start));
    if (!item.empty()) parts.push_back(std::move(item));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

template <class T>
T parse_number(std::string_view key, std::string_view value) {
  const std::string text = trim(value);
  T out{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw Error(ErrorCode::kConfig, "bad value '" + std::string(value) + "' for " + std::string(key));
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  const std::string text = trim(value);
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw Error(ErrorCode::kConfig, "bad boolean '" + text + "' for " + std::string(key));
}

template <class T>
std::string format_number(T value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

std::string format_list(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += format_number(values[i]);
  }
  return out;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

std::string snapshot_name(std::size_t step) {
  std::ostringstream name;
  name << "snapshot_" << std::setw(6) << std::setfill('0') << step << ".prlb";
  return name.str();
}

std::string run_label(std::size_t layer, Method method, double ratio) {
  return "L" + std::to_string(layer) + "_" + std::string(to_string(method)) + "_r" + format_number(ratio);
}

// Draws batches epoch after epoch; each epoch reshuffles with its own seed,
// so a run split into several calls matches one uninterrupted run.
class SgdRunner {
 public:
  SgdRunner(const data::Dataset& train_set, std::size_t batch, std::uint64_t seed)
      : train_set_(train_set), batch_(batch), seed_(seed) {
    if (train_set.size() == 0) throw Error(ErrorCode::kConfig, "training set is empty");
  }

  double step(nn::Model& model, float lr, float momentum,
              const std::optional<std::filesystem::path>& out_dir) {
    if (!sequence_ || cursor_ == sequence_->size()) {
      sequence_.emplace(train_set_, batch_, seed_ + epoch_, true);
      ++epoch_;
      cursor_ = 0;
    }
    const data::Batch batch = (*sequence_)[cursor_++];
    const nn::ForwardTrace trace = nn::forward_trace(model, batch.images);
    const ops::LossResult loss = ops::softmax_xent(trace.output(), batch.labels);
    try {
      if (!std::isfinite(loss.loss)) {
        throw Error(ErrorCode::kDivergence,
                    "non-finite training loss at step " + std::to_string(model.step));
      }
      const nn::Gradients grads = nn::backward(model, trace, loss.grad_logits);
      nn::sgd_step(model, grads, lr, momentum);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDivergence || !out_dir) throw;
      const auto path = *out_dir / "last_good.prlb";
      ensure_dir(*out_dir);
      nn::save_checkpoint(model, path);
      throw Error(ErrorCode::kDivergence, std::string(e.what()) + "; last good checkpoint " + path.string());
    }
    return loss.loss;
  }

 private:
  const data::Dataset& train_set_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::optional<data::BatchSequence> sequence_;
};

std::uint64_t retrain_seed(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ull; }

}  // namespace

std::string_view to_string(Method method) {
  return method == Method::kL1 ? "l1" : "functional";
}

Method parse_method(std::string_view text) {
  if (text == "l1") return Method::kL1;
  if (text == "functional") return Method::kFunctional;
  throw Error(ErrorCode::kConfig, "unknown pruning method '" + std::string(text) +
                                      "' (expected l1 or functional)");
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& message) { throw Error(ErrorCode::kConfig, message); };
  if (dataset != "cifar10" && dataset != "mnist") fail("dataset must be cifar10 or mnist");
  if (!(lr > 0.0f) || !(retrain_lr > 0.0f)) fail("learning rates must be positive");
  if (!(momentum >= 0.0f && momentum < 1.0f)) fail("momentum must lie in [0, 1)");
  if (batch == 0) fail("batch must be >= 1");
  if (snapshot_interval == 0) fail("snapshot_interval must be >= 1");
  if (contribution_samples == 0) fail("contribution_samples must be >= 1");
  if (!(tau >= 0.0 && tau <= 100.0)) fail("tau must lie in [0, 100]");
  if (grid_columns == 0) fail("grid_columns must be >= 1");
  for (double r : ratios) {
    if (!(r > 0.0 && r < 1.0)) fail("pruning ratio " + format_number(r) + " outside (0, 1)");
  }
  try {
    am::validate(am);
  } catch (const Error& e) {
    fail(e.what());
  }
  try {
    nn::architecture(arch);
  } catch (const Error& e) {
    fail(e.what());
  }
}

std::size_t ExperimentConfig::worker_count() const {
  const std::size_t cap = worker_threads();
  return threads == 0 ? cap : std::min(threads, cap);
}

void set_config_value(ExperimentConfig& c, std::string_view key, std::string_view value) {
  const std::string v = trim(value);
  if (key == "arch") {
    c.arch = v;
  } else if (key == "dataset") {
    c.dataset = v;
  } else if (key == "data_dir") {
    c.data_dir = v;
  } else if (key == "train_size") {
    c.train_size = parse_number<std::size_t>(key, v);
  } else if (key == "test_size") {
    c.test_size = parse_number<std::size_t>(key, v);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "lr") {
    c.lr = parse_number<float>(key, v);
  } else if (key == "momentum") {
    c.momentum = parse_number<float>(key, v);
  } else if (key == "batch") {
    c.batch = parse_number<std::size_t>(key, v);
  } else if (key == "epochs") {
    c.epochs = parse_number<std::size_t>(key, v);
  } else if (key == "steps") {
    if (v == "auto" || v.empty()) {
      c.steps.reset();
    } else {
      c.steps = parse_number<std::size_t>(key, v);
    }
  } else if (key == "method") {
    c.method = parse_method(v);
  } else if (key == "layers") {
    c.layers = v;
  } else if (key == "ratios") {
    c.ratios.clear();
    for (const auto& item : split_list(v)) c.ratios.push_back(parse_number<double>(key, item));
  } else if (key == "k") {
    c.k = parse_number<std::size_t>(key, v);
  } else if (key == "tau") {
    c.tau = parse_number<double>(key, v);
  } else if (key == "contribution_samples") {
    c.contribution_samples = parse_number<std::size_t>(key, v);
  } else if (key == "modelwise") {
    c.modelwise = parse_bool(key, v);
  } else if (key == "am.eta") {
    c.am.eta = parse_number<double>(key, v);
  } else if (key == "am.iterations") {
    c.am.iterations = parse_number<std::size_t>(key, v);
  } else if (key == "am.seed") {
    c.am.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "am.init_scale") {
    c.am.init_scale = parse_number<float>(key, v);
  } else if (key == "am.normalize") {
    c.am.normalize_grad = parse_bool(key, v);
  } else if (key == "retrain_steps") {
    c.retrain_steps = parse_number<std::size_t>(key, v);
  } else if (key == "retrain_lr") {
    c.retrain_lr = parse_number<float>(key, v);
  } else if (key == "snapshot_interval") {
    c.snapshot_interval = parse_number<std::size_t>(key, v);
  } else if (key == "grid_filters") {
    c.grid_filters = parse_number<std::size_t>(key, v);
  } else if (key == "grid_columns") {
    c.grid_columns = parse_number<std::size_t>(key, v);
  } else if (key == "out") {
    c.out = v;
  } else if (key == "threads") {
    c.threads = parse_number<std::size_t>(key, v);
  } else {
    throw Error(ErrorCode::kConfig, "unknown config key '" + std::string(key) + "'");
  }
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig base) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    const auto pos = text.find('\n', start);
    std::string_view line = text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    start = pos == std::string_view::npos ? text.size() : pos + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorCode::kConfig, "config line " + std::to_string(line_no) + " lacks '='");
    }
    set_config_value(base, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfig, "cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), std::move(base));
}

std::string format_config(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "arch = " << c.arch << "\n";
  out << "dataset = " << c.dataset << "\n";
  out << "data_dir = " << c.data_dir.string() << "\n";
  out << "train_size = " << c.train_size << "\n";
  out << "test_size = " << c.test_size << "\n";
  out << "seed = " << c.seed << "\n";
  out << "lr = " << format_number(c.lr) << "\n";
  out << "momentum = " << format_number(c.momentum) << "\n";
  out << "batch = " << c.batch << "\n";
  out << "epochs = " << c.epochs << "\n";
  out << "steps = " << (c.steps ? std::to_string(*c.steps) : std::string("auto")) << "\n";
  out << "method = " << to_string(c.method) << "\n";
  out << "layers = " << c.layers << "\n";
  out << "ratios = " << format_list(c.ratios) << "\n";
  out << "k = " << c.k << "\n";
  out << "tau = " << format_number(c.tau) << "\n";
  out << "contribution_samples = " << c.contribution_samples << "\n";
  out << "modelwise = " << (c.modelwise ? "true" : "false") << "\n";
  out << "am.eta = " << format_number(c.am.eta) << "\n";
  out << "am.iterations = " << c.am.iterations << "\n";
  out << "am.seed = " << c.am.seed << "\n";
  out << "am.init_scale = " << format_number(c.am.init_scale) << "\n";
  out << "am.normalize = " << (c.am.normalize_grad ? "true" : "false") << "\n";
  out << "retrain_steps = " << c.retrain_steps << "\n";
  out << "retrain_lr = " << format_number(c.retrain_lr) << "\n";
  out << "snapshot_interval = " << c.snapshot_interval << "\n";
  out << "grid_filters = " << c.grid_filters << "\n";
  out << "grid_columns = " << c.grid_columns << "\n";
  out << "out = " << c.out.string() << "\n";
  out << "threads = " << c.threads << "\n";
  return out.str();
}

std::vector<std::size_t> resolve_layers(const nn::Model& model, std::string_view spec) {
  const auto convs = model.conv_layers();
  if (convs.empty()) throw Error(ErrorCode::kConfig, "model has no conv layers");
  if (spec == "last") return {convs.back()};
  if (spec == "all") return convs;
  std::vector<std::size_t> ids;
  for (const auto& item : split_list(spec)) {
    const auto id = parse_number<std::size_t>("layers", item);
    if (!model.is_conv(id)) {
      std::string valid;
      for (std::size_t c : convs) valid += (valid.empty() ? "" : ",") + std::to_string(c);
      throw Error(ErrorCode::kConfig,
                  "layer " + item + " is not a conv layer; valid conv layers: " + valid);
    }
    ids.push_back(id);
  }
  if (ids.empty()) throw Error(ErrorCode::kConfig, "no layers selected by '" + std::string(spec) + "'");
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::size_t removal_count(std::size_t filters, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(filters)));
}

namespace {

const std::filesystem::path& checked_data_dir(const ExperimentConfig& config) {
  if (!std::filesystem::is_directory(config.data_dir)) {
    throw Error(ErrorCode::kIo, "data directory " + config.data_dir.string() + " does not exist");
  }
  return config.data_dir;
}

}  // namespace

data::Dataset load_train_set(const ExperimentConfig& config) {
  const auto& dir = checked_data_dir(config);
  if (config.dataset == "mnist") {
    return data::load_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
                                config.train_size);
  }
  std::vector<std::filesystem::path> files;
  for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  return data::load_cifar10_bin(files, config.train_size);
}

data::Dataset load_test_set(const ExperimentConfig& config) {
  const auto& dir = checked_data_dir(config);
  if (config.dataset == "mnist") {
    return data::load_mnist_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte",
                                config.test_size);
  }
  const std::vector<std::filesystem::path> files{dir / "test_batch.bin"};
  return data::load_cifar10_bin(files, config.test_size);
}

Datasets load_datasets(const ExperimentConfig& config) {
  return {load_train_set(config), load_test_set(config)};
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records, bool include_wall) {
  out << kMetricsHeader << "\n";
  auto opt = [](double v) { return v < 0.0 ? std::string() : format_number(v); };
  for (const MetricsRecord& r : records) {
    out << r.kind << "," << (r.layer < 0 ? std::string("all") : std::to_string(r.layer)) << ","
        << r.method << "," << format_number(r.ratio) << "," << r.step << "," << opt(r.accuracy) << ","
        << opt(r.loss) << "," << opt(r.median_drift) << ","
        << (include_wall ? format_number(std::round(r.wall_ms * 1000.0) / 1000.0) : std::string())
        << "\n";
  }
}

double evaluate(const nn::Model& model, const data::Dataset& dataset) {
  if (dataset.size() == 0) throw Error(ErrorCode::kInvalidArgument, "cannot evaluate on an empty dataset");
  constexpr std::size_t kChunk = 250;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < dataset.size(); begin += kChunk) {
    const std::size_t count = std::min(kChunk, dataset.size() - begin);
    const data::Dataset chunk = data::slice(dataset, begin, count);
    const Tensor logits = nn::forward(model, chunk.images);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      const float* row = logits.ptr() + i * k;
      const auto best = static_cast<int>(std::max_element(row, row + k) - row);
      if (best == chunk.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

std::vector<MetricsRecord> train_steps(nn::Model& model, const data::Dataset& train_set,
                                       std::size_t steps, float lr, float momentum, std::size_t batch,
                                       std::uint64_t seed,
                                       const std::optional<std::filesystem::path>& out_dir) {
  std::vector<MetricsRecord> history;
  if (steps == 0) return history;
  SgdRunner runner(train_set, batch, seed);
  const auto start = Clock::now();
  for (std::size_t s = 0; s < steps; ++s) {
    const double loss = runner.step(model, lr, momentum, out_dir);
    MetricsRecord r;
    r.kind = "train";
    r.step = s + 1;
    r.loss = loss;
    r.wall_ms = elapsed_ms(start);
    history.push_back(r);
  }
  return history;
}

TrainResult train(const ExperimentConfig& config, const Datasets& data,
                  const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  const Shape& shape = data.train.images.shape();
  const nn::InputShape input{shape[1], shape[2], shape[3]};
  TrainResult result{nn::build_model(nn::architecture(config.arch), input, config.seed), {}};
  const std::size_t per_epoch = (data.train.size() + config.batch - 1) / config.batch;
  const std::size_t steps = config.steps.value_or(config.epochs * per_epoch);
  const auto start = Clock::now();
  result.history = train_steps(result.model, data.train, steps, config.lr, config.momentum,
                               config.batch, config.seed, out_dir);
  if (data.test.size() > 0) {
    MetricsRecord r;
    r.kind = "eval";
    r.step = steps;
    r.accuracy = evaluate(result.model, data.test);
    r.wall_ms = elapsed_ms(start);
    result.history.push_back(r);
  }
  if (out_dir) {
    ensure_dir(*out_dir);
    nn::save_checkpoint(result.model, *out_dir / "model.prlb");
  }
  return result;
}

LayerCriteria compute_criteria(const nn::Model& model, std::size_t layer_id,
                               const ExperimentConfig& config, const data::Dataset& samples) {
  const std::size_t filters = model.filter_count(layer_id);
  std::vector<std::size_t> ids(filters);
  for (std::size_t i = 0; i < filters; ++i) ids[i] = i;
  LayerCriteria criteria{layer_id, am::activation_maximize_all(model, layer_id, ids, config.am,
                                                               config.worker_count()),
                         {}};
  criteria.contributions = prune::contribution_index(
      model, samples, layer_id, std::min(config.contribution_samples, samples.size()));
  return criteria;
}

CriteriaCache::CriteriaCache(const nn::Model& model, const ExperimentConfig& config,
                             const data::Dataset& samples)
    : model_(&model), config_(&config), samples_(&samples) {}

const LayerCriteria& CriteriaCache::get(std::size_t layer_id) {
  auto it = cache_.find(layer_id);
  if (it == cache_.end()) {
    it = cache_.emplace(layer_id, compute_criteria(*model_, layer_id, *config_, *samples_)).first;
  }
  return it->second;
}

PlanOutcome build_plan(const nn::Model& model, Method method, std::span<const std::size_t> layer_ids,
                       double ratio, const ExperimentConfig& config, CriteriaCache& cache) {
  PlanOutcome outcome;
  std::vector<prune::FilterId> removals;
  for (std::size_t layer : layer_ids) {
    const std::size_t filters = model.filter_count(layer);
    const std::size_t m = removal_count(filters, ratio);
    if (m == 0) continue;
    outcome.layer_ids.push_back(layer);
    if (method == Method::kL1) {
      const auto plan = prune::l1_select(model, layer, m);
      removals.insert(removals.end(), plan.removals.begin(), plan.removals.end());
    } else {
      const LayerCriteria& criteria = cache.get(layer);
      const std::size_t k = config.k ? std::min(config.k, filters) : prune::default_cluster_count(filters);
      auto sel = prune::functional_select(model, layer, m, criteria.patterns, criteria.contributions,
                                          k, config.seed, config.tau);
      removals.insert(removals.end(), sel.plan.removals.begin(), sel.plan.removals.end());
      outcome.selections.push_back(std::move(sel));
    }
  }
  outcome.plan = prune::make_plan(model, removals);
  return outcome;
}

SweepResult accuracy_drop_sweep(const nn::Model& model, Method method,
                                std::span<const std::size_t> layer_ids, std::span<const double> ratios,
                                const ExperimentConfig& config, const Datasets& data,
                                CriteriaCache& cache, SweepScope scope) {
  std::vector<double> sorted(ratios.begin(), ratios.end());
  std::sort(sorted.begin(), sorted.end());
  SweepResult result;
  auto run = [&](const std::string& kind, long layer, std::span<const std::size_t> targets) {
    for (double ratio : sorted) {
      const auto start = Clock::now();
      try {
        const PlanOutcome outcome = build_plan(model, method, targets, ratio, config, cache);
        const nn::Model pruned = prune::apply_prune(model, outcome.plan);
        MetricsRecord r;
        r.kind = kind;
        r.layer = layer;
        r.method = std::string(to_string(method));
        r.ratio = ratio;
        r.accuracy = evaluate(pruned, data.test);
        r.wall_ms = elapsed_ms(start);
        result.records.push_back(r);
      } catch (const InfeasibleError& e) {
        result.skipped.push_back(kind + " layer " + (layer < 0 ? std::string("all") : std::to_string(layer)) +
                                 " ratio " + format_number(ratio) + ": " + e.what());
      }
    }
  };
  if (scope.layerwise) {
    for (std::size_t layer : layer_ids) {
      const std::size_t one[] = {layer};
      run("layerwise", static_cast<long>(layer), one);
    }
  }
  if (scope.modelwise) {
    const auto all = model.conv_layers();
    run("modelwise", -1, all);
  }
  return result;
}

std::size_t snapshot_count(std::size_t steps, std::size_t interval) {
  if (interval == 0) throw Error(ErrorCode::kInvalidArgument, "snapshot interval must be >= 1");
  return steps / interval + 1 + (steps % interval != 0 ? 1 : 0);
}

RetrainResult retrain_with_snapshots(const nn::Model& pruned, const ExperimentConfig& config,
                                     const Datasets& data, std::string_view label,
                                     const std::optional<std::filesystem::path>& snapshot_dir) {
  config.validate();
  nn::validate(pruned);
  RetrainResult result;
  nn::Model model = pruned;
  if (snapshot_dir) ensure_dir(*snapshot_dir);
  const auto start = Clock::now();
  std::vector<double> window;

  auto record = [&](std::size_t step) {
    MetricsRecord r;
    r.kind = "recovery";
    r.method = std::string(label);
    r.step = step;
    r.accuracy = evaluate(model, data.test);
    if (!window.empty()) {
      double sum = 0.0;
      for (double l : window) sum += l;
      r.loss = sum / static_cast<double>(window.size());
    }
    window.clear();
    r.wall_ms = elapsed_ms(start);
    result.records.push_back(r);
    if (snapshot_dir) nn::save_checkpoint(model, *snapshot_dir / snapshot_name(step));
    result.snapshots.push_back({step, model});
  };

  record(0);
  if (config.retrain_steps == 0) return result;
  SgdRunner runner(data.train, config.batch, retrain_seed(config.seed));
  for (std::size_t s = 1; s <= config.retrain_steps; ++s) {
    window.push_back(runner.step(model, config.retrain_lr, config.momentum, snapshot_dir));
    if (s % config.snapshot_interval == 0 || s == config.retrain_steps) record(s);
  }
  return result;
}

SurvivorMap survivor_map(const prune::PrunePlan& plan, std::size_t layer_id, std::size_t filter_count) {
  SurvivorMap map;
  if (const prune::LayerPlan* lp = plan.layer(layer_id)) {
    for (std::size_t i = 0; i < lp->survivors.size(); ++i) map.emplace_back(lp->survivors[i], i);
  } else {
    for (std::size_t i = 0; i < filter_count; ++i) map.emplace_back(i, i);
  }
  return map;
}

std::vector<double> pattern_drift(std::span<const am::Pattern> before_patterns, const nn::Model& after,
                                  std::size_t layer_id, const SurvivorMap& survivors,
                                  const am::AmConfig& config, std::size_t threads) {
  const std::size_t after_count = after.filter_count(layer_id);
  std::vector<std::size_t> new_ids;
  for (const auto& [old_id, new_id] : survivors) {
    if (old_id >= before_patterns.size() || new_id >= after_count) {
      throw Error(ErrorCode::kOutOfRange, "survivor pair (" + std::to_string(old_id) + ", " +
                                              std::to_string(new_id) + ") is not mapped at layer " +
                                              std::to_string(layer_id));
    }
    new_ids.push_back(new_id);
  }
  const auto after_patterns = am::activation_maximize_all(after, layer_id, new_ids, config, threads);
  std::vector<double> drift(survivors.size());
  for (std::size_t i = 0; i < survivors.size(); ++i) {
    drift[i] = am::pattern_distance(before_patterns[survivors[i].first], after_patterns[i]);
  }
  return drift;
}

std::vector<double> pattern_drift(const nn::Model& before, const nn::Model& after,
                                  std::size_t layer_id, const SurvivorMap& survivors,
                                  const am::AmConfig& config, std::size_t threads) {
  const std::size_t before_count = before.filter_count(layer_id);
  std::vector<std::size_t> old_ids;
  for (const auto& pair : survivors) {
    if (pair.first >= before_count) {
      throw Error(ErrorCode::kOutOfRange, "survivor " + std::to_string(pair.first) +
                                              " is not a filter of the original layer " +
                                              std::to_string(layer_id));
    }
    old_ids.push_back(pair.first);
  }
  // Only the referenced filters are synthesized; others stay empty.
  std::vector<am::Pattern> before_patterns(before_count);
  std::vector<std::size_t> unique_ids = old_ids;
  std::sort(unique_ids.begin(), unique_ids.end());
  unique_ids.erase(std::unique(unique_ids.begin(), unique_ids.end()), unique_ids.end());
  auto computed = am::activation_maximize_all(before, layer_id, unique_ids, config, threads);
  for (std::size_t i = 0; i < unique_ids.size(); ++i) before_patterns[unique_ids[i]] = std::move(computed[i]);
  return pattern_drift(before_patterns, after, layer_id, survivors, config, threads);
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::kInvalidArgument, "median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

std::size_t snapshots_to_recover(std::span<const MetricsRecord> recovery, double tolerance) {
  if (recovery.empty()) throw Error(ErrorCode::kInvalidArgument, "empty recovery curve");
  const double final_accuracy = recovery.back().accuracy;
  for (std::size_t i = 0; i < recovery.size(); ++i) {
    if (std::fabs(recovery[i].accuracy - final_accuracy) <= tolerance) return i;
  }
  return recovery.size() - 1;
}

std::vector<std::size_t> duplicate_filters(const nn::Model& model, std::size_t layer_id) {
  const std::size_t filters = model.filter_count(layer_id);
  const Tensor& w = model.params[layer_id].weights;
  const Tensor& b = model.params[layer_id].bias;
  const std::size_t per = w.size() / filters;
  std::vector<std::size_t> dups;
  for (std::size_t i = 0; i < filters; ++i) {
    for (std::size_t j = 0; j < filters; ++j) {
      if (i != j && std::memcmp(w.ptr() + i * per, w.ptr() + j * per, per * sizeof(float)) == 0 &&
          std::memcmp(b.ptr() + i, b.ptr() + j, sizeof(float)) == 0) {
        dups.push_back(i);
        break;
      }
    }
  }
  return dups;
}

void write_compare_csv(std::ostream& out, std::span<const CompareRow> rows, bool include_wall) {
  out << kCompareHeader << "\n";
  for (const CompareRow& r : rows) {
    out << to_string(r.method) << "," << r.layer_id << "," << format_number(r.ratio) << ","
        << r.removed << "," << r.removed_duplicates << "," << format_number(r.baseline_accuracy) << ","
        << format_number(r.pruned_accuracy) << "," << format_number(r.final_accuracy) << ","
        << format_number(r.median_drift) << "," << r.recovery_snapshots << ","
        << (include_wall ? format_number(std::round(r.wall_ms)) : std::string()) << "\n";
  }
}

CompareResult compare(const nn::Model& baseline, std::span<const Method> methods,
                      const ExperimentConfig& config, const Datasets& data,
                      const std::optional<std::filesystem::path>& out_dir) {
  CriteriaCache cache(baseline, config, data.test);
  return compare(baseline, methods, config, data, cache, out_dir);
}

CompareResult compare(const nn::Model& baseline, std::span<const Method> methods,
                      const ExperimentConfig& config, const Datasets& data, CriteriaCache& cache,
                      const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  const auto layers = resolve_layers(baseline, config.layers);
  std::vector<double> ratios = config.ratios;
  std::sort(ratios.begin(), ratios.end());
  if (out_dir) {
    ensure_dir(*out_dir);
    ensure_dir(*out_dir / "grids");
    ensure_dir(*out_dir / "checkpoints");
    write_text(*out_dir / "config.txt", format_config(config));
    nn::save_checkpoint(baseline, *out_dir / "checkpoints" / "baseline.prlb");
  }

  CompareResult result;
  const double baseline_accuracy = evaluate(baseline, data.test);
  MetricsRecord base_record;
  base_record.kind = "baseline";
  base_record.accuracy = baseline_accuracy;
  result.metrics.push_back(base_record);

  for (std::size_t layer : layers) {
    const auto duplicates = duplicate_filters(baseline, layer);
    for (Method method : methods) {
      for (double ratio : ratios) {
        const auto start = Clock::now();
        const std::size_t one[] = {layer};
        PlanOutcome outcome;
        try {
          outcome = build_plan(baseline, method, one, ratio, config, cache);
        } catch (const InfeasibleError& e) {
          result.skipped.push_back(run_label(layer, method, ratio) + ": " + e.what());
          continue;
        }
        const std::string label(to_string(method));
        const nn::Model pruned = prune::apply_prune(baseline, outcome.plan);
        const auto ckpt_dir = out_dir ? std::optional(*out_dir / "checkpoints" / run_label(layer, method, ratio))
                                      : std::nullopt;
        RetrainResult retrain = retrain_with_snapshots(pruned, config, data, label, ckpt_dir);
        const SurvivorMap survivors = survivor_map(outcome.plan, layer, baseline.filter_count(layer));
        const LayerCriteria& criteria = cache.get(layer);
        const auto drift = pattern_drift(criteria.patterns, retrain.snapshots.back().model, layer,
                                         survivors, config.am, config.worker_count());

        CompareRow row;
        row.method = method;
        row.layer_id = layer;
        row.ratio = ratio;
        row.removed = outcome.plan.removals.size();
        for (const auto& id : outcome.plan.removals) {
          if (std::binary_search(duplicates.begin(), duplicates.end(), id.filter_index)) {
            ++row.removed_duplicates;
          }
        }
        row.baseline_accuracy = baseline_accuracy;
        row.pruned_accuracy = retrain.records.front().accuracy;
        row.final_accuracy = retrain.records.back().accuracy;
        row.median_drift = median(drift);
        row.recovery_snapshots = snapshots_to_recover(retrain.records);

        for (MetricsRecord r : retrain.records) {
          r.layer = static_cast<long>(layer);
          r.ratio = ratio;
          result.metrics.push_back(r);
        }
        MetricsRecord drift_record;
        drift_record.kind = "drift";
        drift_record.layer = static_cast<long>(layer);
        drift_record.method = label;
        drift_record.ratio = ratio;
        drift_record.step = retrain.snapshots.back().step;
        drift_record.median_drift = row.median_drift;
        result.metrics.push_back(drift_record);

        if (out_dir && config.grid_filters > 0) {
          const std::size_t shown = std::min(config.grid_filters, survivors.size());
          const std::string stem = run_label(layer, method, ratio);
          std::vector<am::Pattern> before;
          std::vector<std::size_t> new_ids;
          for (std::size_t i = 0; i < shown; ++i) {
            before.push_back(criteria.patterns[survivors[i].first]);
            new_ids.push_back(survivors[i].second);
          }
          am::export_grid_ppm(before, config.grid_columns, *out_dir / "grids" / (stem + "_original.ppm"));
          for (const Snapshot& snap : retrain.snapshots) {
            const auto patterns =
                am::activation_maximize_all(snap.model, layer, new_ids, config.am, config.worker_count());
            std::ostringstream name;
            name << stem << "_step" << std::setw(6) << std::setfill('0') << snap.step << ".ppm";
            am::export_grid_ppm(patterns, config.grid_columns, *out_dir / "grids" / name.str());
          }
        }
        row.wall_ms = elapsed_ms(start);
        result.rows.push_back(row);
      }
    }
  }

  if (out_dir) {
    std::ostringstream comparison, metrics, digests;
    write_compare_csv(comparison, result.rows);
    write_metrics_csv(metrics, result.metrics);
    write_text(*out_dir / "comparison.csv", comparison.str());
    write_text(*out_dir / "metrics.csv", metrics.str());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(*out_dir / "checkpoints")) {
      if (entry.is_regular_file() && entry.path().extension() == ".prlb") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      digests << file_sha256(f) << "  " << std::filesystem::relative(f, *out_dir).generic_string() << "\n";
    }
    write_text(*out_dir / "digests.txt", digests.str());
    if (!result.skipped.empty()) {
      std::string text;
      for (const auto& s : result.skipped) text += s + "\n";
      write_text(*out_dir / "skipped.txt", text);
    }
  }
  return result;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kIo, "SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return sha256_hex(buffer.str());
}

}  // namespace prunelab::lab
