#pragma once

// Losses, Adam, the training loop with best-validation selection, and
// evaluation metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "glstm/models.hpp"
#include "glstm/tasks.hpp"

namespace glstm {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  std::size_t patience = 20;
  /// Global L2 gradient clip; 0 disables.
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  /// Draw a new training set every epoch instead of reusing one.
  bool fresh_sampling = false;
  /// Stop as soon as the validation metric reaches this value (accuracy) or
  /// falls to it (error metrics). NaN disables.
  double stop_at = std::numeric_limits<double>::quiet_NaN();

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (patience < 1) throw ConfigError("train.patience must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
    if (weight_decay < 0.0 || grad_clip < 0.0) throw ConfigError("train.weight_decay and train.grad_clip must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

inline AdamState adam_init(const ParamStore& p) {
  AdamState s;
  for (const auto& [_, t] : p.items()) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

inline double global_norm(const std::vector<std::vector<double>>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double x : g) s += x * x;
  return std::sqrt(s);
}

/// One bias-corrected Adam update. Gradients are clipped by global L2 norm
/// first; weight decay is decoupled from the moment estimates.
inline void adam_step(ParamStore& params, std::vector<std::vector<double>> grads, AdamState& s,
                      const TrainConfig& c) {
  if (grads.size() != params.size() || s.m.size() != params.size())
    throw std::invalid_argument("adam_step: gradient/parameter layout mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params.items()[i].second.size())
      throw ShapeError("adam_step", "gradient size mismatch for '" + params.items()[i].first + "'");
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in '" + params.items()[i].first + "'");
  }
  if (c.grad_clip > 0.0) {
    const double norm = global_norm(grads);
    if (norm > c.grad_clip) {
      const double f = c.grad_clip / norm;
      for (auto& g : grads)
        for (double& x : g) x *= f;
    }
  }
  ++s.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto w = params.items()[i].second.mutable_data();
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grads[i][j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      w[j] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * w[j]);
    }
  }
}

// ---------------------------------------------------------------------------
// Task/model glue

/// Sets input/output layout and readout for the task.
inline void configure_model_for_task(ModelConfig& m, const TaskSpec& t) {
  m.output_dim = task_output_dim(t);
  if (t.kind == TaskKind::kNar) {
    m.input_kind = InputKind::kSymbols;
    m.input_dim = t.neighbors;
  } else {
    m.input_kind = InputKind::kFeatures;
    m.input_dim = task_input_width(t);
  }
  switch (t.kind) {
    case TaskKind::kDiameter: m.readout = Readout::kMeanPool; break;
    case TaskKind::kEccentricity:
    case TaskKind::kSssp: m.readout = Readout::kAllNodes; break;
    default: m.readout = Readout::kTargetNode; break;
  }
}

enum class Metric { kAccuracy, kMse, kLog10Mse };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::kAccuracy: return "accuracy";
    case Metric::kMse: return "mse";
    case Metric::kLog10Mse: return "log10_mse";
  }
  return "?";
}

inline Metric task_metric(TaskKind k) {
  if (is_classification(k)) return Metric::kAccuracy;
  if (is_gpp(k)) return Metric::kLog10Mse;
  return Metric::kMse;
}

inline bool higher_is_better(Metric m) { return m == Metric::kAccuracy; }

inline constexpr double kLog10MseFloor = -12.0;

inline double log10_mse(double mse) {
  if (!(mse > 0.0)) return kLog10MseFloor;
  return std::max(std::log10(mse), kLog10MseFloor);
}

/// Per-instance neighborhoods, computed once per (instances, layers, k_hop).
struct PreparedInstances {
  const std::vector<TaskInstance>* instances = nullptr;
  std::vector<LayerNeighborhoods> neighborhoods;

  std::size_t size() const { return instances->size(); }
  const TaskInstance& operator[](std::size_t i) const { return (*instances)[i]; }
};

inline PreparedInstances prepare_instances(const std::vector<TaskInstance>& xs, const ModelConfig& cfg) {
  PreparedInstances p;
  p.instances = &xs;
  p.neighborhoods.reserve(xs.size());
  for (const auto& x : xs) p.neighborhoods.push_back(layer_neighborhoods(x.graph, cfg.layers, cfg.k_hop));
  return p;
}

struct TaskBatch {
  GraphBatch graphs;
  std::vector<std::size_t> labels;
  /// Regression targets shaped like the model output.
  Tensor values;
};

inline TaskBatch make_task_batch(const PreparedInstances& p, std::span<const std::size_t> idx,
                                 const ModelConfig& cfg) {
  std::vector<const Graph*> gs;
  std::vector<const LayerNeighborhoods*> nbs;
  std::vector<std::size_t> targets;
  TaskBatch b;
  std::vector<double> vals;
  for (std::size_t i : idx) {
    const auto& x = p[i];
    gs.push_back(&x.graph);
    nbs.push_back(&p.neighborhoods[i]);
    targets.push_back(x.target_node);
    b.labels.push_back(x.label);
    vals.insert(vals.end(), x.target.begin(), x.target.end());
  }
  b.graphs = make_batch(gs, nbs, targets);
  if (!vals.empty()) {
    const std::size_t rows = cfg.readout == Readout::kAllNodes ? b.graphs.n_nodes : idx.size();
    if (vals.size() % rows != 0) throw ShapeError("make_task_batch", "targets do not match the readout layout");
    const std::size_t cols = vals.size() / rows;
    b.values = Tensor::matrix(rows, cols, std::move(vals));
  }
  return b;
}

inline Tensor task_loss(TaskKind kind, const Tensor& output, const TaskBatch& b) {
  if (is_classification(kind)) return cross_entropy(output, b.labels);
  return mse_loss(output, b.values);
}

// ---------------------------------------------------------------------------
// Evaluation

struct InstanceRecord {
  std::size_t index = 0;
  /// Argmax class (classification) or 0.
  std::size_t prediction = 0;
  bool correct = false;
  /// Squared error averaged over the instance's coordinates (regression).
  double mse = 0.0;
};

struct EvalResult {
  Metric metric = Metric::kAccuracy;
  double value = 0.0;
  double mean_loss = 0.0;
  std::vector<InstanceRecord> records;
};

/// Accuracy: fraction of argmax-correct instances. MSE: per-instance mean
/// over coordinates, averaged over instances; log10 is taken after averaging.
inline EvalResult evaluate(const ModelConfig& cfg, const ParamStore& params, const PreparedInstances& xs,
                           TaskKind kind, std::size_t batch_size = 256) {
  if (xs.size() == 0) throw std::invalid_argument("evaluate: empty split");
  EvalResult r;
  r.metric = task_metric(kind);
  double loss_sum = 0.0, correct = 0.0, mse_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < xs.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(xs.size(), start + batch_size); ++i) idx.push_back(i);
    const TaskBatch b = make_task_batch(xs, idx, cfg);
    const Tensor out = model_forward(cfg, params, b.graphs).output.detach();
    loss_sum += task_loss(kind, out, b).item() * static_cast<double>(idx.size());
    const std::size_t w = out.dim(1);
    std::size_t node_row = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      InstanceRecord rec;
      rec.index = idx[k];
      if (is_classification(kind)) {
        const double* row = out.data().data() + k * w;
        rec.prediction = static_cast<std::size_t>(std::max_element(row, row + w) - row);
        rec.correct = rec.prediction == b.labels[k];
        correct += rec.correct ? 1.0 : 0.0;
      } else {
        const std::size_t rows = cfg.readout == Readout::kAllNodes ? xs[idx[k]].graph.n_nodes() : 1;
        const std::size_t first = cfg.readout == Readout::kAllNodes ? node_row : k;
        double se = 0.0;
        for (std::size_t rr = first; rr < first + rows; ++rr)
          for (std::size_t j = 0; j < w; ++j) {
            const double d = out.at(rr, j) - b.values.at(rr, j);
            se += d * d;
          }
        node_row += rows;
        rec.mse = se / static_cast<double>(rows * w);
        mse_sum += rec.mse;
      }
      r.records.push_back(rec);
    }
  }
  const double n = static_cast<double>(xs.size());
  r.mean_loss = loss_sum / n;
  switch (r.metric) {
    case Metric::kAccuracy: r.value = correct / n; break;
    case Metric::kMse: r.value = mse_sum / n; break;
    case Metric::kLog10Mse: r.value = log10_mse(mse_sum / n); break;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct RunReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string task;
  std::string model;
  std::string metric;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_metric = 0.0;
  double test_metric = 0.0;
  double train_loss_initial = 0.0;
  double train_loss_final = 0.0;
  std::size_t steps = 0;
  std::size_t parameter_count = 0;
  double wall_clock_seconds = 0.0;
  bool aborted = false;
  std::string abort_reason;
  /// Free-form run descriptors (sweep point values, resolved configs).
  std::map<std::string, std::string> labels;
};

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json j;
  j["config_hash"] = r.config_hash;
  j["seed"] = r.seed;
  j["task"] = r.task;
  j["model"] = r.model;
  j["metric"] = r.metric;
  j["best_epoch"] = r.best_epoch;
  j["best_val_metric"] = r.best_val_metric;
  j["test_metric"] = r.test_metric;
  j["train_loss_initial"] = r.train_loss_initial;
  j["train_loss_final"] = r.train_loss_final;
  j["steps"] = r.steps;
  j["parameter_count"] = r.parameter_count;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  j["aborted"] = r.aborted;
  j["abort_reason"] = r.abort_reason;
  j["labels"] = r.labels;
  auto& e = j["epochs"] = nlohmann::json::array();
  for (const auto& x : r.epochs) e.push_back({{"epoch", x.epoch}, {"train_loss", x.train_loss}, {"val_metric", x.val_metric}});
  return j;
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.task = j.at("task").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.best_val_metric = j.at("best_val_metric").get<double>();
  r.test_metric = j.at("test_metric").get<double>();
  r.train_loss_initial = j.at("train_loss_initial").get<double>();
  r.train_loss_final = j.at("train_loss_final").get<double>();
  r.steps = j.at("steps").get<std::size_t>();
  r.parameter_count = j.at("parameter_count").get<std::size_t>();
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  r.aborted = j.at("aborted").get<bool>();
  r.abort_reason = j.at("abort_reason").get<std::string>();
  r.labels = j.at("labels").get<std::map<std::string, std::string>>();
  for (const auto& e : j.at("epochs"))
    r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("val_metric").get<double>()});
  return r;
}

inline void write_metrics_csv(std::ostream& os, const RunReport& r) {
  os << "epoch,train_loss,val_metric\n";
  for (const auto& e : r.epochs)
    os << e.epoch << ',' << format_real(e.train_loss) << ',' << format_real(e.val_metric) << '\n';
}

struct TrainResult {
  RunReport report;
  /// Parameters from the epoch with the best validation metric.
  ParamStore params;
};

/// Optional per-epoch observer; return false to stop training early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

inline bool metric_improves(Metric m, double candidate, double best) {
  return higher_is_better(m) ? candidate > best : candidate < best;
}

inline double mean_train_loss(const ModelConfig& cfg, const ParamStore& params, const PreparedInstances& xs,
                              TaskKind kind) {
  return evaluate(cfg, params, xs, kind).mean_loss;
}

inline TrainResult train(ModelConfig cfg, const TaskSplit& split, const TrainConfig& tc,
                         const EpochCallback& on_epoch = {}) {
  tc.validate();
  if (split.train.empty() || split.validation.empty() || split.test.empty())
    throw std::invalid_argument("train: split has an empty part");
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const TaskKind kind = split.spec.kind;
  const Metric metric = task_metric(kind);

  Rng init_rng(derive_seed(tc.seed, 0x1417));
  ParamStore params = init_params(cfg, init_rng);
  AdamState adam = adam_init(params);

  TrainResult res;
  RunReport& rep = res.report;
  rep.seed = tc.seed;
  rep.task = task_name(kind);
  rep.model = model_config_text(cfg);
  rep.metric = metric_name(metric);
  rep.parameter_count = params.parameter_count();

  std::vector<TaskInstance> fresh;
  PreparedInstances train_set = prepare_instances(split.train, cfg);
  const PreparedInstances val_set = prepare_instances(split.validation, cfg);
  const PreparedInstances test_set = prepare_instances(split.test, cfg);

  // fixed subset used for the initial/final train loss comparison
  const std::vector<TaskInstance> probe_xs(split.train.begin(),
                                           split.train.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(split.train.size(), 1000)));
  const PreparedInstances probe_set = prepare_instances(probe_xs, cfg);
  rep.train_loss_initial = mean_train_loss(cfg, params, probe_set, kind);

  ParamStore best = params.clone();
  double best_val = higher_is_better(metric) ? -std::numeric_limits<double>::infinity()
                                             : std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  Rng dropout_rng(derive_seed(tc.seed, 0xd70));

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    if (tc.fresh_sampling && epoch > 1) {
      fresh = generate_instances(split.spec, split.train.size(),
                                 derive_seed(part_seed(split.seed, SplitPart::kTrain), epoch));
      train_set = prepare_instances(fresh, cfg);
    }
    Rng order_rng(derive_seed(tc.seed, 0x5000 + epoch));
    const auto order = order_rng.permutation(train_set.size());
    double loss_sum = 0.0;
    std::size_t seen = 0;
    bool diverged = false;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const TaskBatch b = make_task_batch(train_set, idx, cfg);
      ForwardOptions fo;
      fo.training = true;
      fo.rng = &dropout_rng;
      const Tensor loss = task_loss(kind, model_forward(cfg, params, b.graphs, fo).output, b);
      if (!std::isfinite(loss.item())) {
        diverged = true;
        break;
      }
      const GradientMap grads = backpropagate(loss);
      std::vector<std::vector<double>> g;
      for (const auto& [_, t] : params.items()) g.push_back(grads.grad(t).values());
      try {
        adam_step(params, std::move(g), adam, tc);
      } catch (const NumericError&) {
        diverged = true;
        break;
      }
      ++rep.steps;
      loss_sum += loss.item() * static_cast<double>(idx.size());
      seen += idx.size();
    }
    if (diverged) {
      rep.aborted = true;
      rep.abort_reason = "non-finite loss or gradient in epoch " + std::to_string(epoch);
      break;
    }
    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = loss_sum / static_cast<double>(seen);
    er.val_metric = evaluate(cfg, params, val_set, kind).value;
    rep.epochs.push_back(er);
    if (metric_improves(metric, er.val_metric, best_val)) {
      best_val = er.val_metric;
      rep.best_epoch = epoch;
      best.copy_values_from(params);
      since_best = 0;
    } else {
      ++since_best;
    }
    if (on_epoch && !on_epoch(er)) break;
    if (since_best >= tc.patience) break;
    if (std::isfinite(tc.stop_at) &&
        (higher_is_better(metric) ? best_val >= tc.stop_at : best_val <= tc.stop_at))
      break;
  }

  rep.best_val_metric = rep.best_epoch ? best_val : evaluate(cfg, best, val_set, kind).value;
  rep.train_loss_final = mean_train_loss(cfg, best, probe_set, kind);
  rep.test_metric = evaluate(cfg, best, test_set, kind).value;
  rep.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.params = std::move(best);
  return res;
}

}  // namespace glstm
