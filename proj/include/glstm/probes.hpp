#pragma once

// Sensitivity diagnostics: node Jacobians, selected/background Jacobian-norm
// ratios, the restricted mixed-second-derivative metric, and the flat vs deep
// tree probe.
//
// Instances in a batch are disjoint graphs, so seeding output coordinate r at
// every graph's target node in one reverse pass yields each graph's own
// Jacobian row r at once.

#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "glstm/models.hpp"
#include "glstm/tasks.hpp"
#include "glstm/train.hpp"

namespace glstm {

/// Analytic Jacobians of the final node state h^(L) at one target row per
/// graph with respect to the whole input matrix x. Result[g] is
/// [d_h, n_nodes * d_in] over the batch (only graph g's columns are nonzero).
/// `params` should be frozen so only input paths are recorded.
inline std::vector<Eigen::MatrixXd> target_jacobians(const ModelConfig& cfg, const ParamStore& params,
                                                     const GraphBatch& b, const Tensor& x,
                                                     std::span<const std::size_t> target_rows) {
  Tensor leaf = x.detach(true);
  const Tensor h = model_forward(cfg, params, b, leaf).node_states;
  const std::size_t dh = h.dim(1);
  for (double v : h.data())
    if (!std::isfinite(v)) throw NumericError("target_jacobians: non-finite forward pass");
  std::vector<Eigen::MatrixXd> out(target_rows.size(), Eigen::MatrixXd::Zero(dh, static_cast<Eigen::Index>(x.size())));
  std::vector<double> seed(h.size(), 0.0);
  for (std::size_t r = 0; r < dh; ++r) {
    std::fill(seed.begin(), seed.end(), 0.0);
    for (std::size_t t : target_rows) seed[t * dh + r] = 1.0;
    const GradientMap gm = backpropagate_seeded(h, seed);
    const auto* g = gm.find(leaf);
    if (!g) continue;
    for (std::size_t gi = 0; gi < target_rows.size(); ++gi) {
      // columns of other graphs stay zero; copy only this graph's block
      const std::size_t w = x.dim(1);
      const std::size_t lo = b.node_offset[gi] * w;
      const std::size_t hi = (gi + 1 < b.n_graphs ? b.node_offset[gi + 1] : b.n_nodes) * w;
      for (std::size_t c = lo; c < hi; ++c) {
        if (!std::isfinite((*g)[c])) throw NumericError("target_jacobians: non-finite gradient", c);
        out[gi](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = (*g)[c];
      }
    }
  }
  return out;
}

/// d_out x d_in Jacobian of h_t^(L) with respect to the input features of
/// node s: row r is the gradient of output coordinate r.
inline Eigen::MatrixXd node_jacobian(const ModelConfig& cfg, const ParamStore& params, const GraphBatch& b,
                                     const Tensor& x, std::size_t t, std::size_t s) {
  const ParamStore frozen = params.frozen();
  const std::size_t target = t;
  const auto j = target_jacobians(cfg, frozen, b, x, std::span<const std::size_t>(&target, 1));
  const auto w = static_cast<Eigen::Index>(x.dim(1));
  return j[0].middleCols(static_cast<Eigen::Index>(s) * w, w);
}

inline Eigen::MatrixXd node_jacobian(const ModelConfig& cfg, const ParamStore& params, const Graph& g,
                                     std::size_t t, std::size_t s) {
  const GraphBatch b = make_batch(g, cfg.layers, cfg.k_hop, t);
  return node_jacobian(cfg, params, b, embed_inputs(cfg, params, b), t, s);
}

inline double l1_norm(const Eigen::MatrixXd& m) { return m.cwiseAbs().sum(); }

// ---------------------------------------------------------------------------
// Selected vs background Jacobian norms

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

/// Mean and population standard deviation; non-finite entries are skipped.
inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  double sum = 0.0;
  for (double x : xs)
    if (std::isfinite(x)) {
      sum += x;
      ++s.n;
    }
  if (s.n == 0) {
    s.mean = s.std = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (double x : xs)
    if (std::isfinite(x)) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(s.n));
  return s;
}

struct InstanceJacobian {
  /// L1 norm per neighbor node (index = neighbor node id).
  std::vector<double> norms;
  double selected = 0.0;
  double background = 0.0;
  /// selected / background; NaN when there is no background neighbor or its
  /// mean norm is zero.
  double ratio = std::numeric_limits<double>::quiet_NaN();
};

struct JacobianReport {
  std::vector<InstanceJacobian> instances;
  Summary selected;
  Summary background;
  Summary ratio;
};

/// ‖∂h_target^(L)/∂x_n‖₁ for every neighbor n of NAR/NARR instances, split
/// into the neighbor whose key matches the query and the rest.
inline JacobianReport jacobian_report(const ModelConfig& cfg, const ParamStore& params,
                                      const std::vector<TaskInstance>& xs, std::size_t batch_size = 64) {
  const ParamStore frozen = params.frozen();
  const PreparedInstances prep = prepare_instances(xs, cfg);
  JacobianReport rep;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < xs.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(xs.size(), start + batch_size); ++i) idx.push_back(i);
    const TaskBatch tb = make_task_batch(prep, idx, cfg);
    const Tensor x = embed_inputs(cfg, frozen, tb.graphs);
    const auto jac = target_jacobians(cfg, frozen, tb.graphs, x, tb.graphs.targets);
    const auto w = static_cast<Eigen::Index>(x.dim(1));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const TaskInstance& inst = xs[idx[k]];
      InstanceJacobian ij;
      const std::size_t n_nb = inst.keys.size();
      double bg = 0.0;
      for (std::size_t nb = 0; nb < n_nb; ++nb) {
        const auto col = static_cast<Eigen::Index>(tb.graphs.node_offset[k] + nb) * w;
        const double norm = jac[k].middleCols(col, w).cwiseAbs().sum();
        ij.norms.push_back(norm);
        if (nb == inst.selected) ij.selected = norm;
        else bg += norm;
      }
      if (n_nb > 1) {
        ij.background = bg / static_cast<double>(n_nb - 1);
        if (ij.background > 0.0) ij.ratio = ij.selected / ij.background;
      }
      rep.instances.push_back(std::move(ij));
    }
  }
  std::vector<double> sel, bgv, ratio;
  for (const auto& ij : rep.instances) {
    sel.push_back(ij.selected);
    if (ij.norms.size() > 1) bgv.push_back(ij.background);
    ratio.push_back(ij.ratio);
  }
  rep.selected = summarize(sel);
  rep.background = summarize(bgv);
  rep.ratio = summarize(ratio);
  return rep;
}

// ---------------------------------------------------------------------------
// Mixed second derivatives

/// Input coordinate ranges of the restricted metric: [beta_begin, beta_end)
/// of the query node and [gamma_begin, gamma_end) of the neighbor node.
struct MixingRanges {
  std::size_t beta_begin = 0, beta_end = 0;
  std::size_t gamma_begin = 0, gamma_end = 0;
  /// Central-difference step is rel_step * (1 + |x|).
  double rel_step = 1e-4;
};

/// Query-key and neighbor-value coordinate ranges of symbol-embedded NAR inputs.
inline MixingRanges nar_mixing_ranges(const ModelConfig& cfg) {
  return {0, cfg.embed_dim, cfg.embed_dim, 2 * cfg.embed_dim, 1e-4};
}

/// Central differences along query coordinates β of the analytic Jacobian of
/// h_target with respect to neighbor coordinates γ. Returns, per graph and per
/// listed neighbor, max over (α, β, γ) of |∂²(h_t)_α / ∂(x_q)_β ∂(x_n)_γ|.
inline std::vector<std::vector<double>> mixing_maxima(const ModelConfig& cfg, const ParamStore& frozen,
                                                      const GraphBatch& b, const Tensor& x,
                                                      std::span<const std::size_t> query_rows,
                                                      const std::vector<std::vector<std::size_t>>& neighbor_rows,
                                                      const MixingRanges& mr) {
  const std::size_t w = x.dim(1);
  if (mr.beta_end > w || mr.gamma_end > w || mr.beta_begin >= mr.beta_end || mr.gamma_begin >= mr.gamma_end)
    throw std::invalid_argument("mixing_maxima: coordinate ranges outside the input width");
  std::vector<std::vector<double>> best(b.n_graphs);
  for (std::size_t g = 0; g < b.n_graphs; ++g) best[g].assign(neighbor_rows[g].size(), 0.0);
  std::vector<double> probe = x.values();
  for (std::size_t beta = mr.beta_begin; beta < mr.beta_end; ++beta) {
    std::vector<double> steps(b.n_graphs);
    auto jac_at = [&](double sign) {
      for (std::size_t g = 0; g < b.n_graphs; ++g) {
        const std::size_t c = query_rows[g] * w + beta;
        steps[g] = mr.rel_step * (1.0 + std::fabs(x[c]));
        probe[c] = x[c] + sign * steps[g];
      }
      auto j = target_jacobians(cfg, frozen, b, Tensor(x.shape(), probe), b.targets);
      for (std::size_t g = 0; g < b.n_graphs; ++g) probe[query_rows[g] * w + beta] = x[query_rows[g] * w + beta];
      return j;
    };
    const auto jp = jac_at(+1.0);
    const auto jm = jac_at(-1.0);
    for (std::size_t g = 0; g < b.n_graphs; ++g) {
      for (std::size_t k = 0; k < neighbor_rows[g].size(); ++k) {
        const auto col = static_cast<Eigen::Index>(neighbor_rows[g][k] * w + mr.gamma_begin);
        const auto cols = static_cast<Eigen::Index>(mr.gamma_end - mr.gamma_begin);
        const Eigen::MatrixXd d =
            (jp[g].middleCols(col, cols) - jm[g].middleCols(col, cols)) / (2.0 * steps[g]);
        if (!d.allFinite()) throw NumericError("mixing_maxima: non-finite second difference");
        best[g][k] = std::max(best[g][k], d.cwiseAbs().maxCoeff());
      }
    }
  }
  return best;
}

/// Restricted mixing value of neighbor node n for one NAR instance.
inline double hessian_mixing(const ModelConfig& cfg, const ParamStore& params, const TaskInstance& inst,
                             std::size_t n) {
  const ParamStore frozen = params.frozen();
  const GraphBatch b = make_batch(inst.graph, cfg.layers, cfg.k_hop, inst.target_node);
  const Tensor x = embed_inputs(cfg, frozen, b);
  const std::size_t q = inst.query;
  return mixing_maxima(cfg, frozen, b, x, std::span<const std::size_t>(&q, 1), {{n}}, nar_mixing_ranges(cfg))[0][0];
}

/// Same block with the roles of the two nodes exchanged: differences along
/// the neighbor coordinates of the analytic Jacobian with respect to the
/// query coordinates. Agrees with hessian_mixing up to FD error.
inline double hessian_mixing_swapped(const ModelConfig& cfg, const ParamStore& params, const TaskInstance& inst,
                                     std::size_t n) {
  const ParamStore frozen = params.frozen();
  const GraphBatch b = make_batch(inst.graph, cfg.layers, cfg.k_hop, inst.target_node);
  const Tensor x = embed_inputs(cfg, frozen, b);
  MixingRanges mr = nar_mixing_ranges(cfg);
  std::swap(mr.beta_begin, mr.gamma_begin);
  std::swap(mr.beta_end, mr.gamma_end);
  return mixing_maxima(cfg, frozen, b, x, std::span<const std::size_t>(&n, 1), {{inst.query}}, mr)[0][0];
}

struct MixingReport {
  /// Per instance, one value per neighbor node.
  std::vector<std::vector<double>> values;
  /// Over all (instance, neighbor) pairs.
  Summary summary;
};

inline MixingReport mixing_report(const ModelConfig& cfg, const ParamStore& params,
                                  const std::vector<TaskInstance>& xs, std::size_t batch_size = 32) {
  const ParamStore frozen = params.frozen();
  const PreparedInstances prep = prepare_instances(xs, cfg);
  const MixingRanges mr = nar_mixing_ranges(cfg);
  MixingReport rep;
  std::vector<std::size_t> idx;
  std::vector<double> flat;
  for (std::size_t start = 0; start < xs.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(xs.size(), start + batch_size); ++i) idx.push_back(i);
    const TaskBatch tb = make_task_batch(prep, idx, cfg);
    const Tensor x = embed_inputs(cfg, frozen, tb.graphs);
    std::vector<std::size_t> queries;
    std::vector<std::vector<std::size_t>> nbs;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto off = tb.graphs.node_offset[k];
      queries.push_back(off + xs[idx[k]].query);
      nbs.emplace_back();
      for (std::size_t nb = 0; nb < xs[idx[k]].keys.size(); ++nb) nbs.back().push_back(off + nb);
    }
    for (auto& v : mixing_maxima(cfg, frozen, tb.graphs, x, queries, nbs, mr)) {
      flat.insert(flat.end(), v.begin(), v.end());
      rep.values.push_back(std::move(v));
    }
  }
  rep.summary = summarize(flat);
  return rep;
}

// ---------------------------------------------------------------------------
// Flat vs deep trees

struct DepthNorms {
  std::size_t depth = 0;
  /// log10 root-to-leaf L1 norms pooled over seeds and leaves.
  std::vector<double> tree_log10;
  std::vector<double> star_log10;
  /// Pairs whose Jacobian was exactly zero (excluded from the logs).
  std::size_t tree_zero = 0;
  std::size_t star_zero = 0;
  Summary tree;
  Summary star;
};

/// Probe GCN: features of width `feature_dim`, `hidden` channels, ReLU.
inline ModelConfig probe_gcn_config(std::size_t depth, std::size_t feature_dim = 4, std::size_t hidden = 32) {
  ModelConfig m;
  m.arch = Architecture::kGcn;
  m.layers = depth;
  m.hidden = hidden;
  m.k_hop = false;
  m.activation = Activation::kRelu;
  m.input_kind = InputKind::kFeatures;
  m.input_dim = feature_dim;
  m.output_dim = 1;
  return m;
}

/// For each depth, random-init GCNs with as many layers as the tree depth;
/// root-to-leaf Jacobian norms on the binary tree and on the star with the
/// same leaf count.
inline std::vector<DepthNorms> flat_vs_deep_probe(std::size_t min_depth, std::size_t max_depth,
                                                  std::span<const std::uint64_t> seeds,
                                                  std::size_t feature_dim = 4, std::size_t hidden = 32) {
  std::vector<DepthNorms> out;
  for (std::size_t k = min_depth; k <= max_depth; ++k) {
    DepthNorms dn;
    dn.depth = k;
    const ModelConfig cfg = probe_gcn_config(k, feature_dim, hidden);
    for (std::uint64_t seed : seeds) {
      const auto pair = generate_flat_vs_deep_trees(k, k, derive_seed(seed, 0x7ee), feature_dim)[0];
      Rng rng(derive_seed(seed, k));
      const ParamStore params = init_params(cfg, rng).frozen();
      auto measure = [&](const Graph& g, const std::vector<std::size_t>& leaves, std::vector<double>& logs,
                         std::size_t& zeros) {
        const GraphBatch b = make_batch(g, k, false, 0);
        const std::size_t root = 0;
        const auto j = target_jacobians(cfg, params, b, b.features, std::span<const std::size_t>(&root, 1))[0];
        for (std::size_t leaf : leaves) {
          const double n = j.middleCols(static_cast<Eigen::Index>(leaf * feature_dim),
                                        static_cast<Eigen::Index>(feature_dim))
                               .cwiseAbs()
                               .sum();
          if (n > 0.0) logs.push_back(std::log10(n));
          else ++zeros;
        }
      };
      measure(pair.tree, pair.tree_leaves, dn.tree_log10, dn.tree_zero);
      measure(pair.star, pair.star_leaves, dn.star_log10, dn.star_zero);
    }
    dn.tree = summarize(dn.tree_log10);
    dn.star = summarize(dn.star_log10);
    out.push_back(std::move(dn));
  }
  return out;
}

/// Least-squares slope of y against x.
inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_slope: need >= 2 paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

// ---------------------------------------------------------------------------
// CSV

struct ProbeRow {
  std::string task;
  std::string model;
  double x = 0.0;
  std::uint64_t seed = 0;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
};

inline void write_probe_csv(std::ostream& os, const std::vector<ProbeRow>& rows) {
  os << "task,model,x,seed,metric,mean,std\n";
  for (const auto& r : rows)
    os << r.task << ',' << r.model << ',' << format_real(r.x) << ',' << r.seed << ',' << r.metric << ','
       << format_real(r.mean) << ',' << format_real(r.std) << '\n';
}

}  // namespace glstm
