#pragma once

// gLSTM and GCN node models over batches of graphs.
//
// A batch is the disjoint union of its graphs, so every per-node quantity is a
// single tensor whose rows are the nodes of all graphs. Message passing uses
// constant sparse operators built once per batch and layer.

#include <atomic>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "glstm/graph.hpp"
#include "glstm/model_config.hpp"
#include "glstm/ops.hpp"
#include "glstm/params.hpp"

namespace glstm {

// ---------------------------------------------------------------------------
// Batch structure

/// Neighbor lists per layer: [layer][node] -> sorted node list.
using LayerNeighborhoods = std::vector<std::vector<std::vector<std::size_t>>>;

/// Layer l aggregates N_u^(l) (distance exactly l) with K-hop, and the direct
/// neighbors at every layer otherwise.
inline LayerNeighborhoods layer_neighborhoods(const Graph& g, std::size_t layers, bool k_hop) {
  LayerNeighborhoods out(layers);
  if (k_hop) {
    const auto idx = khop_index(g, layers);
    for (std::size_t l = 0; l < layers; ++l) {
      out[l].resize(g.n_nodes());
      for (std::size_t u = 0; u < g.n_nodes(); ++u) out[l][u] = idx.at(l + 1, u);
    }
  } else {
    std::vector<std::vector<std::size_t>> direct(g.n_nodes());
    for (std::size_t u = 0; u < g.n_nodes(); ++u) direct[u] = g.neighbors(u);
    for (auto& l : out) l = direct;
  }
  return out;
}

/// Constant message-passing structure of one layer.
struct LayerStructure {
  std::size_t n_nodes = 0;
  /// N_u with unit weights (neighbor sums).
  std::shared_ptr<const SparseMatrix> neighbors;
  /// N_u ∪ {u}, sorted, unit weights.
  std::shared_ptr<const SparseMatrix> neighbors_self;
  /// Pairs (v -> u) for v in N_u ∪ {u}, ordered by u then v.
  std::shared_ptr<const EdgeList> edges;
  /// Degree-normalized operator with self-loops.
  std::shared_ptr<const SparseMatrix> gcn;

  std::size_t n_edges() const { return edges->size(); }
};

inline LayerStructure make_layer_structure(const std::vector<std::vector<std::size_t>>& nbrs) {
  const std::size_t n = nbrs.size();
  LayerStructure ls;
  ls.n_nodes = n;
  auto plain = std::make_shared<SparseMatrix>();
  auto with_self = std::make_shared<SparseMatrix>();
  auto edges = std::make_shared<EdgeList>();
  plain->rows = plain->cols = with_self->rows = with_self->cols = n;
  for (std::size_t u = 0; u < n; ++u) {
    bool self_done = false;
    for (std::size_t v : nbrs[u]) {
      if (!self_done && u < v) {
        with_self->col.push_back(u);
        self_done = true;
      }
      plain->col.push_back(v);
      with_self->col.push_back(v);
    }
    if (!self_done) with_self->col.push_back(u);
    plain->row_ptr.push_back(plain->col.size());
    with_self->row_ptr.push_back(with_self->col.size());
    for (std::size_t e = with_self->row_ptr[u]; e < with_self->row_ptr[u + 1]; ++e) {
      edges->dst.push_back(u);
      edges->src.push_back(with_self->col[e]);
    }
  }
  plain->weight.assign(plain->col.size(), 1.0);
  with_self->weight.assign(with_self->col.size(), 1.0);
  ls.neighbors = std::move(plain);
  ls.neighbors_self = std::move(with_self);
  ls.edges = std::move(edges);
  ls.gcn = detail::normalized_with_self_loops(nbrs);
  return ls;
}

struct GraphBatch {
  std::size_t n_nodes = 0;
  std::size_t n_graphs = 0;
  std::vector<std::size_t> node_offset;
  /// Target node of each graph, as a batch-global row index.
  std::vector<std::size_t> targets;
  std::vector<LayerStructure> layers;
  /// [n_graphs, n_nodes] mean-pooling operator.
  std::shared_ptr<const SparseMatrix> pool;
  /// Raw node features [n_nodes, d_in].
  Tensor features;
};

/// Disjoint union of `graphs`. `nbhds[i]` must hold one neighbor list set per
/// model layer for graph i; `targets[i]` is a graph-local node index.
inline GraphBatch make_batch(std::span<const Graph* const> graphs,
                             std::span<const LayerNeighborhoods* const> nbhds,
                             std::span<const std::size_t> targets) {
  if (graphs.empty()) throw std::invalid_argument("make_batch: empty batch");
  if (nbhds.size() != graphs.size() || targets.size() != graphs.size())
    throw std::invalid_argument("make_batch: inconsistent batch inputs");
  GraphBatch b;
  b.n_graphs = graphs.size();
  const std::size_t layers = nbhds[0]->size();
  const std::size_t d = graphs[0]->feature_dim();
  for (const Graph* g : graphs) {
    if (g->feature_dim() != d) throw std::invalid_argument("make_batch: feature width mismatch");
    b.node_offset.push_back(b.n_nodes);
    b.n_nodes += g->n_nodes();
  }
  std::vector<double> feats;
  feats.reserve(b.n_nodes * d);
  auto pool = std::make_shared<SparseMatrix>();
  pool->rows = b.n_graphs;
  pool->cols = b.n_nodes;
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const auto& f = graphs[i]->features();
    feats.insert(feats.end(), f.begin(), f.end());
    if (targets[i] >= graphs[i]->n_nodes()) throw std::out_of_range("make_batch: target node out of range");
    b.targets.push_back(b.node_offset[i] + targets[i]);
    const double w = 1.0 / static_cast<double>(graphs[i]->n_nodes());
    for (std::size_t u = 0; u < graphs[i]->n_nodes(); ++u) {
      pool->col.push_back(b.node_offset[i] + u);
      pool->weight.push_back(w);
    }
    pool->row_ptr.push_back(pool->col.size());
  }
  b.pool = std::move(pool);
  b.features = Tensor::matrix(b.n_nodes, d, std::move(feats));
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<std::vector<std::size_t>> nbrs(b.n_nodes);
    for (std::size_t i = 0; i < graphs.size(); ++i) {
      if (nbhds[i]->size() != layers) throw std::invalid_argument("make_batch: layer count mismatch");
      const auto& gl = (*nbhds[i])[l];
      for (std::size_t u = 0; u < gl.size(); ++u) {
        auto& dst = nbrs[b.node_offset[i] + u];
        dst.reserve(gl[u].size());
        for (std::size_t v : gl[u]) dst.push_back(b.node_offset[i] + v);
      }
    }
    b.layers.push_back(make_layer_structure(nbrs));
  }
  return b;
}

/// Single-graph batch.
inline GraphBatch make_batch(const Graph& g, std::size_t layers, bool k_hop, std::size_t target = 0) {
  const auto nb = layer_neighborhoods(g, layers, k_hop);
  const Graph* gp = &g;
  const LayerNeighborhoods* np = &nb;
  return make_batch(std::span<const Graph* const>(&gp, 1),
                    std::span<const LayerNeighborhoods* const>(&np, 1),
                    std::span<const std::size_t>(&target, 1));
}

// ---------------------------------------------------------------------------
// Gate monitoring

/// Process-wide tally of gate values checked against 0 < g <= 1.
struct GateMonitor {
  std::atomic<std::uint64_t> checked{0};
  std::atomic<std::uint64_t> violations{0};

  void record(std::span<const double> gates) {
    std::uint64_t bad = 0;
    for (double g : gates) bad += (g > 0.0 && g <= 1.0) ? 0 : 1;
    checked.fetch_add(gates.size(), std::memory_order_relaxed);
    if (bad) violations.fetch_add(bad, std::memory_order_relaxed);
  }
  void reset() {
    checked = 0;
    violations = 0;
  }
};

inline GateMonitor& gate_monitor() {
  static GateMonitor m;
  return m;
}

// ---------------------------------------------------------------------------
// Parameters

inline std::string block_param(std::size_t layer, const std::string& name) {
  return "block." + std::to_string(layer) + "." + name;
}
inline std::string head_param(std::size_t layer, std::size_t head, const std::string& name) {
  return block_param(layer, "head." + std::to_string(head) + "." + name);
}

inline ParamStore init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore p;
  const std::size_t dh = cfg.hidden, dk = cfg.memory, dv = cfg.memory, H = cfg.heads;
  if (cfg.input_kind == InputKind::kSymbols) {
    auto table = [&](std::size_t rows) {
      std::vector<double> v(rows * cfg.embed_dim);
      for (double& x : v) x = rng.normal();
      return Tensor::matrix(rows, cfg.embed_dim, std::move(v));
    };
    p.add("embed.key", table(cfg.input_dim));
    p.add("embed.value", table(cfg.input_dim));
  }
  p.add("input.weight", glorot(dh, cfg.feature_width(), rng));
  p.add("input.bias", Tensor::zeros({dh}));

  if (cfg.arch == Architecture::kGcn) {
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      p.add("gcn." + std::to_string(l) + ".weight", glorot(dh, dh, rng));
      p.add("gcn." + std::to_string(l) + ".bias", Tensor::zeros({dh}));
    }
  } else {
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      if (cfg.input_norm == InputNorm::kLayer) {
        p.add(block_param(l, "norm.weight"), Tensor::filled({dh}, 1.0));
        p.add(block_param(l, "norm.bias"), Tensor::zeros({dh}));
      }
      p.add(block_param(l, "up.weight"), glorot(dh, dh, rng));
      for (std::size_t h = 0; h < H; ++h) {
        p.add(head_param(l, h, "q.weight"), glorot(dk, 2 * dh, rng));
        p.add(head_param(l, h, "q.bias"), Tensor::zeros({dk}));
        p.add(head_param(l, h, "k.weight"), glorot(dk, dh, rng));
        p.add(head_param(l, h, "k.bias"), Tensor::zeros({dk}));
        p.add(head_param(l, h, "v.weight"), glorot(dv, dh, rng));
        p.add(head_param(l, h, "v.bias"), Tensor::zeros({dv}));
        p.add(head_param(l, h, "o.weight"), glorot(dv, dh, rng));
        p.add(head_param(l, h, "o.bias"), Tensor::zeros({dv}));
        p.add(head_param(l, h, "igate.weight"), glorot(1, dh, rng));
        p.add(head_param(l, h, "igate.bias"), Tensor::zeros({1}));
        p.add(head_param(l, h, "fgate.weight"), glorot(1, dh, rng));
        // forget biases evenly spaced over [3, 6] across heads
        const double fb = H == 1 ? 3.0 : 3.0 + 3.0 * static_cast<double>(h) / static_cast<double>(H - 1);
        p.add(head_param(l, h, "fgate.bias"), Tensor::filled({1}, fb));
      }
      if (cfg.hidden_norm == HiddenNorm::kGroup) {
        p.add(block_param(l, "hnorm.weight"), Tensor::filled({H * dv}, 1.0));
        p.add(block_param(l, "hnorm.bias"), Tensor::zeros({H * dv}));
      }
      p.add(block_param(l, "down.weight"),
            cfg.zero_init_down ? Tensor::zeros({dh, H * dv}) : glorot(dh, H * dv, rng));
      p.add(block_param(l, "down.bias"), Tensor::zeros({dh}));
    }
  }
  p.add("readout.weight", glorot(cfg.output_dim, dh, rng));
  p.add("readout.bias", Tensor::zeros({cfg.output_dim}));
  return p;
}

// ---------------------------------------------------------------------------
// GCN

/// activation(O h W^T (+ b)).
inline Tensor gcn_layer(const Tensor& h_prev, std::shared_ptr<const SparseMatrix> op,
                        const Tensor& weight, Activation act, const Tensor& bias = Tensor()) {
  Tensor z = sparse_matmul(std::move(op), linear(h_prev, weight));
  if (bias.defined()) z = add_bias(z, bias);
  return activate(z, act);
}

// ---------------------------------------------------------------------------
// gLSTM cell

struct HeadParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo, wi, bi, wf, bf;
};

inline HeadParams head_params(const ParamStore& p, std::size_t layer, std::size_t head) {
  auto g = [&](const char* n) { return p.get(head_param(layer, head, n)); };
  return {g("q.weight"), g("q.bias"), g("k.weight"), g("k.bias"), g("v.weight"), g("v.bias"),
          g("o.weight"), g("o.bias"), g("igate.weight"), g("igate.bias"), g("fgate.weight"),
          g("fgate.bias")};
}

/// Per-head recurrent memory: C [n, d_v, d_k], n [n, d_k], m [n].
struct HeadState {
  Tensor C;
  Tensor n;
  Tensor m;
};

struct GlstmState {
  std::vector<HeadState> heads;
};

inline GlstmState initial_state(std::size_t n_nodes, const ModelConfig& cfg, double m0 = 0.0) {
  GlstmState s;
  for (std::size_t h = 0; h < cfg.heads; ++h)
    s.heads.push_back({Tensor::zeros({n_nodes, cfg.memory, cfg.memory}),
                       Tensor::zeros({n_nodes, cfg.memory}), Tensor::filled({n_nodes}, m0)});
  return s;
}

struct Qkv {
  Tensor q, k, v;
};

/// q_u = W_q [x_u; Σ_{v∈N_u} x_v] + b_q;  k_u = W_k x_u / sqrt(d_k) + b_k;  v_u = W_v x_u + b_v
inline Qkv glstm_qkv(const Tensor& x, const LayerStructure& ls, const HeadParams& hp) {
  const double d_k = static_cast<double>(hp.wk.dim(0));
  Tensor agg = sparse_matmul(ls.neighbors, x);
  Qkv out;
  out.q = linear(concat(x, agg), hp.wq, hp.bq);
  out.k = add_bias(scale(linear(x, hp.wk), 1.0 / std::sqrt(d_k)), hp.bk);
  out.v = linear(x, hp.wv, hp.bv);
  return out;
}

struct GateSwitches {
  bool input = true;
  bool forget = true;
  bool output = true;
};

/// Stabilized exponential gates. i_edge[e] is the input gate of source
/// edges->src[e] as seen by aggregating node edges->dst[e].
struct Gates {
  Tensor i_tilde;  // [n]
  Tensor f_tilde;  // [n]
  Tensor m;        // [n]
  Tensor i_edge;   // [E]
  Tensor f;        // [n]
  Tensor o;        // [n, d_v]
};

/// m_u = max({f̃_u + m_prev_u} ∪ {ĩ_v : v ∈ N_u ∪ {u}})
/// i_v = exp(ĩ_v − m_u),  f_u = exp(f̃_u + m_prev_u − m_u),  o_u = σ(W_o x_u + b_o)
/// A switched-off gate has its pre-activation pinned to zero (o pinned to 1).
inline Gates glstm_gates(const Tensor& x, const Tensor& m_prev, const LayerStructure& ls,
                         const HeadParams& hp, GateSwitches sw = {}) {
  const std::size_t n = x.dim(0);
  Gates g;
  g.i_tilde = sw.input ? reshape(linear(x, hp.wi, hp.bi), {n}) : Tensor::zeros({n});
  g.f_tilde = sw.forget ? reshape(linear(x, hp.wf, hp.bf), {n}) : Tensor::zeros({n});
  for (double v : g.i_tilde.values())
    if (!std::isfinite(v)) throw NumericError("glstm_gates: non-finite input-gate pre-activation");
  for (double v : g.f_tilde.values())
    if (!std::isfinite(v)) throw NumericError("glstm_gates: non-finite forget-gate pre-activation");
  Tensor carry = add(g.f_tilde, m_prev);
  g.m = set_max(g.i_tilde, ls.neighbors_self, carry);
  g.i_edge = exp(sub(gather_rows(g.i_tilde, ls.edges->src), gather_rows(g.m, ls.edges->dst)));
  g.f = exp(sub(carry, g.m));
  g.o = sw.output ? sigmoid(linear(x, hp.wo, hp.bo)) : Tensor::filled({n, hp.wo.dim(0)}, 1.0);
  gate_monitor().record(g.i_edge.data());
  gate_monitor().record(g.f.data());
  return g;
}

/// C_u = f_u C_prev_u + Σ_{v∈N_u∪{u}} i_v v_v ⊗ k_v;  n_u = f_u n_prev_u + Σ i_v k_v
inline HeadState glstm_state_update(const HeadState& prev, const Gates& g, const Qkv& qkv,
                                    const LayerStructure& ls) {
  const std::size_t n = ls.n_nodes;
  HeadState s;
  s.C = add(scale_rows(prev.C, g.f), edge_outer_sum(g.i_edge, qkv.v, qkv.k, ls.edges, n));
  s.n = add(scale_rows(prev.n, g.f), edge_weighted_sum(g.i_edge, qkv.k, ls.edges, n));
  s.m = g.m;
  return s;
}

/// h̃_u = C_u q_u / max(|n_u · q_u|, 1)
inline Tensor glstm_output(const Tensor& C, const Tensor& n, const Tensor& q) {
  Tensor den = max_const(abs(row_dot(n, q)), 1.0);
  return div_rows(batched_matvec(C, q), den);
}

/// o_u ⊙ h̃_u
inline Tensor glstm_output(const Tensor& C, const Tensor& n, const Tensor& q, const Tensor& o) {
  return mul(o, glstm_output(C, n, q));
}

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;
  /// Initial stabilizer value m^(0).
  double m_init = 0.0;
};

struct BlockOutput {
  Tensor h;
  GlstmState state;
};

/// One gLSTM block: input norm, up projection, per-head memory update and
/// retrieval, hidden group norm, output gate, dropout, down projection,
/// inter-block activation, residual add.
inline BlockOutput glstm_block(const Tensor& h_in, const GlstmState& prev, const LayerStructure& ls,
                               const ParamStore& p, const ModelConfig& cfg, std::size_t layer,
                               const ForwardOptions& opt = {}) {
  Tensor x = h_in;
  if (cfg.input_norm == InputNorm::kLayer)
    x = layer_norm(x, p.get(block_param(layer, "norm.weight")), p.get(block_param(layer, "norm.bias")));
  x = linear(x, p.get(block_param(layer, "up.weight")));

  const GateSwitches sw{cfg.input_gate, cfg.forget_gate, cfg.output_gate};
  BlockOutput out;
  std::vector<Tensor> retrieved, gates_o;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const HeadParams hp = head_params(p, layer, h);
    Qkv qkv = glstm_qkv(x, ls, hp);
    Gates g = glstm_gates(x, prev.heads[h].m, ls, hp, sw);
    HeadState s = glstm_state_update(prev.heads[h], g, qkv, ls);
    retrieved.push_back(glstm_output(s.C, s.n, qkv.q));
    gates_o.push_back(g.o);
    out.state.heads.push_back(std::move(s));
  }
  Tensor hid = cfg.heads == 1 ? retrieved[0] : concat(retrieved);
  Tensor o = cfg.heads == 1 ? gates_o[0] : concat(gates_o);
  if (cfg.hidden_norm == HiddenNorm::kGroup)
    hid = group_norm(hid, cfg.heads, p.get(block_param(layer, "hnorm.weight")),
                     p.get(block_param(layer, "hnorm.bias")));
  hid = mul(o, hid);
  hid = dropout(hid, cfg.dropout, opt.rng, opt.training);
  Tensor branch = linear(hid, p.get(block_param(layer, "down.weight")), p.get(block_param(layer, "down.bias")));
  out.h = add(h_in, activate(branch, cfg.activation));
  return out;
}

// ---------------------------------------------------------------------------
// Full models

/// Node input features [n, feature_width]: raw features, or the concatenated
/// key/value embeddings for symbol inputs (zero where a symbol is absent).
inline Tensor embed_inputs(const ModelConfig& cfg, const ParamStore& p, const GraphBatch& b) {
  if (cfg.input_kind == InputKind::kFeatures) {
    if (b.features.dim(1) != cfg.input_dim)
      throw ShapeError("embed_inputs", b.features.shape(), Shape{b.n_nodes, cfg.input_dim});
    return b.features;
  }
  if (b.features.dim(1) != 2) throw ShapeError("embed_inputs", "symbol inputs need 2 feature columns");
  const std::size_t n = b.n_nodes, s = cfg.input_dim;
  std::vector<double> key_oh(n * s, 0.0), val_oh(n * s, 0.0);
  for (std::size_t u = 0; u < n; ++u) {
    const double k = b.features.at(u, 0), v = b.features.at(u, 1);
    if (k >= 0) {
      if (k >= static_cast<double>(s)) throw ShapeError("embed_inputs", "key symbol out of range");
      key_oh[u * s + static_cast<std::size_t>(k)] = 1.0;
    }
    if (v >= 0) {
      if (v >= static_cast<double>(s)) throw ShapeError("embed_inputs", "value symbol out of range");
      val_oh[u * s + static_cast<std::size_t>(v)] = 1.0;
    }
  }
  return concat(matmul(Tensor::matrix(n, s, std::move(key_oh)), p.get("embed.key")),
                matmul(Tensor::matrix(n, s, std::move(val_oh)), p.get("embed.value")));
}

struct ForwardResult {
  /// Final node states h^(L) [n, hidden].
  Tensor node_states;
  /// Readout: [n_graphs, out] (target / mean-pool) or [n, out] (all nodes).
  Tensor output;
};

inline Tensor readout(const ModelConfig& cfg, const ParamStore& p, const GraphBatch& b, const Tensor& h) {
  Tensor z;
  switch (cfg.readout) {
    case Readout::kTargetNode: z = gather_rows(h, b.targets); break;
    case Readout::kMeanPool: z = sparse_matmul(b.pool, h); break;
    case Readout::kAllNodes: z = h; break;
  }
  return linear(z, p.get("readout.weight"), p.get("readout.bias"));
}

/// Runs the node model on features `x` ([n, feature_width]).
inline ForwardResult model_forward(const ModelConfig& cfg, const ParamStore& p, const GraphBatch& b,
                                   const Tensor& x, const ForwardOptions& opt = {}) {
  if (b.layers.size() != cfg.layers)
    throw std::invalid_argument("model_forward: batch built for " + std::to_string(b.layers.size()) +
                                " layers, model has " + std::to_string(cfg.layers));
  if (x.rank() != 2 || x.dim(0) != b.n_nodes || x.dim(1) != cfg.feature_width())
    throw ShapeError("model_forward", x.shape(), Shape{b.n_nodes, cfg.feature_width()});
  ForwardResult r;
  Tensor h = linear(x, p.get("input.weight"), p.get("input.bias"));
  if (cfg.arch == Architecture::kGcn) {
    h = activate(h, cfg.activation);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      h = gcn_layer(h, b.layers[l].gcn, p.get("gcn." + std::to_string(l) + ".weight"), cfg.activation,
                    p.get("gcn." + std::to_string(l) + ".bias"));
      h = dropout(h, cfg.dropout, opt.rng, opt.training);
    }
  } else {
    GlstmState state = initial_state(b.n_nodes, cfg, opt.m_init);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      auto blk = glstm_block(h, state, b.layers[l], p, cfg, l, opt);
      h = std::move(blk.h);
      state = std::move(blk.state);
    }
  }
  r.node_states = h;
  r.output = readout(cfg, p, b, h);
  return r;
}

inline ForwardResult model_forward(const ModelConfig& cfg, const ParamStore& p, const GraphBatch& b,
                                   const ForwardOptions& opt = {}) {
  return model_forward(cfg, p, b, embed_inputs(cfg, p, b), opt);
}

}  // namespace glstm
