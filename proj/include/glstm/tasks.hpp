#pragma once

// Seeded synthetic task generators with exact targets.
//
// Every generator is a pure function of (spec, seed). A split draws its three
// parts from separate seed streams, and instance i of a part uses
// derive_seed(part_seed, i), so instances can be generated independently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "glstm/graph.hpp"
#include "glstm/rng.hpp"

namespace glstm {

enum class TaskKind { kNar, kNarr, kRingTransfer, kDiameter, kEccentricity, kSssp };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::kNar: return "nar";
    case TaskKind::kNarr: return "narr";
    case TaskKind::kRingTransfer: return "ring_transfer";
    case TaskKind::kDiameter: return "diameter";
    case TaskKind::kEccentricity: return "eccentricity";
    case TaskKind::kSssp: return "sssp";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  for (TaskKind k : {TaskKind::kNar, TaskKind::kNarr, TaskKind::kRingTransfer, TaskKind::kDiameter,
                     TaskKind::kEccentricity, TaskKind::kSssp})
    if (s == task_name(k)) return k;
  throw std::invalid_argument("unknown task '" + s + "'");
}

inline bool is_classification(TaskKind k) { return k == TaskKind::kNar || k == TaskKind::kRingTransfer; }
inline bool is_gpp(TaskKind k) {
  return k == TaskKind::kDiameter || k == TaskKind::kEccentricity || k == TaskKind::kSssp;
}

enum class GraphFamily { kErdosRenyi, kBarabasiAlbert, kGrid, kCaveman };

inline const char* family_name(GraphFamily f) {
  switch (f) {
    case GraphFamily::kErdosRenyi: return "er";
    case GraphFamily::kBarabasiAlbert: return "ba";
    case GraphFamily::kGrid: return "grid";
    case GraphFamily::kCaveman: return "caveman";
  }
  return "?";
}

inline GraphFamily parse_family(const std::string& s) {
  for (GraphFamily f : {GraphFamily::kErdosRenyi, GraphFamily::kBarabasiAlbert, GraphFamily::kGrid,
                        GraphFamily::kCaveman})
    if (s == family_name(f)) return f;
  throw std::invalid_argument("unknown graph family '" + s + "'");
}

struct GppFamilyParams {
  std::vector<GraphFamily> families = {GraphFamily::kErdosRenyi, GraphFamily::kBarabasiAlbert};
  std::size_t n_min = 10;
  std::size_t n_max = 35;
  double er_p_min = 0.1;
  double er_p_max = 0.5;
  std::size_t ba_m_min = 1;
  std::size_t ba_m_max = 3;
  std::size_t max_retries = 100;
};

/// Everything a generator needs besides the seed.
struct TaskSpec {
  TaskKind kind = TaskKind::kNar;
  /// Neighbor count for NAR / NARR.
  std::size_t neighbors = 4;
  /// Value width for NARR.
  std::size_t value_dim = 16;
  std::size_t ring_size = 8;
  std::size_t classes = 5;
  GppFamilyParams gpp;
};

struct SplitSizes {
  std::size_t train = 10000;
  std::size_t validation = 1000;
  std::size_t test = 1000;
};

struct TaskInstance {
  std::string task;
  std::uint64_t seed = 0;
  Graph graph;
  /// Node read out for node-level targets; ignored when all_nodes is set.
  std::size_t target_node = 0;
  bool all_nodes = false;
  /// Class index for classification tasks.
  std::size_t label = 0;
  /// Regression target: value vector, graph scalar, or one real per node.
  std::vector<double> target;

  // NAR / NARR roles; neighbors are nodes [0, neighbors).
  std::size_t selected = 0;
  std::size_t central = 0;
  std::size_t query = 0;
  std::vector<std::size_t> keys;
  std::vector<std::size_t> values;
  /// Source node of RingTransfer / SSSP.
  std::size_t source = 0;
};

struct TaskSplit {
  TaskSpec spec;
  std::uint64_t seed = 0;
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> validation;
  std::vector<TaskInstance> test;
};

/// Number of model outputs the task needs.
inline std::size_t task_output_dim(const TaskSpec& s) {
  switch (s.kind) {
    case TaskKind::kNar: return s.neighbors;
    case TaskKind::kNarr: return s.value_dim;
    case TaskKind::kRingTransfer: return s.classes;
    default: return 1;
  }
}

/// Input feature width (for NAR: the two symbol columns).
inline std::size_t task_input_width(const TaskSpec& s) {
  switch (s.kind) {
    case TaskKind::kNar: return 2;
    case TaskKind::kNarr: return s.value_dim + 2 * s.neighbors;
    case TaskKind::kRingTransfer: return s.classes;
    default: return 3;
  }
}

// ---------------------------------------------------------------------------
// NAR

/// N neighbors (nodes 0..N-1) attached to a central node N, which is linked
/// through intermediate node N+1 to query node N+2. Node features are the
/// pair (key symbol, value symbol) with -1 where absent; the query holds only
/// its key.
inline TaskInstance generate_nar_instance(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_nar: N must be >= 1");
  Rng rng(seed);
  TaskInstance t;
  t.task = task_name(TaskKind::kNar);
  t.seed = seed;
  t.graph = Graph(n + 3, 2);
  t.central = n;
  t.query = n + 2;
  t.target_node = t.central;
  t.keys = rng.permutation(n);
  t.values.resize(n);
  for (auto& v : t.values) v = rng.below(n);
  t.selected = rng.below(n);
  t.label = t.values[t.selected];
  for (std::size_t i = 0; i < n; ++i) {
    t.graph.add_edge(i, t.central);
    t.graph.feature(i)[0] = static_cast<double>(t.keys[i]);
    t.graph.feature(i)[1] = static_cast<double>(t.values[i]);
    t.graph.set_tag(i, i == t.selected ? NodeTag::kSelected : NodeTag::kBackground);
  }
  t.graph.add_edge(t.central, n + 1);
  t.graph.add_edge(n + 1, t.query);
  for (std::size_t u : {t.central, n + 1}) {
    t.graph.feature(u)[0] = -1;
    t.graph.feature(u)[1] = -1;
  }
  t.graph.feature(t.query)[0] = static_cast<double>(t.keys[t.selected]);
  t.graph.feature(t.query)[1] = -1;
  t.graph.set_tag(t.central, NodeTag::kCentral);
  t.graph.set_tag(n + 1, NodeTag::kIntermediate);
  t.graph.set_tag(t.query, NodeTag::kQuery);
  return t;
}

/// NAR topology with features laid out as [value (V) | key one-hot (N) |
/// query one-hot (N)]; target is the selected neighbor's value vector.
inline TaskInstance generate_narr_instance(std::size_t n, std::size_t v_dim, std::uint64_t seed) {
  if (n < 1 || v_dim < 1) throw std::invalid_argument("generate_narr: N and V must be >= 1");
  Rng rng(seed);
  TaskInstance t;
  t.task = task_name(TaskKind::kNarr);
  t.seed = seed;
  const std::size_t width = v_dim + 2 * n;
  t.graph = Graph(n + 3, width);
  t.central = n;
  t.query = n + 2;
  t.target_node = t.central;
  t.keys = rng.permutation(n);
  t.selected = rng.below(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto f = t.graph.feature(i);
    for (std::size_t j = 0; j < v_dim; ++j) f[j] = rng.normal();
    f[v_dim + t.keys[i]] = 1.0;
    t.graph.add_edge(i, t.central);
    t.graph.set_tag(i, i == t.selected ? NodeTag::kSelected : NodeTag::kBackground);
  }
  t.graph.add_edge(t.central, n + 1);
  t.graph.add_edge(n + 1, t.query);
  t.graph.feature(t.query)[v_dim + n + t.keys[t.selected]] = 1.0;
  const auto sel = t.graph.feature(t.selected);
  t.target.assign(sel.begin(), sel.begin() + static_cast<std::ptrdiff_t>(v_dim));
  t.graph.set_tag(t.central, NodeTag::kCentral);
  t.graph.set_tag(n + 1, NodeTag::kIntermediate);
  t.graph.set_tag(t.query, NodeTag::kQuery);
  return t;
}

// ---------------------------------------------------------------------------
// RingTransfer

/// Ring 0..n-1; the source is node 0 and the target node floor(n/2) holds a
/// one-hot class feature. Every other node holds the all-ones vector.
inline TaskInstance generate_ring_transfer_instance(std::size_t n, std::size_t classes, std::uint64_t seed) {
  if (n < 3) throw std::invalid_argument("generate_ring_transfer: ring size must be >= 3");
  if (classes < 2) throw std::invalid_argument("generate_ring_transfer: need at least 2 classes");
  Rng rng(seed);
  TaskInstance t;
  t.task = task_name(TaskKind::kRingTransfer);
  t.seed = seed;
  t.graph = Graph(n, classes);
  for (std::size_t u = 0; u < n; ++u) t.graph.add_edge(u, (u + 1) % n);
  t.source = 0;
  t.target_node = 0;
  t.selected = n / 2;
  t.label = rng.below(classes);
  for (std::size_t u = 0; u < n; ++u) {
    auto f = t.graph.feature(u);
    if (u == t.selected) f[t.label] = 1.0;
    else std::fill(f.begin(), f.end(), 1.0);
  }
  t.graph.set_tag(t.source, NodeTag::kCentral);
  t.graph.set_tag(t.selected, NodeTag::kSelected);
  return t;
}

// ---------------------------------------------------------------------------
// Flat vs deep trees

struct TreePair {
  std::size_t depth = 0;
  /// Complete binary tree; node i has children 2i+1 and 2i+2.
  Graph tree;
  /// Root 0 with 2^depth leaves.
  Graph star;
  std::vector<std::size_t> tree_leaves;
  std::vector<std::size_t> star_leaves;
};

/// Leaf features are standard normals shared by the tree and the star;
/// internal nodes are zero.
inline std::vector<TreePair> generate_flat_vs_deep_trees(std::size_t min_depth, std::size_t max_depth,
                                                         std::uint64_t seed, std::size_t feature_dim = 1) {
  if (min_depth < 1 || max_depth < min_depth)
    throw std::invalid_argument("generate_flat_vs_deep_trees: need 1 <= min_depth <= max_depth");
  std::vector<TreePair> out;
  for (std::size_t k = min_depth; k <= max_depth; ++k) {
    Rng rng(derive_seed(seed, k));
    TreePair p;
    p.depth = k;
    const std::size_t leaves = std::size_t{1} << k;
    const std::size_t tree_n = 2 * leaves - 1;
    p.tree = Graph(tree_n, feature_dim);
    for (std::size_t i = 1; i < tree_n; ++i) p.tree.add_edge((i - 1) / 2, i);
    for (std::size_t i = leaves - 1; i < tree_n; ++i) {
      p.tree_leaves.push_back(i);
      for (double& x : p.tree.feature(i)) x = rng.normal();
    }
    p.star = Graph(leaves + 1, feature_dim);
    // star leaf i carries tree leaf i's features
    for (std::size_t i = 1; i <= leaves; ++i) {
      p.star.add_edge(0, i);
      p.star_leaves.push_back(i);
      const auto src = p.tree.feature(p.tree_leaves[i - 1]);
      std::copy(src.begin(), src.end(), p.star.feature(i).begin());
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph property prediction

inline Graph erdos_renyi(std::size_t n, double p, Rng& rng) {
  Graph g(n, 0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = u + 1; v < n; ++v)
      if (rng.bernoulli(p)) g.add_edge(u, v);
  return g;
}

/// Preferential attachment: a seed clique of m+1 nodes, then each new node
/// links to m distinct existing nodes chosen proportionally to degree.
inline Graph barabasi_albert(std::size_t n, std::size_t m, Rng& rng) {
  if (m < 1 || n <= m) throw std::invalid_argument("barabasi_albert: need 1 <= m < n");
  Graph g(n, 0);
  std::vector<std::size_t> ends;
  for (std::size_t u = 0; u <= m; ++u)
    for (std::size_t v = u + 1; v <= m; ++v) {
      g.add_edge(u, v);
      ends.push_back(u);
      ends.push_back(v);
    }
  for (std::size_t u = m + 1; u < n; ++u) {
    std::vector<std::size_t> chosen;
    while (chosen.size() < m) {
      const std::size_t v = ends[rng.below(ends.size())];
      if (std::find(chosen.begin(), chosen.end(), v) == chosen.end()) chosen.push_back(v);
    }
    for (std::size_t v : chosen) {
      g.add_edge(u, v);
      ends.push_back(u);
      ends.push_back(v);
    }
  }
  return g;
}

inline Graph grid_graph(std::size_t rows, std::size_t cols) {
  Graph g(rows * cols, 0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t u = r * cols + c;
      if (c + 1 < cols) g.add_edge(u, u + 1);
      if (r + 1 < rows) g.add_edge(u, u + cols);
    }
  return g;
}

/// Connected caveman graph: `caves` cliques of size k joined in a ring by
/// rewiring one edge per clique.
inline Graph caveman_graph(std::size_t caves, std::size_t k) {
  if (caves < 1 || k < 2) throw std::invalid_argument("caveman_graph: need caves >= 1 and k >= 2");
  Graph g(caves * k, 0);
  for (std::size_t c = 0; c < caves; ++c)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j) {
        if (caves > 1 && i == 0 && j == 1) continue;
        g.add_edge(c * k + i, c * k + j);
      }
  if (caves > 1)
    for (std::size_t c = 0; c < caves; ++c) g.add_edge(c * k, ((c + 1) % caves) * k + 1);
  return g;
}

inline Graph sample_family_graph(const GppFamilyParams& p, Rng& rng) {
  if (p.families.empty()) throw std::invalid_argument("generate_gpp: no graph families configured");
  if (p.n_min < 2 || p.n_max < p.n_min) throw std::invalid_argument("generate_gpp: invalid node range");
  const GraphFamily fam = p.families[rng.below(p.families.size())];
  const std::size_t n = p.n_min + rng.below(p.n_max - p.n_min + 1);
  switch (fam) {
    case GraphFamily::kErdosRenyi: return erdos_renyi(n, rng.uniform(p.er_p_min, p.er_p_max), rng);
    case GraphFamily::kBarabasiAlbert: {
      const std::size_t m = std::min(p.ba_m_min + rng.below(p.ba_m_max - p.ba_m_min + 1), n - 1);
      return barabasi_albert(n, m, rng);
    }
    case GraphFamily::kGrid: {
      const std::size_t rows = 2 + rng.below(std::max<std::size_t>(1, n / 2 - 1));
      return grid_graph(rows, std::max<std::size_t>(1, n / rows));
    }
    case GraphFamily::kCaveman: {
      const std::size_t k = 3 + rng.below(3);
      return caveman_graph(std::max<std::size_t>(1, n / k), k);
    }
  }
  throw std::logic_error("unreachable");
}

/// Eccentricity of every node of a connected graph.
inline std::vector<double> eccentricities(const Graph& g) {
  const auto d = shortest_walk_distances(g);
  std::vector<double> ecc(g.n_nodes(), 0.0);
  for (std::size_t u = 0; u < g.n_nodes(); ++u)
    for (std::size_t v = 0; v < g.n_nodes(); ++v) {
      if (d(u, v) == kUnreachable) throw std::invalid_argument("eccentricities: graph is disconnected");
      ecc[u] = std::max(ecc[u], static_cast<double>(d(u, v)));
    }
  return ecc;
}

/// Features per node: [1, source flag, uniform(0,1) noise]. Targets are raw
/// integer-valued distances.
inline TaskInstance generate_gpp_instance(TaskKind kind, const GppFamilyParams& p, std::uint64_t seed) {
  if (!is_gpp(kind)) throw std::invalid_argument("generate_gpp: not a graph property task");
  Rng rng(seed);
  Graph topo;
  bool ok = false;
  for (std::size_t attempt = 0; attempt <= p.max_retries && !ok; ++attempt) {
    topo = sample_family_graph(p, rng);
    ok = is_connected(topo);
  }
  if (!ok) throw std::runtime_error("generate_gpp: no connected graph after " + std::to_string(p.max_retries) +
                                    " retries");
  TaskInstance t;
  t.task = task_name(kind);
  t.seed = seed;
  t.graph = Graph(topo.n_nodes(), 3);
  for (auto [u, v] : topo.edges()) t.graph.add_edge(u, v);
  t.source = rng.below(topo.n_nodes());
  for (std::size_t u = 0; u < topo.n_nodes(); ++u) {
    auto f = t.graph.feature(u);
    f[0] = 1.0;
    f[1] = u == t.source ? 1.0 : 0.0;
    f[2] = rng.uniform();
  }
  t.target_node = t.source;
  switch (kind) {
    case TaskKind::kDiameter: {
      const auto ecc = eccentricities(t.graph);
      t.target = {*std::max_element(ecc.begin(), ecc.end())};
      break;
    }
    case TaskKind::kEccentricity:
      t.all_nodes = true;
      t.target = eccentricities(t.graph);
      break;
    default: {
      t.all_nodes = true;
      for (std::size_t d : bfs_distances(t.graph, t.source)) t.target.push_back(static_cast<double>(d));
      break;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Splits

inline TaskInstance generate_instance(const TaskSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case TaskKind::kNar: return generate_nar_instance(spec.neighbors, seed);
    case TaskKind::kNarr: return generate_narr_instance(spec.neighbors, spec.value_dim, seed);
    case TaskKind::kRingTransfer: return generate_ring_transfer_instance(spec.ring_size, spec.classes, seed);
    default: return generate_gpp_instance(spec.kind, spec.gpp, seed);
  }
}

enum class SplitPart : std::uint64_t { kTrain = 1, kValidation = 2, kTest = 3 };

inline std::uint64_t part_seed(std::uint64_t split_seed, SplitPart part) {
  return derive_seed(split_seed, static_cast<std::uint64_t>(part));
}

inline std::vector<TaskInstance> generate_instances(const TaskSpec& spec, std::size_t count,
                                                   std::uint64_t stream_seed) {
  std::vector<TaskInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_instance(spec, derive_seed(stream_seed, i)));
  return out;
}

inline TaskSplit generate_split(const TaskSpec& spec, const SplitSizes& sizes, std::uint64_t seed) {
  TaskSplit s;
  s.spec = spec;
  s.seed = seed;
  s.train = generate_instances(spec, sizes.train, part_seed(seed, SplitPart::kTrain));
  s.validation = generate_instances(spec, sizes.validation, part_seed(seed, SplitPart::kValidation));
  s.test = generate_instances(spec, sizes.test, part_seed(seed, SplitPart::kTest));
  return s;
}

inline TaskSplit generate_nar(std::size_t n, const SplitSizes& sizes, std::uint64_t seed) {
  TaskSpec spec;
  spec.kind = TaskKind::kNar;
  spec.neighbors = n;
  return generate_split(spec, sizes, seed);
}

inline TaskSplit generate_narr(std::size_t n, std::size_t v_dim, const SplitSizes& sizes, std::uint64_t seed) {
  TaskSpec spec;
  spec.kind = TaskKind::kNarr;
  spec.neighbors = n;
  spec.value_dim = v_dim;
  return generate_split(spec, sizes, seed);
}

inline TaskSplit generate_ring_transfer(std::size_t ring, std::size_t classes, const SplitSizes& sizes,
                                        std::uint64_t seed) {
  TaskSpec spec;
  spec.kind = TaskKind::kRingTransfer;
  spec.ring_size = ring;
  spec.classes = classes;
  return generate_split(spec, sizes, seed);
}

inline TaskSplit generate_gpp(TaskKind kind, const GppFamilyParams& params, const SplitSizes& sizes,
                              std::uint64_t seed) {
  TaskSpec spec;
  spec.kind = kind;
  spec.gpp = params;
  return generate_split(spec, sizes, seed);
}

// ---------------------------------------------------------------------------
// Serialization: graph text blocks plus one JSON object per line

inline const char* tag_name(NodeTag t) {
  switch (t) {
    case NodeTag::kNone: return "none";
    case NodeTag::kNeighbor: return "neighbor";
    case NodeTag::kCentral: return "central";
    case NodeTag::kIntermediate: return "intermediate";
    case NodeTag::kQuery: return "query";
    case NodeTag::kSelected: return "selected";
    case NodeTag::kBackground: return "background";
  }
  return "none";
}

inline NodeTag parse_tag(const std::string& s) {
  for (NodeTag t : {NodeTag::kNone, NodeTag::kNeighbor, NodeTag::kCentral, NodeTag::kIntermediate,
                    NodeTag::kQuery, NodeTag::kSelected, NodeTag::kBackground})
    if (s == tag_name(t)) return t;
  throw std::invalid_argument("unknown node tag '" + s + "'");
}

inline nlohmann::json instance_meta(const TaskInstance& t) {
  nlohmann::json j;
  j["task"] = t.task;
  j["seed"] = t.seed;
  j["target_node"] = t.target_node;
  j["all_nodes"] = t.all_nodes;
  j["label"] = t.label;
  j["target"] = t.target;
  j["selected"] = t.selected;
  j["central"] = t.central;
  j["query"] = t.query;
  j["keys"] = t.keys;
  j["values"] = t.values;
  j["source"] = t.source;
  std::vector<std::string> tags;
  for (std::size_t u = 0; u < t.graph.n_nodes(); ++u) tags.emplace_back(tag_name(t.graph.tag(u)));
  j["tags"] = tags;
  return j;
}

inline void write_instances(std::ostream& graphs, std::ostream& meta, const std::vector<TaskInstance>& xs) {
  for (std::size_t i = 0; i < xs.size(); ++i) {
    write_graph(graphs, xs[i].graph);
    meta << instance_meta(xs[i]).dump() << '\n';
  }
}

inline std::vector<TaskInstance> read_instances(std::istream& graphs, std::istream& meta) {
  std::vector<TaskInstance> out;
  std::size_t graph_line = 0;
  std::string line;
  std::size_t meta_line = 0;
  while (std::getline(meta, line)) {
    ++meta_line;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw GraphFormatError(std::string("invalid sidecar JSON: ") + e.what(), meta_line);
    }
    auto g = read_graph(graphs, &graph_line);
    if (!g) throw GraphFormatError("sidecar has more records than the graph file", meta_line);
    TaskInstance t;
    t.graph = std::move(*g);
    t.task = j.at("task").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.target_node = j.at("target_node").get<std::size_t>();
    t.all_nodes = j.at("all_nodes").get<bool>();
    t.label = j.at("label").get<std::size_t>();
    t.target = j.at("target").get<std::vector<double>>();
    t.selected = j.at("selected").get<std::size_t>();
    t.central = j.at("central").get<std::size_t>();
    t.query = j.at("query").get<std::size_t>();
    t.keys = j.at("keys").get<std::vector<std::size_t>>();
    t.values = j.at("values").get<std::vector<std::size_t>>();
    t.source = j.at("source").get<std::size_t>();
    const auto tags = j.at("tags").get<std::vector<std::string>>();
    if (tags.size() != t.graph.n_nodes()) throw GraphFormatError("tag count does not match node count", meta_line);
    for (std::size_t u = 0; u < tags.size(); ++u) t.graph.set_tag(u, parse_tag(tags[u]));
    out.push_back(std::move(t));
  }
  if (read_graph(graphs, &graph_line)) throw GraphFormatError("graph file has more records than the sidecar", graph_line);
  return out;
}

/// Writes <dir>/<part>.graphs and <dir>/<part>.jsonl for each part.
inline void save_split(const TaskSplit& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, const std::vector<TaskInstance>*> parts[] = {
      {"train", &s.train}, {"validation", &s.validation}, {"test", &s.test}};
  for (const auto& [name, xs] : parts) {
    std::ofstream g(dir / (std::string(name) + ".graphs"));
    std::ofstream m(dir / (std::string(name) + ".jsonl"));
    if (!g || !m) throw std::runtime_error("save_split: cannot write to " + dir.string());
    write_instances(g, m, *xs);
  }
}

inline std::vector<TaskInstance> load_split_part(const std::filesystem::path& dir, const std::string& part) {
  std::ifstream g(dir / (part + ".graphs"));
  std::ifstream m(dir / (part + ".jsonl"));
  if (!g || !m) throw std::runtime_error("load_split_part: missing files for '" + part + "' in " + dir.string());
  return read_instances(g, m);
}

}  // namespace glstm
