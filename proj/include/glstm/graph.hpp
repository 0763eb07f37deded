#pragma once

// Undirected graphs, shortest-walk distances, K-hop neighborhoods and the
// degree-normalized message-passing operators used by GCN.

#include <Eigen/Core>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <deque>
#include <istream>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "glstm/ops.hpp"

namespace glstm {

enum class NodeTag { kNone, kNeighbor, kCentral, kIntermediate, kQuery, kSelected, kBackground };

class Graph {
 public:
  Graph() = default;
  Graph(std::size_t n_nodes, std::size_t feature_dim)
      : n_(n_nodes), d_(feature_dim), adj_(n_nodes), features_(n_nodes * feature_dim, 0.0),
        tags_(n_nodes, NodeTag::kNone) {}

  /// Inserts {u, v}; returns false if it was already present.
  bool add_edge(std::size_t u, std::size_t v) {
    if (u >= n_ || v >= n_) {
      throw std::out_of_range("edge (" + std::to_string(u) + "," + std::to_string(v) +
                              ") outside [0," + std::to_string(n_) + ")");
    }
    if (u == v) throw std::invalid_argument("self-loops are not stored");
    auto& au = adj_[u];
    auto it = std::lower_bound(au.begin(), au.end(), v);
    if (it != au.end() && *it == v) return false;
    au.insert(it, v);
    auto& av = adj_[v];
    av.insert(std::lower_bound(av.begin(), av.end(), u), u);
    ++n_edges_;
    return true;
  }

  std::size_t n_nodes() const { return n_; }
  std::size_t feature_dim() const { return d_; }
  std::size_t n_edges() const { return n_edges_; }
  const std::vector<std::size_t>& neighbors(std::size_t u) const { return adj_.at(u); }
  std::size_t degree(std::size_t u) const { return adj_.at(u).size(); }
  bool has_edge(std::size_t u, std::size_t v) const {
    const auto& a = adj_.at(u);
    return std::binary_search(a.begin(), a.end(), v);
  }

  /// Sorted (u < v) edge list.
  std::vector<std::pair<std::size_t, std::size_t>> edges() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(n_edges_);
    for (std::size_t u = 0; u < n_; ++u)
      for (std::size_t v : adj_[u])
        if (u < v) out.emplace_back(u, v);
    return out;
  }

  std::span<const double> feature(std::size_t u) const {
    return std::span<const double>(features_).subspan(u * d_, d_);
  }
  std::span<double> feature(std::size_t u) { return std::span<double>(features_).subspan(u * d_, d_); }
  const std::vector<double>& features() const { return features_; }
  std::vector<double>& features() { return features_; }

  NodeTag tag(std::size_t u) const { return tags_.at(u); }
  void set_tag(std::size_t u, NodeTag t) { tags_.at(u) = t; }

  bool operator==(const Graph& o) const {
    return n_ == o.n_ && d_ == o.d_ && adj_ == o.adj_ && features_ == o.features_;
  }

 private:
  std::size_t n_ = 0;
  std::size_t d_ = 0;
  std::size_t n_edges_ = 0;
  std::vector<std::vector<std::size_t>> adj_;
  std::vector<double> features_;
  std::vector<NodeTag> tags_;
};

inline constexpr std::size_t kUnreachable = std::numeric_limits<std::size_t>::max();

/// All-pairs shortest-walk lengths, row-major n x n.
struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<std::size_t> d;

  std::size_t operator()(std::size_t u, std::size_t v) const { return d[u * n + v]; }
};

inline std::vector<std::size_t> bfs_distances(const Graph& g, std::size_t source) {
  std::vector<std::size_t> dist(g.n_nodes(), kUnreachable);
  std::deque<std::size_t> queue{source};
  dist[source] = 0;
  while (!queue.empty()) {
    const std::size_t u = queue.front();
    queue.pop_front();
    for (std::size_t v : g.neighbors(u)) {
      if (dist[v] == kUnreachable) {
        dist[v] = dist[u] + 1;
        queue.push_back(v);
      }
    }
  }
  return dist;
}

inline DistanceMatrix shortest_walk_distances(const Graph& g) {
  DistanceMatrix m{g.n_nodes(), std::vector<std::size_t>(g.n_nodes() * g.n_nodes())};
  for (std::size_t u = 0; u < g.n_nodes(); ++u) {
    auto row = bfs_distances(g, u);
    std::copy(row.begin(), row.end(), m.d.begin() + static_cast<std::ptrdiff_t>(u * m.n));
  }
  return m;
}

inline bool is_connected(const Graph& g) {
  if (g.n_nodes() == 0) return true;
  auto d = bfs_distances(g, 0);
  return std::none_of(d.begin(), d.end(), [](std::size_t x) { return x == kUnreachable; });
}

/// N_u^(l) = { v : d(u, v) = l } for l = 1..L, each list sorted.
class KHopIndex {
 public:
  KHopIndex() = default;
  KHopIndex(std::size_t layers, std::vector<std::vector<std::vector<std::size_t>>> sets)
      : layers_(layers), sets_(std::move(sets)) {}

  std::size_t layers() const { return layers_; }
  std::size_t n_nodes() const { return sets_.empty() ? 0 : sets_[0].size(); }

  /// `layer` is 1-based.
  const std::vector<std::size_t>& at(std::size_t layer, std::size_t u) const {
    if (layer < 1 || layer > layers_) throw std::out_of_range("KHopIndex layer out of range");
    return sets_[layer - 1][u];
  }

 private:
  std::size_t layers_ = 0;
  std::vector<std::vector<std::vector<std::size_t>>> sets_;
};

inline KHopIndex khop_index(const Graph& g, std::size_t layers) {
  if (layers < 1) throw std::invalid_argument("khop_index: layer count must be >= 1");
  std::vector<std::vector<std::vector<std::size_t>>> sets(
      layers, std::vector<std::vector<std::size_t>>(g.n_nodes()));
  for (std::size_t u = 0; u < g.n_nodes(); ++u) {
    const auto dist = bfs_distances(g, u);
    for (std::size_t v = 0; v < g.n_nodes(); ++v) {
      if (dist[v] != kUnreachable && dist[v] >= 1 && dist[v] <= layers) sets[dist[v] - 1][u].push_back(v);
    }
  }
  return KHopIndex(layers, std::move(sets));
}

namespace detail {

/// D^-1/2 (A + I) D^-1/2 over an arbitrary symmetric neighbor structure.
inline std::shared_ptr<SparseMatrix> normalized_with_self_loops(
    const std::vector<std::vector<std::size_t>>& nbrs) {
  const std::size_t n = nbrs.size();
  auto s = std::make_shared<SparseMatrix>();
  s->rows = s->cols = n;
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t u = 0; u < n; ++u) inv_sqrt_deg[u] = 1.0 / std::sqrt(static_cast<double>(nbrs[u].size() + 1));
  for (std::size_t u = 0; u < n; ++u) {
    // self-loop merged into sorted order
    bool self_done = false;
    for (std::size_t v : nbrs[u]) {
      if (!self_done && u < v) {
        s->col.push_back(u);
        s->weight.push_back(inv_sqrt_deg[u] * inv_sqrt_deg[u]);
        self_done = true;
      }
      s->col.push_back(v);
      s->weight.push_back(inv_sqrt_deg[u] * inv_sqrt_deg[v]);
    }
    if (!self_done) {
      s->col.push_back(u);
      s->weight.push_back(inv_sqrt_deg[u] * inv_sqrt_deg[u]);
    }
    s->row_ptr.push_back(s->col.size());
  }
  return s;
}

inline Eigen::MatrixXd to_dense(const SparseMatrix& s) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t e = s.row_ptr[r]; e < s.row_ptr[r + 1]; ++e)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s.col[e])) += s.weight[e];
  return m;
}

}  // namespace detail

/// GCN operator D̃^-1/2 Ã D̃^-1/2 with Ã = A + I, in CSR form.
inline std::shared_ptr<SparseMatrix> gcn_message_operator(const Graph& g) {
  std::vector<std::vector<std::size_t>> nbrs(g.n_nodes());
  for (std::size_t u = 0; u < g.n_nodes(); ++u) nbrs[u] = g.neighbors(u);
  return detail::normalized_with_self_loops(nbrs);
}

inline Eigen::MatrixXd gcn_message_matrix(const Graph& g) {
  return detail::to_dense(*gcn_message_operator(g));
}

/// Same normalization over the hop-`layer` edge set { (u,v) : d(u,v) = layer }
/// plus self-loops, with degrees counted in that edge set.
inline std::shared_ptr<SparseMatrix> khop_gcn_message_operator(const KHopIndex& idx, std::size_t layer) {
  std::vector<std::vector<std::size_t>> nbrs(idx.n_nodes());
  for (std::size_t u = 0; u < idx.n_nodes(); ++u) nbrs[u] = idx.at(layer, u);
  return detail::normalized_with_self_loops(nbrs);
}

inline Eigen::MatrixXd khop_gcn_message_matrix(const Graph& g, std::size_t layer) {
  if (layer < 1) throw std::invalid_argument("khop_gcn_message_matrix: layer must be >= 1");
  return detail::to_dense(*khop_gcn_message_operator(khop_index(g, layer), layer));
}

// ---------------------------------------------------------------------------
// Text serialization
//
//   n d_in
//   <n lines of d_in reals>     (omitted when d_in == 0)
//   u v                         (one line per undirected edge, u < v)
//   <blank line>                (terminates the block; end of file also accepted)

inline std::string format_real(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_graph(std::ostream& os, const Graph& g) {
  os << g.n_nodes() << ' ' << g.feature_dim() << '\n';
  if (g.feature_dim() > 0) {
    for (std::size_t u = 0; u < g.n_nodes(); ++u) {
      auto f = g.feature(u);
      for (std::size_t j = 0; j < f.size(); ++j) os << (j ? " " : "") << format_real(f[j]);
      os << '\n';
    }
  }
  for (auto [u, v] : g.edges()) os << u << ' ' << v << '\n';
  os << '\n';
}

class GraphFormatError : public std::runtime_error {
 public:
  GraphFormatError(const std::string& what, std::size_t line)
      : std::runtime_error("graph format error at line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Reads one graph block. Returns nullopt at end of input.
inline std::optional<Graph> read_graph(std::istream& is, std::size_t* line_counter = nullptr) {
  std::size_t local = 0;
  std::size_t& line_no = line_counter ? *line_counter : local;
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string::npos) break;
    line.clear();
  }
  if (line.find_first_not_of(" \t\r") == std::string::npos) return std::nullopt;
  std::istringstream header(line);
  std::size_t n = 0, d = 0;
  if (!(header >> n >> d)) throw GraphFormatError("expected header 'n d_in'", line_no);
  Graph g(n, d);
  if (d > 0) {
    for (std::size_t u = 0; u < n; ++u) {
      if (!std::getline(is, line)) throw GraphFormatError("missing feature line", line_no + 1);
      ++line_no;
      std::istringstream fs(line);
      for (std::size_t j = 0; j < d; ++j) {
        std::string tok;
        if (!(fs >> tok)) throw GraphFormatError("expected " + std::to_string(d) + " features", line_no);
        g.feature(u)[j] = std::stod(tok);
      }
    }
  }
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) break;
    std::istringstream es(line);
    std::size_t u = 0, v = 0;
    if (!(es >> u >> v)) throw GraphFormatError("expected edge 'u v'", line_no);
    try {
      if (!g.add_edge(u, v)) throw GraphFormatError("duplicate edge", line_no);
    } catch (const std::out_of_range& e) {
      throw GraphFormatError(e.what(), line_no);
    } catch (const std::invalid_argument& e) {
      throw GraphFormatError(e.what(), line_no);
    }
  }
  return g;
}

}  // namespace glstm
