#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <iomanip>
#include <sstream>

#include "glstm/checkpoint.hpp"
#include "glstm/gradcheck.hpp"
#include "glstm/models.hpp"
#include "glstm/tasks.hpp"
#include "test_util.hpp"

using namespace glstm;
using glstm::test::random_tensor;

namespace {

Graph star(std::size_t leaves, std::size_t d) {
  Graph g(leaves + 1, d);
  for (std::size_t i = 1; i <= leaves; ++i) g.add_edge(0, i);
  return g;
}

HeadParams random_head(Rng& rng, std::size_t dh, std::size_t dk, double scale = 1.0) {
  auto r = [&](Shape s) { return random_tensor(rng, std::move(s), -scale, scale); };
  return {r({dk, 2 * dh}), r({dk}), r({dk, dh}), r({dk}), r({dk, dh}), r({dk}),
          r({dk, dh}),     r({dk}), r({1, dh}),  r({1}),  r({1, dh}),  r({1})};
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t.at(i, j);
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::fabs(a[i] - b[i]));
  return d;
}

ModelConfig small_glstm(std::size_t in = 3) {
  ModelConfig c;
  c.arch = Architecture::kGlstm;
  c.layers = 2;
  c.hidden = 6;
  c.memory = 4;
  c.input_dim = in;
  c.output_dim = 2;
  return c;
}

ModelConfig small_gcn(std::size_t in = 3) {
  ModelConfig c = small_glstm(in);
  c.arch = Architecture::kGcn;
  c.k_hop = false;
  c.activation = Activation::kTanh;
  return c;
}

Graph random_featured_graph(Rng& rng, std::size_t n, std::size_t d) {
  const Graph shape = erdos_renyi(n, 0.4, rng);
  Graph g(n, d);
  for (auto [u, v] : shape.edges()) g.add_edge(u, v);
  for (double& x : g.features()) x = rng.uniform(-1, 1);
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// GCN

TEST(GcnLayer, IdentityExamples) {
  const Tensor eye2 = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Graph one(1, 2);
  auto op1 = gcn_message_operator(one);
  EXPECT_EQ(gcn_layer(Tensor::matrix(1, 2, {0.3, -2}), op1, eye2, Activation::kNone).values(),
            (std::vector<double>{0.3, -2}));
  Graph two(2, 2);
  two.add_edge(0, 1);
  const Tensor y = gcn_layer(Tensor::matrix(2, 2, {1, 0, 0, 1}), gcn_message_operator(two), eye2, Activation::kNone);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(GcnLayer, MatchesDenseOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(10), d = 1 + rng.below(4), o = 1 + rng.below(4);
    Graph g = erdos_renyi(n, 0.3, rng);
    Tensor h = random_tensor(rng, {n, d}), w = random_tensor(rng, {o, d});
    const Tensor y = gcn_layer(h, gcn_message_operator(g), w, Activation::kTanh);
    const Eigen::MatrixXd want = (gcn_message_matrix(g) * to_eigen(h) * to_eigen(w).transpose()).array().tanh();
    EXPECT_LE((to_eigen(y) - want).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// q / k / v

TEST(GlstmQkv, EmptyNeighborhoodAndZeros) {
  Rng rng(2);
  const HeadParams hp = random_head(rng, 3, 2);
  const auto ls = make_layer_structure({{}});
  const Tensor x = random_tensor(rng, {1, 3});
  const Qkv qkv = glstm_qkv(x, ls, hp);
  const Tensor want = linear(concat(x, Tensor::zeros({1, 3})), hp.wq, hp.bq);
  EXPECT_EQ(qkv.q.values(), want.values());

  HeadParams zb = hp;
  zb.bq = Tensor::zeros({2});
  zb.bk = Tensor::zeros({2});
  zb.bv = Tensor::zeros({2});
  const auto ls3 = make_layer_structure({{1, 2}, {0}, {0}});
  const Qkv z = glstm_qkv(Tensor::zeros({3, 3}), ls3, zb);
  const std::vector<const Tensor*> all{&z.q, &z.k, &z.v};
  for (const Tensor* t : all)
    for (double v : t->values()) EXPECT_EQ(v, 0.0);
}

TEST(GlstmQkv, MatchesNaiveLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(7), dh = 1 + rng.below(4), dk = 1 + rng.below(4);
    Graph g = erdos_renyi(n, 0.4, rng);
    const auto nb = layer_neighborhoods(g, 1, false);
    const auto ls = make_layer_structure(nb[0]);
    const HeadParams hp = random_head(rng, dh, dk);
    const Tensor x = random_tensor(rng, {n, dh});
    const Qkv qkv = glstm_qkv(x, ls, hp);
    for (std::size_t u = 0; u < n; ++u) {
      std::vector<double> agg(dh, 0.0);
      for (std::size_t v : g.neighbors(u))
        for (std::size_t j = 0; j < dh; ++j) agg[j] += x.at(v, j);
      for (std::size_t a = 0; a < dk; ++a) {
        double q = hp.bq[a], k = 0, v = hp.bv[a];
        for (std::size_t j = 0; j < dh; ++j) {
          q += hp.wq.at(a, j) * x.at(u, j) + hp.wq.at(a, dh + j) * agg[j];
          k += hp.wk.at(a, j) * x.at(u, j);
          v += hp.wv.at(a, j) * x.at(u, j);
        }
        k = k / std::sqrt(static_cast<double>(dk)) + hp.bk[a];
        EXPECT_NEAR(qkv.q.at(u, a), q, 1e-12);
        EXPECT_NEAR(qkv.k.at(u, a), k, 1e-12);
        EXPECT_NEAR(qkv.v.at(u, a), v, 1e-12);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Gates

TEST(GlstmGates, ZeroParametersGiveUnitGates) {
  HeadParams hp;
  hp.wi = Tensor::zeros({1, 3});
  hp.bi = Tensor::zeros({1});
  hp.wf = Tensor::zeros({1, 3});
  hp.bf = Tensor::zeros({1});
  hp.wo = Tensor::zeros({2, 3});
  hp.bo = Tensor::zeros({2});
  const auto ls = make_layer_structure({{1, 2}, {0}, {0}});
  Rng rng(4);
  const Gates g = glstm_gates(random_tensor(rng, {3, 3}), Tensor::zeros({3}), ls, hp);
  for (double v : g.m.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.i_edge.values()) EXPECT_EQ(v, 1.0);
  for (double v : g.f.values()) EXPECT_EQ(v, 1.0);
  for (double v : g.o.values()) EXPECT_EQ(v, 0.5);
}

TEST(GlstmGates, DominantNeighborIsStabilized) {
  // node 1's input pre-activation 10 dominates f̃ + m_prev = 0 at node 0
  HeadParams hp;
  hp.wi = Tensor::matrix(1, 1, {1.0});
  hp.bi = Tensor::zeros({1});
  hp.wf = Tensor::zeros({1, 1});
  hp.bf = Tensor::zeros({1});
  hp.wo = Tensor::zeros({1, 1});
  hp.bo = Tensor::zeros({1});
  const auto ls = make_layer_structure({{1}, {0}});
  const Gates g = glstm_gates(Tensor::matrix(2, 1, {0.0, 10.0}), Tensor::zeros({2}), ls, hp);
  EXPECT_DOUBLE_EQ(g.m[0], 10.0);
  // edges of node 0: (0 -> 0), (1 -> 0)
  EXPECT_EQ(ls.edges->src[1], 1u);
  EXPECT_DOUBLE_EQ(g.i_edge[1], 1.0);
  EXPECT_NEAR(g.f[0], std::exp(-10.0), 1e-18);
  EXPECT_LT(g.f[0], 1.0);
}

TEST(GlstmGates, BoundedAndRatiosMatchUnstabilized) {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.below(8), dh = 1 + rng.below(4);
    Graph g = erdos_renyi(n, 0.4, rng);
    const auto ls = make_layer_structure(layer_neighborhoods(g, 1, false)[0]);
    const HeadParams hp = random_head(rng, dh, 2, 3.0);
    const Tensor x = random_tensor(rng, {n, dh}, -2, 2), m_prev = random_tensor(rng, {n}, -4, 4);
    const Gates gt = glstm_gates(x, m_prev, ls, hp);
    for (double v : gt.i_edge.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (double v : gt.f.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (std::size_t e = 0; e < ls.edges->size(); ++e) {
      const std::size_t v = ls.edges->src[e], u = ls.edges->dst[e];
      const double ratio = gt.i_edge[e] / gt.f[u];
      const double want = std::exp(gt.i_tilde[v] - gt.f_tilde[u] - m_prev[u]);
      EXPECT_NEAR(ratio / want, 1.0, 1e-10);
    }
  }
}

TEST(GlstmGates, NonFinitePreActivationIsAStructuredError) {
  HeadParams hp;
  hp.wi = Tensor::matrix(1, 1, {1.0});
  hp.bi = Tensor::zeros({1});
  hp.wf = Tensor::zeros({1, 1});
  hp.bf = Tensor::zeros({1});
  hp.wo = Tensor::zeros({1, 1});
  hp.bo = Tensor::zeros({1});
  const auto ls = make_layer_structure({{}});
  EXPECT_THROW(glstm_gates(Tensor::matrix(1, 1, {std::nan("")}), Tensor::zeros({1}), ls, hp), NumericError);
}

TEST(GlstmGates, SwitchedOffGatesAreUnit) {
  Rng rng(6);
  const HeadParams hp = random_head(rng, 3, 2, 2.0);
  const auto ls = make_layer_structure({{1}, {0}});
  const Gates g = glstm_gates(random_tensor(rng, {2, 3}), Tensor::zeros({2}), ls, hp, {false, false, false});
  for (double v : g.i_edge.values()) EXPECT_EQ(v, 1.0);
  for (double v : g.f.values()) EXPECT_EQ(v, 1.0);
  for (double v : g.o.values()) EXPECT_EQ(v, 1.0);
}

// ---------------------------------------------------------------------------
// State update and retrieval

TEST(GlstmStateUpdate, SelfOnlyAndDecayOnly) {
  Rng rng(7);
  const auto ls = make_layer_structure({{}});
  HeadState prev{random_tensor(rng, {1, 2, 3}), random_tensor(rng, {1, 3}), Tensor::zeros({1})};
  Gates g;
  g.i_edge = Tensor::vector({1.0});
  g.f = Tensor::vector({1.0});
  g.m = Tensor::zeros({1});
  Qkv qkv{Tensor(), random_tensor(rng, {1, 3}), random_tensor(rng, {1, 2})};
  const HeadState s = glstm_state_update(prev, g, qkv, ls);
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      EXPECT_NEAR(s.C.at(0, a, b), prev.C.at(0, a, b) + qkv.v.at(0, a) * qkv.k.at(0, b), 1e-15);

  g.f = Tensor::vector({0.3});
  qkv.v = Tensor::zeros({1, 2});
  const HeadState d = glstm_state_update(prev, g, qkv, ls);
  for (std::size_t i = 0; i < d.C.size(); ++i) EXPECT_EQ(d.C[i], 0.3 * prev.C[i]);
}

TEST(GlstmStateUpdate, StarMatchesTripleLoop) {
  Rng rng(8);
  const Graph g = star(3, 0);
  const auto ls = make_layer_structure(layer_neighborhoods(g, 1, false)[0]);
  const std::size_t n = 4, dv = 2, dk = 3;
  HeadState prev{random_tensor(rng, {n, dv, dk}), random_tensor(rng, {n, dk}), Tensor::zeros({n})};
  Gates gt;
  gt.i_edge = random_tensor(rng, {ls.edges->size()}, 0.1, 1.0);
  gt.f = random_tensor(rng, {n}, 0.1, 1.0);
  gt.m = Tensor::zeros({n});
  Qkv qkv{Tensor(), random_tensor(rng, {n, dk}), random_tensor(rng, {n, dv})};
  const HeadState s = glstm_state_update(prev, gt, qkv, ls);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t a = 0; a < dv; ++a)
      for (std::size_t b = 0; b < dk; ++b) {
        double want = gt.f[u] * prev.C.at(u, a, b);
        for (std::size_t e = 0; e < ls.edges->size(); ++e)
          if (ls.edges->dst[e] == u) {
            const std::size_t v = ls.edges->src[e];
            want += gt.i_edge[e] * qkv.v.at(v, a) * qkv.k.at(v, b);
          }
        EXPECT_NEAR(s.C.at(u, a, b), want, 1e-12);
      }
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t b = 0; b < dk; ++b) {
      double want = gt.f[u] * prev.n.at(u, b);
      for (std::size_t e = 0; e < ls.edges->size(); ++e)
        if (ls.edges->dst[e] == u) want += gt.i_edge[e] * qkv.k.at(ls.edges->src[e], b);
      EXPECT_NEAR(s.n.at(u, b), want, 1e-12);
    }
  // edges are N_u ∪ {u} ordered by u then v
  EXPECT_EQ(ls.edges->size(), 4u + 3u * 2u);
}

TEST(GlstmOutput, ZeroQueryAndSinglePairRecall) {
  Rng rng(9);
  const Tensor C = random_tensor(rng, {1, 3, 2}), n = random_tensor(rng, {1, 2});
  const Tensor zero_q = glstm_output(C, n, Tensor::zeros({1, 2}));
  for (double v : zero_q.values()) EXPECT_EQ(v, 0.0);

  const Tensor k = Tensor::matrix(1, 2, {0.8, 0.9}), v = Tensor::matrix(1, 3, {0.5, -1.0, 2.0});
  const Tensor stored = batched_outer(v, k);
  const Tensor h = glstm_output(stored, k, k, Tensor::filled({1, 3}, 1.0));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(h[i], v[i], 1e-15);
}

TEST(GlstmOutput, MatchesNaiveOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(4), dv = 1 + rng.below(3), dk = 1 + rng.below(3);
    const Tensor C = random_tensor(rng, {n, dv, dk}, -2, 2), nn = random_tensor(rng, {n, dk}, -2, 2),
                 q = random_tensor(rng, {n, dk}, -2, 2);
    const Tensor h = glstm_output(C, nn, q);
    for (std::size_t u = 0; u < n; ++u) {
      double dot = 0;
      for (std::size_t b = 0; b < dk; ++b) dot += nn.at(u, b) * q.at(u, b);
      const double den = std::max(std::fabs(dot), 1.0);
      EXPECT_GE(den, 1.0);
      for (std::size_t a = 0; a < dv; ++a) {
        double num = 0;
        for (std::size_t b = 0; b < dk; ++b) num += C.at(u, a, b) * q.at(u, b);
        EXPECT_NEAR(h.at(u, a), num / den, 1e-12);
      }
    }
  }
}

TEST(GlstmOutput, OrthogonalKeysRecallTheirValues) {
  // d_k orthonormal keys scaled to |k|^2 = 2; n holds their sum
  for (std::size_t dk : {2u, 4u, 8u, 16u}) {
    Rng rng(dk);
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(dk, dk);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    const Eigen::MatrixXd keys = Eigen::MatrixXd(qr.householderQ()) * std::sqrt(2.0);
    const std::size_t dv = 5;
    std::vector<double> vals(dk * dv);
    for (double& x : vals) x = rng.uniform(-1, 1);
    std::vector<double> c(dv * dk, 0.0), nsum(dk, 0.0);
    for (std::size_t s = 0; s < dk; ++s)
      for (std::size_t i = 0; i < dv; ++i)
        for (std::size_t j = 0; j < dk; ++j) c[i * dk + j] += vals[s * dv + i] * keys(j, s);
    for (std::size_t s = 0; s < dk; ++s)
      for (std::size_t j = 0; j < dk; ++j) nsum[j] += keys(j, s);
    const Tensor C({1, dv, dk}, c), n({1, dk}, nsum);
    for (std::size_t s = 0; s < dk; ++s) {
      std::vector<double> q(dk);
      for (std::size_t j = 0; j < dk; ++j) q[j] = keys(j, s);
      const Tensor h = glstm_output(C, n, Tensor({1, dk}, q));
      for (std::size_t i = 0; i < dv; ++i) EXPECT_NEAR(h[i], vals[s * dv + i], 1e-6) << "dk=" << dk;
    }
  }
}

// ---------------------------------------------------------------------------
// Block and model

TEST(GlstmBlock, ZeroInitDownIsIdentity) {
  ModelConfig c = small_glstm();
  c.zero_init_down = true;
  Rng rng(11);
  const ParamStore p = init_params(c, rng);
  Graph g = random_featured_graph(rng, 6, 3);
  const GraphBatch b = make_batch(g, c.layers, c.k_hop);
  const Tensor h0 = linear(b.features, p.get("input.weight"), p.get("input.bias"));
  const ForwardResult r = model_forward(c, p, b);
  EXPECT_EQ(r.node_states.values(), h0.values());
}

TEST(GlstmBlock, NoGateAblationMatchesOracle) {
  ModelConfig c = small_glstm();
  c.input_gate = c.forget_gate = c.output_gate = false;
  c.layers = 1;
  c.activation = Activation::kGelu;
  Rng rng(12);
  const ParamStore p = init_params(c, rng);
  Graph g = random_featured_graph(rng, 5, 3);
  const auto nb = layer_neighborhoods(g, 1, false)[0];
  const auto ls = make_layer_structure(nb);
  const Tensor h = random_tensor(rng, {5, c.hidden});
  const BlockOutput out = glstm_block(h, initial_state(5, c), ls, p, c, 0);

  // oracle: i = f = o = 1, so C_u = Σ_{v ∈ N_u ∪ {u}} v_v ⊗ k_v
  const Tensor x = linear(layer_norm(h, p.get("block.0.norm.weight"), p.get("block.0.norm.bias")),
                          p.get("block.0.up.weight"));
  const HeadParams hp = head_params(p, 0, 0);
  const Qkv qkv = glstm_qkv(x, ls, hp);
  const std::size_t dk = c.memory;
  std::vector<double> hid(5 * dk);
  for (std::size_t u = 0; u < 5; ++u) {
    std::vector<std::size_t> members = nb[u];
    members.push_back(u);
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(dk, dk);
    Eigen::VectorXd n = Eigen::VectorXd::Zero(dk), q(dk);
    for (std::size_t v : members)
      for (std::size_t a = 0; a < dk; ++a) {
        n(a) += qkv.k.at(v, a);
        for (std::size_t bb = 0; bb < dk; ++bb) C(a, bb) += qkv.v.at(v, a) * qkv.k.at(v, bb);
      }
    for (std::size_t a = 0; a < dk; ++a) q(a) = qkv.q.at(u, a);
    const Eigen::VectorXd r = C * q / std::max(std::fabs(n.dot(q)), 1.0);
    for (std::size_t a = 0; a < dk; ++a) hid[u * dk + a] = r(a);
  }
  const Tensor normed = group_norm(Tensor({5, dk}, hid), 1, p.get("block.0.hnorm.weight"), p.get("block.0.hnorm.bias"));
  const Tensor want =
      add(h, gelu(linear(normed, p.get("block.0.down.weight"), p.get("block.0.down.bias"))));
  EXPECT_LE(max_abs_diff(out.h, want), 1e-12);
}

TEST(GlstmBlock, SingleNodeGolden) {
  ModelConfig c = small_glstm(2);
  c.layers = 1;
  Rng rng(2024);
  const ParamStore p = init_params(c, rng);
  Graph g(1, 2);
  g.feature(0)[0] = 0.25;
  g.feature(0)[1] = -0.5;
  const ForwardResult r = model_forward(c, p, make_batch(g, 1, true));
  // recorded after the component oracles above passed
  const std::vector<double> golden = {-0.0069587605897347693, 0.14609636123935493};
  ASSERT_EQ(r.output.size(), golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) EXPECT_NEAR(r.output[i], golden[i], 1e-12) << std::setprecision(17) << r.output[i];
}

TEST(GlstmModel, StabilizerInvariance) {
  // shifting every input-gate pre-activation and the initial stabilizer by c
  // leaves all gates, and hence the outputs, unchanged
  ModelConfig c = small_glstm();
  c.heads = 2;
  c.layers = 3;
  Rng rng(13);
  const ParamStore p = init_params(c, rng);
  Graph g = random_featured_graph(rng, 7, 3);
  const GraphBatch b = make_batch(g, c.layers, c.k_hop, 0);
  const Tensor base = model_forward(c, p, b).output;
  for (double shift : {-7.5, 3.0, 40.0}) {
    ParamStore q = p.clone();
    for (std::size_t l = 0; l < c.layers; ++l)
      for (std::size_t h = 0; h < c.heads; ++h) q.get(head_param(l, h, "igate.bias")).mutable_data()[0] += shift;
    ForwardOptions opt;
    opt.m_init = shift;
    const Tensor shifted = model_forward(c, q, b, opt).output;
    for (std::size_t i = 0; i < base.size(); ++i)
      EXPECT_NEAR(shifted[i], base[i], 1e-8 * std::max(1.0, std::fabs(base[i]))) << "shift " << shift;
  }
}

TEST(GlstmModel, GatesStayInUnitIntervalOnNar) {
  gate_monitor().reset();
  ModelConfig c = small_glstm();
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    c.input_dim = 4;
    const ParamStore p = init_params(c, rng);
    Graph g = random_featured_graph(rng, 3 + rng.below(10), 4);
    (void)model_forward(c, p, make_batch(g, c.layers, c.k_hop));
  }
  EXPECT_GT(gate_monitor().checked.load(), 0u);
  EXPECT_EQ(gate_monitor().violations.load(), 0u);
}

TEST(GlstmModel, NarReceptiveField) {
  const TaskInstance inst = generate_nar_instance(5, 1);
  const auto nb = layer_neighborhoods(inst.graph, 2, true);
  const std::size_t c = inst.target_node;
  EXPECT_EQ(nb[0][c], (std::vector<std::size_t>{0, 1, 2, 3, 4, 6}));
  EXPECT_EQ(nb[1][c], (std::vector<std::size_t>{7}));
  const auto plain = layer_neighborhoods(inst.graph, 2, false);
  EXPECT_EQ(plain[1][c], plain[0][c]);
}

TEST(Model, FullForwardGradientsMatchFiniteDifferences) {
  Rng rng(15);
  for (const ModelConfig& base : {small_glstm(), small_gcn()}) {
    for (int trial = 0; trial < 4; ++trial) {
      ModelConfig c = base;
      c.heads = 1 + (trial % 2);
      c.k_hop = trial % 2 == 0;
      const ParamStore p = init_params(c, rng);
      Graph g = random_featured_graph(rng, 4 + rng.below(6), 3);
      const GraphBatch b = make_batch(g, c.layers, c.k_hop, rng.below(g.n_nodes()));
      const std::vector<std::size_t> label{1};
      // input features
      auto fx = [&](const Tensor& x) { return cross_entropy(model_forward(c, p, b, x).output, label); };
      EXPECT_LT(finite_difference_check(fx, b.features, 1e-5, 1e-5), 1e-4);
      // every parameter tensor
      for (const auto& [name, t] : p.items()) {
        auto fp = [&, name = name](const Tensor& w) {
          ParamStore q = p.frozen();
          q.get(name) = w;
          return cross_entropy(model_forward(c, q, b).output, label);
        };
        EXPECT_LT(finite_difference_check(fp, t, 1e-5, 1e-5), 1e-4) << name;
      }
    }
  }
}

TEST(Model, BatchedForwardEqualsPerGraph) {
  Rng rng(16);
  for (const ModelConfig& c : {small_glstm(), small_gcn()}) {
    const ParamStore p = init_params(c, rng);
    std::vector<Graph> graphs;
    std::vector<LayerNeighborhoods> nbs;
    std::vector<std::size_t> targets;
    for (int i = 0; i < 5; ++i) {
      graphs.push_back(random_featured_graph(rng, 2 + rng.below(6), 3));
      targets.push_back(rng.below(graphs.back().n_nodes()));
    }
    for (const auto& g : graphs) nbs.push_back(layer_neighborhoods(g, c.layers, c.k_hop));
    std::vector<const Graph*> gp;
    std::vector<const LayerNeighborhoods*> np;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
      gp.push_back(&graphs[i]);
      np.push_back(&nbs[i]);
    }
    const GraphBatch b = make_batch(gp, np, targets);
    const Tensor all = model_forward(c, p, b).output;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
      const Tensor one = model_forward(c, p, make_batch(graphs[i], c.layers, c.k_hop, targets[i])).output;
      for (std::size_t j = 0; j < one.size(); ++j) EXPECT_NEAR(all.at(i, j), one[j], 1e-12);
    }
  }
}

TEST(Model, ReadoutModes) {
  Rng rng(17);
  ModelConfig c = small_gcn();
  Graph g = random_featured_graph(rng, 5, 3);
  c.readout = Readout::kAllNodes;
  ParamStore p = init_params(c, rng);
  const GraphBatch b = make_batch(g, c.layers, c.k_hop, 2);
  const ForwardResult all = model_forward(c, p, b);
  EXPECT_EQ(all.output.shape(), (Shape{5, 2}));
  c.readout = Readout::kMeanPool;
  const ForwardResult pooled = model_forward(c, p, b);
  EXPECT_EQ(pooled.output.shape(), (Shape{1, 2}));
  // mean-pool then linear equals the mean of per-node linear outputs
  for (std::size_t j = 0; j < 2; ++j) {
    double mean = 0;
    for (std::size_t u = 0; u < 5; ++u) mean += all.output.at(u, j) / 5;
    EXPECT_NEAR(pooled.output.at(0, j), mean, 1e-12);
  }
  c.readout = Readout::kTargetNode;
  const ForwardResult target = model_forward(c, p, b);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(target.output.at(0, j), all.output.at(2, j), 1e-15);
}

TEST(Model, ConfigGraphMismatchIsRejected) {
  Rng rng(18);
  ModelConfig c = small_glstm();
  const ParamStore p = init_params(c, rng);
  Graph g = random_featured_graph(rng, 4, 3);
  EXPECT_THROW(model_forward(c, p, make_batch(g, 3, true)), std::invalid_argument);
  Graph wrong = random_featured_graph(rng, 4, 5);
  EXPECT_THROW(model_forward(c, p, make_batch(wrong, 2, true)), ShapeError);
  c.heads = 0;
  EXPECT_THROW(init_params(c, rng), ConfigError);
}

TEST(Init, GateBiasesFollowConvention) {
  ModelConfig c = small_glstm();
  c.heads = 4;
  c.hidden = 8;
  Rng rng(19);
  const ParamStore p = init_params(c, rng);
  for (std::size_t h = 0; h < 4; ++h) {
    EXPECT_DOUBLE_EQ(p.get(head_param(1, h, "fgate.bias"))[0], 3.0 + static_cast<double>(h));
    EXPECT_DOUBLE_EQ(p.get(head_param(1, h, "igate.bias"))[0], 0.0);
  }
  c.heads = 1;
  EXPECT_DOUBLE_EQ(init_params(c, rng).get(head_param(0, 0, "fgate.bias"))[0], 3.0);
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng(20);
  for (const ModelConfig& c : {small_glstm(), small_gcn()}) {
    const ParamStore p = init_params(c, rng);
    std::stringstream ss;
    write_checkpoint(ss, c, p);
    const Checkpoint ck = read_checkpoint(ss);
    EXPECT_EQ(ck.config, c);
    ASSERT_EQ(ck.params.size(), p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_EQ(ck.params.items()[i].first, p.items()[i].first);
      EXPECT_EQ(ck.params.items()[i].second.shape(), p.items()[i].second.shape());
      EXPECT_EQ(ck.params.items()[i].second.values(), p.items()[i].second.values());
    }
  }
}

TEST(Checkpoint, CorruptInputIsRejected) {
  std::stringstream bad("NOTACKPT");
  EXPECT_THROW(read_checkpoint(bad), CheckpointError);
  Rng rng(21);
  std::stringstream ss;
  write_checkpoint(ss, small_gcn(), init_params(small_gcn(), rng));
  const std::string full = ss.str();
  std::stringstream truncated(full.substr(0, full.size() / 2));
  EXPECT_THROW(read_checkpoint(truncated), CheckpointError);
}
