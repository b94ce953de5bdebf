// Copyright 2026 The Brainformer Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <tuple>
#include <vector>

#include "brainformer/layers.hpp"
#include "support/oracles.hpp"

using namespace brainformer;

namespace {

using Triple = std::tuple<int, int, double>;

std::vector<Triple> sorted(const std::vector<Assignment>& a) {
  std::vector<Triple> out;
  for (const auto& x : a) out.emplace_back(x.token, x.expert, x.weight);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Triple> sorted(const std::vector<oracle::Route>& a) {
  std::vector<Triple> out;
  for (const auto& x : a) out.emplace_back(x.token, x.expert, x.weight);
  std::sort(out.begin(), out.end());
  return out;
}

Matrix row_softmax(const Matrix& logits) {
  Matrix s(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    std::vector<double> v(logits.row(r).data(), logits.row(r).data() + logits.cols());
    const auto p = oracle::softmax(v);
    for (Index c = 0; c < logits.cols(); ++c) s(r, c) = p[static_cast<std::size_t>(c)];
  }
  return s;
}

// Owns the Parameters behind an FFN so tests can bind them to any tape.
struct FfnParams {
  Parameter w_in, w_gate, w_out;
  bool gated = false;

  FfnParams(int d, int hidden, Activation a, std::mt19937_64& rng, double scale = 0.5)
      : w_in("w_in", oracle::random_matrix(d, hidden, rng, scale)),
        w_gate("w_gate", oracle::random_matrix(d, hidden, rng, scale)),
        w_out("w_out", oracle::random_matrix(hidden, d, rng, scale)),
        gated(is_gated(a)) {}

  FfnWeights bind(Tape& t) {
    FfnWeights w{t.parameter(w_in), {}, t.parameter(w_out)};
    if (gated) w.w_gate = t.parameter(w_gate);
    return w;
  }
  std::vector<Parameter*> params() {
    std::vector<Parameter*> p{&w_in, &w_out};
    if (gated) p.push_back(&w_gate);
    return p;
  }
};

struct MoeParams {
  Parameter router;
  std::vector<std::unique_ptr<FfnParams>> experts;

  MoeParams(const MoeConfig& c, std::mt19937_64& rng)
      : router("router", oracle::random_matrix(c.model_dim, c.n_experts, rng)) {
    for (int e = 0; e < c.n_experts; ++e) {
      experts.push_back(std::make_unique<FfnParams>(c.model_dim, c.expert_hidden_dim, c.activation, rng));
    }
  }
  MoeWeights bind(Tape& t) {
    MoeWeights w{t.parameter(router), {}};
    for (auto& e : experts) w.experts.push_back(e->bind(t));
    return w;
  }
  std::vector<Parameter*> params() {
    std::vector<Parameter*> p{&router};
    for (auto& e : experts) {
      for (Parameter* q : e->params()) p.push_back(q);
    }
    return p;
  }
};

Var probe(Tape& t, const Var& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, t.constant(oracle::random_matrix(out.rows(), out.cols(), rng))));
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("single token output is its value projection through the output projection") {
    std::mt19937_64 rng(1);
    const AttentionConfig cfg{6, 2, 3};
    const Matrix x = oracle::random_matrix(1, 6, rng);
    const Matrix wq = oracle::random_matrix(6, 6, rng), wk = oracle::random_matrix(6, 6, rng),
                 wv = oracle::random_matrix(6, 6, rng), wo = oracle::random_matrix(6, 6, rng);
    Tape t;
    const Matrix y = attention_forward(t.constant(x), cfg,
                                       {t.constant(wq), t.constant(wk), t.constant(wv), t.constant(wo)})
                         .value();
    const Matrix want = x * wv * wo;
    CHECK((y - want).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("later tokens never change earlier outputs") {
    std::mt19937_64 rng(2);
    const AttentionConfig cfg{8, 2, 4};
    const Matrix wq = oracle::random_matrix(8, 8, rng), wk = oracle::random_matrix(8, 8, rng),
                 wv = oracle::random_matrix(8, 8, rng), wo = oracle::random_matrix(8, 8, rng);
    const Matrix x = oracle::random_matrix(6, 8, rng);
    auto run = [&](const Matrix& in) {
      Tape t;
      return Matrix(attention_forward(t.constant(in), cfg,
                                      {t.constant(wq), t.constant(wk), t.constant(wv), t.constant(wo)})
                        .value());
    };
    const Matrix base = run(x);
    for (Index j = 0; j < 6; ++j) {
      Matrix x2 = x;
      x2.row(j) = oracle::random_matrix(1, 8, rng, 10.0);
      const Matrix y = run(x2);
      for (Index i = 0; i < j; ++i) CHECK(y.row(i) == base.row(i));
    }
  }

  TEST_CASE("one head over two tokens matches hand-computed scalars") {
    // d=2, h=1, d_head=1; wq=[1,0]^T, wk=[0,1]^T, wv=[1,1]^T, wo=[1,2].
    Matrix x(2, 2);
    x << 1.0, 2.0, 3.0, -1.0;
    Matrix wq(2, 1), wk(2, 1), wv(2, 1), wo(1, 2);
    wq << 1, 0;
    wk << 0, 1;
    wv << 1, 1;
    wo << 1, 2;
    // q = [1,3], k = [2,-1], v = [3,2]
    // row 0: only itself, ctx = 3 -> [3, 6]
    // row 1: scores 3*2=6, 3*-1=-3; p = softmax([6,-3]); ctx = 3 p0 + 2 p1
    const double p0 = std::exp(6.0) / (std::exp(6.0) + std::exp(-3.0));
    const double ctx1 = 3.0 * p0 + 2.0 * (1.0 - p0);
    Tape t;
    const Matrix y = attention_forward(t.constant(x), {2, 1, 1},
                                       {t.constant(wq), t.constant(wk), t.constant(wv), t.constant(wo)})
                         .value();
    CHECK(y(0, 0) == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(y(0, 1) == doctest::Approx(6.0).epsilon(1e-14));
    CHECK(y(1, 0) == doctest::Approx(ctx1).epsilon(1e-14));
    CHECK(y(1, 1) == doctest::Approx(2.0 * ctx1).epsilon(1e-14));
  }

  TEST_CASE("multi-head output matches a per-head scalar loop") {
    std::mt19937_64 rng(3);
    const AttentionConfig cfg{5, 3, 2};
    const Matrix x = oracle::random_matrix(4, 5, rng);
    const Matrix wq = oracle::random_matrix(5, 6, rng), wk = oracle::random_matrix(5, 6, rng),
                 wv = oracle::random_matrix(5, 6, rng), wo = oracle::random_matrix(6, 5, rng);
    Tape t;
    const Matrix y = attention_forward(t.constant(x), cfg,
                                       {t.constant(wq), t.constant(wk), t.constant(wv), t.constant(wo)})
                         .value();
    const auto want = oracle::attention(oracle::to_grid(x), oracle::to_grid(wq), oracle::to_grid(wk),
                                        oracle::to_grid(wv), oracle::to_grid(wo), 3, 2);
    for (Index i = 0; i < 4; ++i) {
      for (Index j = 0; j < 5; ++j) CHECK(std::abs(y(i, j) - want[i][j]) < 1e-12);
    }
  }

  TEST_CASE("gradients agree with finite differences") {
    std::mt19937_64 rng(4);
    Parameter x("x", oracle::random_matrix(3, 4, rng)), wq("wq", oracle::random_matrix(4, 4, rng, 0.5)),
        wk("wk", oracle::random_matrix(4, 4, rng, 0.5)), wv("wv", oracle::random_matrix(4, 4, rng, 0.5)),
        wo("wo", oracle::random_matrix(4, 4, rng, 0.5));
    const auto rep = oracle::check_gradients({&x, &wq, &wk, &wv, &wo}, [&](Tape& t) {
      return probe(t,
                   attention_forward(t.parameter(x), {4, 2, 2},
                                     {t.parameter(wq), t.parameter(wk), t.parameter(wv), t.parameter(wo)}),
                   5);
    });
    CHECK_MESSAGE(rep.max_rel_error < 1e-4, rep.worst);
  }
}

TEST_SUITE("ffn") {
  TEST_CASE("zero weights give zero output") {
    Tape t;
    const Var z_in = t.constant(Matrix::Zero(3, 5)), z_out = t.constant(Matrix::Zero(5, 3));
    const Var x = t.constant(Matrix::Random(4, 3));
    for (Activation a : {Activation::ReLU, Activation::GeLU, Activation::GatedReLU, Activation::GatedGeLU}) {
      const Matrix y = ffn_forward(x, {3, 5, a}, {z_in, z_in, z_out}).value();
      CHECK(y.isZero(0.0));
    }
  }

  TEST_CASE("relu with identity projections passes positive input through") {
    Matrix x(2, 3);
    x << 1, 2, 3, 0.5, 4, 7;
    Tape t;
    const Var id = t.constant(Matrix::Identity(3, 3));
    const Matrix y = ffn_forward(t.constant(x), {3, 3, Activation::ReLU}, {id, {}, id}).value();
    CHECK(y == x);
  }

  TEST_CASE("matches an explicit two-matmul computation for every activation") {
    std::mt19937_64 rng(7);
    for (Activation a : {Activation::ReLU, Activation::GeLU, Activation::GatedReLU, Activation::GatedGeLU}) {
      const Matrix x = oracle::random_matrix(4, 3, rng);
      FfnParams p(3, 5, a, rng);
      Tape t;
      const Matrix y = ffn_forward(t.constant(x), {3, 5, a}, p.bind(t)).value();
      const oracle::Grid g = oracle::to_grid(p.w_gate.value);
      const auto want = oracle::ffn(oracle::to_grid(x), oracle::to_grid(p.w_in.value),
                                    oracle::gated(a) ? &g : nullptr, oracle::to_grid(p.w_out.value), a);
      for (Index i = 0; i < 4; ++i) {
        for (Index j = 0; j < 3; ++j) CHECK(std::abs(y(i, j) - want[i][j]) < 1e-12);
      }
    }
  }

  TEST_CASE("gated kind without a gate projection is rejected") {
    Tape t;
    const Var w = t.constant(Matrix::Ones(2, 2));
    CHECK_THROWS_AS(ffn_forward(t.constant(Matrix::Ones(1, 2)), {2, 2, Activation::GatedGeLU}, {w, {}, w}),
                    Error);
  }
}

TEST_SUITE("gate_scores") {
  TEST_CASE("zero router gives uniform rows") {
    Tape t;
    const Matrix s = gate_scores(t.constant(Matrix::Random(3, 4)), t.constant(Matrix::Zero(4, 5))).value();
    for (Index i = 0; i < s.size(); ++i) CHECK(s.data()[i] == doctest::Approx(0.2));
  }

  TEST_CASE("rows sum to one on random input") {
    std::mt19937_64 rng(9);
    Tape t;
    const Matrix s = gate_scores(t.constant(oracle::random_matrix(10, 6, rng, 3.0)),
                                 t.constant(oracle::random_matrix(6, 8, rng, 3.0)))
                         .value();
    for (Index r = 0; r < s.rows(); ++r) CHECK(std::abs(s.row(r).sum() - 1.0) <= 1e-12);
  }

  TEST_CASE("small logits match scalar exp-normalize") {
    // x = I4, so logits = W_g.
    Matrix w(4, 4);
    w << 0.1, 0.2, 0.3, 0.4, -0.5, 0.0, 0.5, 1.0, 2.0, -1.0, 0.0, 0.0, 0.3, 0.3, 0.3, -0.9;
    Tape t;
    const Matrix s = gate_scores(t.constant(Matrix::Identity(4, 4)), t.constant(w)).value();
    const Matrix want = row_softmax(w);
    CHECK((s - want).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_SUITE("route_top2") {
  TEST_CASE("two experts without capacity pressure take every token") {
    std::mt19937_64 rng(10);
    const Matrix s = row_softmax(oracle::random_matrix(5, 2, rng));
    const RoutingDecision d = route_top2(s, 5);
    CHECK(d.assignments.size() == 10);
    CHECK(d.token_load(5) == std::vector<int>(5, 2));
    CHECK(d.dropped_tokens.empty());
  }

  TEST_CASE("shared favourite expert fills in token order") {
    Matrix s(4, 4);
    s << 0.7, 0.2, 0.05, 0.05,  //
        0.6, 0.3, 0.05, 0.05,   //
        0.5, 0.1, 0.3, 0.1,     //
        0.4, 0.35, 0.15, 0.1;
    const RoutingDecision d = route_top2(s, 1);
    CHECK(sorted(d.assignments) == sorted(oracle::top2(oracle::to_grid(s), 1)));
    // token 0: e0 e1; token 1: both full -> dropped; token 2: e2; token 3: none left
    CHECK(d.token_load(4) == std::vector<int>{2, 0, 1, 0});
    CHECK(d.dropped_tokens == std::vector<int>{1, 3});
  }

  TEST_CASE("random scores respect capacity and match the greedy simulation") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
      const int n = 1 + static_cast<int>(rng() % 12), e = 2 + static_cast<int>(rng() % 6);
      const int cap = 1 + static_cast<int>(rng() % 4);
      const Matrix s = row_softmax(oracle::random_matrix(n, e, rng, 2.0));
      const RoutingDecision d = route_top2(s, cap);
      for (int load : d.expert_load(e)) CHECK(load <= cap);
      for (int load : d.token_load(n)) CHECK(load <= 2);
      CHECK(sorted(d.assignments) == sorted(oracle::top2(oracle::to_grid(s), cap)));
    }
  }

  TEST_CASE("single expert degenerates to top-1") {
    const RoutingDecision d = route_top2(Matrix::Ones(3, 1), 3);
    CHECK(d.token_load(3) == std::vector<int>{1, 1, 1});
  }
}

TEST_SUITE("route_expert_choice") {
  TEST_CASE("capacity factor one routes to a single expert on average") {
    std::mt19937_64 rng(12);
    const Matrix s = row_softmax(oracle::random_matrix(4, 4, rng));
    const RoutingDecision d = route_expert_choice(s, expert_capacity(1, 4, 4));
    CHECK(d.capacity == 1);
    CHECK(d.assignments.size() == 4);
    CHECK(d.expert_load(4) == std::vector<int>{1, 1, 1, 1});
  }

  TEST_CASE("distinct per-expert maxima are each expert's pick") {
    Matrix s(3, 3);
    s << 0.8, 0.1, 0.1, 0.1, 0.7, 0.2, 0.2, 0.2, 0.6;
    const RoutingDecision d = route_expert_choice(s, 1);
    CHECK(sorted(d.assignments) == std::vector<Triple>{{0, 0, 0.8}, {1, 1, 0.7}, {2, 2, 0.6}});
  }

  TEST_CASE("random 6x3 scores with k=2 match the per-column sort") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 100; ++trial) {
      const Matrix s = row_softmax(oracle::random_matrix(6, 3, rng));
      const RoutingDecision d = route_expert_choice(s, 2);
      CHECK(sorted(d.assignments) == sorted(oracle::expert_choice(oracle::to_grid(s), 2)));
      CHECK(d.expert_load(3) == std::vector<int>{2, 2, 2});
    }
  }

  TEST_CASE("unselected tokens are listed as dropped") {
    Matrix s(3, 1);
    s << 0.1, 0.9, 0.5;
    const RoutingDecision d = route_expert_choice(s, 1);
    CHECK(d.dropped_tokens == std::vector<int>{0, 2});
  }

  TEST_CASE("token reordering permutes the assignments") {
    std::mt19937_64 rng(14);
    const Matrix s = row_softmax(oracle::random_matrix(8, 4, rng));
    std::vector<int> perm{3, 7, 0, 5, 1, 6, 2, 4};  // new row i holds old row perm[i]
    Matrix ps(8, 4);
    for (int i = 0; i < 8; ++i) ps.row(i) = s.row(perm[static_cast<std::size_t>(i)]);
    const RoutingDecision a = route_expert_choice(s, 2), b = route_expert_choice(ps, 2);
    std::vector<Triple> mapped;
    for (const auto& x : b.assignments) mapped.emplace_back(perm[static_cast<std::size_t>(x.token)], x.expert, x.weight);
    std::sort(mapped.begin(), mapped.end());
    CHECK(mapped == sorted(a.assignments));
  }

  TEST_CASE("capacity above the token count is an input error") {
    CHECK_THROWS_AS(route_expert_choice(Matrix::Ones(2, 2), 3), InputError);
  }
}

TEST_SUITE("moe_forward") {
  TEST_CASE("one expert with room for every token equals the dense ffn") {
    std::mt19937_64 rng(15);
    for (Gating g : {Gating::Top2, Gating::ExpertChoice}) {
      const MoeConfig cfg{4, 6, 1, g, 1, Activation::GatedGeLU};
      MoeParams p(cfg, rng);
      const Matrix x = oracle::random_matrix(5, 4, rng);
      Tape t;
      const MoeOutput m = moe_forward(t.constant(x), cfg, p.bind(t));
      const Matrix dense = ffn_forward(t.constant(x), cfg.expert(), p.experts[0]->bind(t)).value();
      CHECK((m.output.value() - dense).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  TEST_CASE("expert choice aux loss is exactly zero") {
    std::mt19937_64 rng(16);
    const MoeConfig cfg{4, 3, 3, Gating::ExpertChoice, 2, Activation::ReLU};
    for (int trial = 0; trial < 10; ++trial) {
      MoeParams p(cfg, rng);
      Tape t;
      const MoeOutput m = moe_forward(t.constant(oracle::random_matrix(6, 4, rng)), cfg, p.bind(t));
      CHECK(m.aux_loss.item() == 0.0);
    }
  }

  TEST_CASE("two tokens two experts match a scalar unroll") {
    // d=1, hidden 1, ReLU. Router w=[1,-1]: logits for token x are [x,-x].
    const MoeConfig cfg{1, 1, 2, Gating::Top2, 2, Activation::ReLU};
    Matrix x(2, 1);
    x << 0.5, -1.0;
    Tape t;
    Matrix router(1, 2);
    router << 1.0, -1.0;
    const double a_in = 2.0, a_out = 3.0, b_in = -1.5, b_out = 0.25;
    MoeWeights w{t.constant(router),
                 {{t.constant(Matrix::Constant(1, 1, a_in)), {}, t.constant(Matrix::Constant(1, 1, a_out))},
                  {t.constant(Matrix::Constant(1, 1, b_in)), {}, t.constant(Matrix::Constant(1, 1, b_out))}}};
    const MoeOutput m = moe_forward(t.constant(x), cfg, w);
    // capacity floor(2*2/2) = 2, so both tokens reach both experts.
    auto token = [&](double v) {
      const double s0 = std::exp(v) / (std::exp(v) + std::exp(-v)), s1 = 1.0 - s0;
      return s0 * (std::max(0.0, v * a_in) * a_out) + s1 * (std::max(0.0, v * b_in) * b_out);
    };
    CHECK(std::abs(m.output.value()(0, 0) - token(0.5)) < 1e-12);
    CHECK(std::abs(m.output.value()(1, 0) - token(-1.0)) < 1e-12);
  }

  TEST_CASE("dropped tokens get a zero row") {
    std::mt19937_64 rng(17);
    const MoeConfig cfg{3, 4, 4, Gating::ExpertChoice, 1, Activation::GeLU};
    MoeParams p(cfg, rng);
    Tape t;
    const MoeOutput m = moe_forward(t.constant(oracle::random_matrix(8, 3, rng)), cfg, p.bind(t));
    for (int tok : m.routing.dropped_tokens) CHECK(m.output.value().row(tok).isZero(0.0));
  }

  TEST_CASE("gradients agree with finite differences for both gatings") {
    std::mt19937_64 rng(18);
    for (Gating g : {Gating::Top2, Gating::ExpertChoice}) {
      const MoeConfig cfg{3, 4, 2, g, 1, Activation::GatedGeLU};
      MoeParams p(cfg, rng);
      Parameter x("x", oracle::random_matrix(4, 3, rng));
      std::vector<Parameter*> all = p.params();
      all.push_back(&x);
      const auto rep = oracle::check_gradients(all, [&](Tape& t) {
        const MoeOutput m = moe_forward(t.parameter(x), cfg, p.bind(t));
        return add(probe(t, m.output, 19), m.aux_loss);
      });
      CHECK_MESSAGE(rep.max_rel_error < 1e-4, rep.worst);
      CHECK(p.router.grad.cwiseAbs().maxCoeff() > 0.0);
    }
  }

  TEST_CASE("capacity below one is a config error") {
    std::mt19937_64 rng(20);
    const MoeConfig cfg{2, 2, 4, Gating::Top2, 1, Activation::ReLU};
    MoeParams p(cfg, rng);
    Tape t;
    CHECK_THROWS_AS(moe_forward(t.constant(Matrix::Ones(3, 2)), cfg, p.bind(t)), ConfigError);
  }
}

TEST_SUITE("load_balance_aux_loss") {
  TEST_CASE("uniform scores give one") {
    Tape t;
    const Matrix s = Matrix::Constant(6, 4, 0.25);
    CHECK(load_balance_aux_loss(t.constant(s), route_top2(s, 6)).item() == doctest::Approx(1.0));
  }

  TEST_CASE("every token on one expert with score one gives E") {
    Matrix s = Matrix::Zero(5, 4);
    s.col(2).setOnes();
    Tape t;
    CHECK(load_balance_aux_loss(t.constant(s), route_top2(s, 5)).item() == doctest::Approx(4.0));
  }

  TEST_CASE("random 8x4 scores match scalar recomputation") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix s = row_softmax(oracle::random_matrix(8, 4, rng));
      Tape t;
      const double got = load_balance_aux_loss(t.constant(s), route_top2(s, 2)).item();
      CHECK(std::abs(got - oracle::aux_loss(oracle::to_grid(s))) < 1e-14);
    }
  }

  TEST_CASE("expert choice decisions are rejected") {
    const Matrix s = Matrix::Constant(2, 2, 0.5);
    Tape t;
    CHECK_THROWS_AS(load_balance_aux_loss(t.constant(s), route_expert_choice(s, 1)), UsageError);
  }
}

TEST_CASE("expert capacity floors c*n/E") {
  CHECK(expert_capacity(1, 4, 4) == 1);
  CHECK(expert_capacity(2, 10, 4) == 5);
  CHECK(expert_capacity(1, 3, 4) == 0);
}
