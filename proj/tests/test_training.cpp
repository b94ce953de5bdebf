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

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "brainformer/training.hpp"
#include "support/oracles.hpp"

using namespace brainformer;

namespace {

ModelSpec small_model(int vocab = kByteVocabSize, int max_len = 16) {
  ModelSpec m;
  m.block.layers = {LayerKind::Attn, LayerKind::Moe, LayerKind::Ffn};
  m.block.model_dim = 16;
  m.block.moe_hidden_dim = 16;
  m.block.ffn_hidden_dim = 16;
  m.block.n_heads = 2;
  m.block.head_dim = 8;
  m.block.gating = Gating::Top2;
  m.block.capacity_factor = 2;
  m.block.activation = Activation::GatedGeLU;
  m.block.n_experts = 2;
  m.n_blocks = 1;
  m.vocab_size = vocab;
  m.max_seq_len = max_len;
  return m;
}

TrainConfig small_train() {
  TrainConfig c;
  c.base_lr = 0.01;
  c.warmup_constant_steps = 10;
  c.max_steps = 20;
  c.batch_size = 2;
  c.seq_len = 16;
  c.seed = 3;
  c.eval_interval = 0;
  return c;
}

std::string text() {
  std::string s;
  for (int i = 0; i < 40; ++i) s += "the garden gate swings open. ";
  return s;
}

// Factored second-moment rule for a 2x2 matrix, one scalar at a time.
Matrix adafactor_2x2_oracle(const Matrix& w, const Matrix& g, double lr, double beta2, double eps1,
                            double eps2, double clip) {
  double r[2], c[2];
  for (int i = 0; i < 2; ++i) {
    r[i] = (1 - beta2) * ((g(i, 0) * g(i, 0) + eps1) + (g(i, 1) * g(i, 1) + eps1));
    c[i] = (1 - beta2) * ((g(0, i) * g(0, i) + eps1) + (g(1, i) * g(1, i) + eps1));
  }
  const double rsum = r[0] + r[1];
  double u[2][2], ss = 0;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      u[i][j] = g(i, j) / std::sqrt(r[i] * c[j] / rsum);
      ss += u[i][j] * u[i][j];
    }
  }
  const double rms_u = std::sqrt(ss / 4.0);
  const double denom = std::max(1.0, rms_u / clip);
  double ws = 0;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) ws += w(i, j) * w(i, j);
  }
  const double step = lr * std::max(eps2, std::sqrt(ws / 4.0));
  Matrix out(2, 2);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) out(i, j) = w(i, j) - step * u[i][j] / denom;
  }
  return out;
}

}  // namespace

TEST_SUITE("lr_at") {
  TEST_CASE("constant through the warm-up window") {
    TrainConfig c;
    c.base_lr = 0.02;
    c.warmup_constant_steps = 50;
    for (int s = 1; s <= 50; ++s) CHECK(lr_at(s, c) == 0.02);
  }

  TEST_CASE("a quarter of the way past warm-up in steps halves the rate") {
    TrainConfig c;
    c.base_lr = 0.01;
    c.warmup_constant_steps = 10000;
    CHECK(lr_at(40000, c) == doctest::Approx(0.005).epsilon(1e-15));
  }

  TEST_CASE("non-increasing and continuous at the boundary") {
    TrainConfig c;
    c.warmup_constant_steps = 100;
    double prev = lr_at(1, c);
    for (int s = 2; s < 1000; ++s) {
      const double v = lr_at(s, c);
      CHECK(v <= prev);
      prev = v;
    }
    CHECK(lr_at(100, c) == c.base_lr);
    CHECK(lr_at(101, c) == doctest::Approx(c.base_lr * std::sqrt(100.0 / 101.0)));
  }
}

TEST_SUITE("adafactor") {
  TEST_CASE("2x2 update matches a scalar derivation of the factored rule") {
    Matrix w(2, 2), g(2, 2);
    w << 0.5, -1.0, 2.0, 0.25;
    g << 0.1, -0.3, 0.02, 0.7;
    Parameter p("w", w);
    p.grad = g;
    AdafactorState s = AdafactorState::for_shape(2, 2);
    REQUIRE(s.factored);
    AdafactorOptions opt;
    adafactor_update(p, s, 0.05, opt);
    const Matrix want = adafactor_2x2_oracle(w, g, 0.05, opt.beta2, opt.eps1, opt.eps2, opt.clip_threshold);
    CHECK((p.value - want).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("scalar parameter reduces to grad over root second moment") {
    Parameter p("s", Matrix::Constant(1, 1, 3.0));
    p.grad = Matrix::Constant(1, 1, 0.4);
    AdafactorState s = AdafactorState::for_shape(1, 1);
    CHECK_FALSE(s.factored);
    AdafactorOptions opt;
    opt.clip_threshold = 1e9;  // no clipping
    opt.scale_by_parameter_rms = false;
    adafactor_update(p, s, 0.1, opt);
    const double v = (1 - opt.beta2) * (0.4 * 0.4 + opt.eps1);
    CHECK(p.value(0, 0) == doctest::Approx(3.0 - 0.1 * 0.4 / std::sqrt(v)).epsilon(1e-14));
  }

  TEST_CASE("zero gradient leaves the parameter and decays the state") {
    Parameter p("w", Matrix::Constant(3, 2, 1.5));
    AdafactorState s = AdafactorState::for_shape(3, 2);
    s.row.setConstant(4.0);
    s.col.setConstant(2.0);
    AdafactorOptions opt;
    adafactor_update(p, s, 0.1, opt);
    CHECK(p.value == Matrix::Constant(3, 2, 1.5));
    CHECK(s.row(0, 0) == doctest::Approx(4.0 * opt.beta2));
    CHECK(s.col(0, 0) == doctest::Approx(2.0 * opt.beta2));
  }

  TEST_CASE("no first-moment state is kept") {
    const AdafactorState m = AdafactorState::for_shape(7, 5);
    CHECK(m.size() == 7 + 5);
    const AdafactorState v = AdafactorState::for_shape(1, 9);
    CHECK(v.size() == 9);
  }

  TEST_CASE("non-finite gradient is a training error naming the parameter") {
    Parameter p("router", Matrix::Ones(2, 2));
    p.grad(1, 0) = std::numeric_limits<double>::quiet_NaN();
    AdafactorState s = AdafactorState::for_shape(2, 2);
    try {
      adafactor_update(p, s, 0.1, {});
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("router") != std::string::npos);
    }
  }
}

TEST_SUITE("corpus") {
  TEST_CASE("split is disjoint and covers the stream") {
    const Corpus c = Corpus::from_bytes("abcdefghij", 0.3);
    CHECK(c.train().size() == 7);
    CHECK(c.valid().size() == 3);
    CHECK(c.train()[0] == 'a');
    CHECK(c.valid()[0] == 'h');
  }

  TEST_CASE("bytes above 127 map to 128..255") {
    const std::vector<int> ids = encode_bytes("\xff\x80");
    CHECK(ids == std::vector<int>{255, 128});
  }

  TEST_CASE("bad fractions and tiny corpora are rejected") {
    CHECK_THROWS_AS(Corpus::from_bytes("abcdef", 1.0), ConfigError);
    CHECK_THROWS_AS(Corpus::from_bytes("a", 0.0), InputError);
    CHECK_THROWS_AS(Corpus::from_file("/nonexistent/corpus.txt", 0.1), ConfigError);
  }
}

TEST_SUITE("train config") {
  TEST_CASE("json round trips and rejects bad values") {
    TrainConfig c = small_train();
    c.seed = 12345678901234ULL;
    const TrainConfig back = train_config_from_json(to_json(c));
    CHECK(back.seed == c.seed);
    CHECK(back.base_lr == c.base_lr);
    CHECK(back.batch_size == c.batch_size);
    CHECK_THROWS_AS(train_config_from_json({{"batch_size", 0}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json({{"seed", -1}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json({{"beta2", 1.0}}), ConfigError);
  }
}

TEST_SUITE("train_steps") {
  TEST_CASE("zero steps leave the model unchanged") {
    const Corpus corpus = Corpus::from_bytes(text(), 0.1);
    Model model(small_model(), 1);
    const Model before = model;
    Trainer trainer(model, corpus, small_train());
    const TrainResult r = train_steps(trainer, Budget::steps(0));
    CHECK(r.trajectory.empty());
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      CHECK(model.parameters()[i].value == before.parameters()[i].value);
    }
  }

  TEST_CASE("identical seeds give bitwise identical trajectories under a cost budget") {
    const Corpus corpus = Corpus::from_bytes(text(), 0.1);
    auto run = [&] {
      Model model(small_model(), 5);
      Trainer trainer(model, corpus, small_train());
      return train_steps(trainer, Budget::cost(trainer.cost_per_step() * 6.5));
    };
    const TrainResult a = run(), b = run();
    REQUIRE(a.steps_completed() == 6);
    REQUIRE(b.steps_completed() == 6);
    for (int i = 0; i < 6; ++i) CHECK(a.trajectory[i].train_loss == b.trajectory[i].train_loss);
  }

  TEST_CASE("cost budget never overshoots") {
    const Corpus corpus = Corpus::from_bytes(text(), 0.1);
    Model model(small_model(), 2);
    Trainer trainer(model, corpus, small_train());
    const double unit = trainer.cost_per_step();
    CHECK(unit == estimate_flops(model.spec(), 16).train_step * 2);
    const TrainResult r = train_steps(trainer, Budget::cost(unit * 3.999));
    CHECK(r.steps_completed() == 3);
    CHECK(r.cost_consumed <= unit * 3.999);
  }

  TEST_CASE("records step, loss and learning rate") {
    const Corpus corpus = Corpus::from_bytes(text(), 0.1);
    Model model(small_model(), 2);
    TrainConfig cfg = small_train();
    cfg.warmup_constant_steps = 2;
    cfg.eval_interval = 2;
    Trainer trainer(model, corpus, cfg);
    int evals_seen = 0;
    const TrainResult r = train_steps(trainer, Budget::steps(4), [&](const StepRecord&, const EvalRecord* e) {
      if (e != nullptr) ++evals_seen;
    });
    REQUIRE(r.steps_completed() == 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(r.trajectory[i].step == i + 1);
      CHECK(r.trajectory[i].lr == lr_at(i + 1, cfg));
      CHECK(std::isfinite(r.trajectory[i].train_loss));
    }
    REQUIRE(r.evals.size() == 2);
    CHECK(evals_seen == 2);
    CHECK(r.evals[0].step == 2);
    CHECK(r.evals[1].val_ppl == doctest::Approx(std::exp(r.evals[1].val_loss)));
  }

  TEST_CASE("seconds budget stops") {
    const Corpus corpus = Corpus::from_bytes(text(), 0.1);
    Model model(small_model(), 2);
    Trainer trainer(model, corpus, small_train());
    const TrainResult r = train_steps(trainer, Budget::seconds(0.2));
    CHECK(r.steps_completed() >= 1);
  }

  TEST_CASE("a poisoned parameter diverges with a partial trajectory") {
    const Corpus corpus = Corpus::from_bytes(text(), 0.1);
    Model model(small_model(), 2);
    model.parameter("output.w").value(0, 0) = std::numeric_limits<double>::infinity();
    Trainer trainer(model, corpus, small_train());
    const TrainResult r = train_steps(trainer, Budget::steps(5));
    CHECK(r.diverged);
    CHECK(r.trajectory.empty());
    CHECK_FALSE(r.error.empty());
  }

  TEST_CASE("restoring a snapshot continues the same run") {
    const Corpus corpus = Corpus::from_bytes(text(), 0.1);
    Model full(small_model(), 7);
    Trainer tf(full, corpus, small_train());
    const TrainResult ten = train_steps(tf, Budget::steps(10));

    Model half(small_model(), 7);
    Trainer th(half, corpus, small_train());
    train_steps(th, Budget::steps(5));
    Checkpoint ck;
    ck.meta = {{"step", th.steps_done()}};
    ck.tensors = th.snapshot();

    Model resumed(small_model(), 99);
    Trainer tr(resumed, corpus, small_train());
    tr.restore(ck);
    CHECK(tr.steps_done() == 5);
    const TrainResult rest = train_steps(tr, Budget::steps(5));
    REQUIRE(rest.steps_completed() == 5);
    for (int i = 0; i < 5; ++i) {
      CHECK(rest.trajectory[i].step == i + 6);
      CHECK(rest.trajectory[i].train_loss == ten.trajectory[i + 5].train_loss);
    }
  }

  TEST_CASE("loss falls over the first 100 steps on the overfit corpus") {
    const std::string dir = BRAINFORMER_CONFIG_DIR;
    const Corpus corpus = Corpus::from_file(dir + "/data/overfit_1k.txt", 0.0);
    ModelSpec spec = load_model_spec(dir + "/genomes/overfit-k4.json");
    spec.max_seq_len = 64;
    const nlohmann::json j = read_json_file(dir + "/train/overfit.json");
    nlohmann::json flat = j;
    for (const char* k : {"valid_fraction", "n_blocks", "budget_mode"}) flat.erase(k);
    const TrainConfig cfg = train_config_from_json(flat);
    Model model(spec, cfg.seed);
    Trainer trainer(model, corpus, cfg);
    const TrainResult r = train_steps(trainer, Budget::steps(100));
    REQUIRE(r.steps_completed() == 100);
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
      first += r.trajectory[i].train_loss;
      last += r.trajectory[90 + i].train_loss;
    }
    CHECK(last < first);
  }
}

TEST_SUITE("evaluate_perplexity") {
  TEST_CASE("uniform model over 256 symbols has perplexity 256") {
    Model model(small_model(256, 16), 1);
    model.parameter("output.w").value.setZero();
    const std::vector<int> toks = encode_bytes(text().substr(0, 50));
    CHECK(evaluate_perplexity(model, toks, 16) == doctest::Approx(256.0).epsilon(1e-12));
  }

  TEST_CASE("a memorizer of one repeated token approaches one") {
    Model model(small_model(), 1);
    model.parameter("final_norm.gain").value.setZero();
    Matrix& bias = model.parameter("final_norm.bias").value;
    bias.setZero();
    bias(0, 0) = 1.0;
    Matrix& out = model.parameter("output.w").value;
    out.setZero();
    out(0, 'x') = 60.0;
    const std::vector<int> toks(40, 'x');
    CHECK(evaluate_loss(model, toks, 16) < 1e-20);
    CHECK(evaluate_perplexity(model, toks, 16) == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("single window equals exp of the cross entropy op") {
    Model model(small_model(), 4);
    const std::vector<int> toks = encode_bytes("garden gate");
    const std::span<const int> all(toks);
    Tape t;
    const LmOutput out = model.lm_forward(t, all.subspan(0, toks.size() - 1));
    const double ce = cross_entropy(out.logits, all.subspan(1)).item();
    CHECK(evaluate_perplexity(model, toks, 16) == doctest::Approx(std::exp(ce)).epsilon(1e-13));
  }

  TEST_CASE("empty slice is an input error") {
    Model model(small_model(), 4);
    const std::vector<int> one{5};
    CHECK_THROWS_AS(evaluate_perplexity(model, std::span<const int>(), 16), InputError);
    CHECK_THROWS_AS(evaluate_perplexity(model, one, 16), InputError);
  }
}

TEST_SUITE("measure_step_time") {
  TEST_CASE("returns a positive median and the analytic cost") {
    const Model model(small_model(), 1);
    const StepTiming t = measure_step_time(model, 2, 16, 3);
    CHECK(t.median_seconds > 0.0);
    CHECK(t.analytic_flops == estimate_flops(model.spec(), 16).train_step * 2);
  }

  TEST_CASE("fewer than three repetitions is an input error") {
    const Model model(small_model(), 1);
    CHECK_THROWS_AS(measure_step_time(model, 2, 16, 2), InputError);
  }
}
