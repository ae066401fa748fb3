#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "pcql/algorithms/pcql.hpp"
#include "pcql/core/errors.hpp"
#include "pcql/data/pipeline.hpp"
#include "pcql/nn/checkpoint.hpp"
#include "pcql/simenv/simulator.hpp"

using namespace pcql;
using namespace pcql::algorithms;
using pcql::testing::param_gradcheck;
using pcql::testing::random_matrix;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.hidden = {6, 6};
  c.constraint_hidden = {5};
  c.d_proj = 3;
  c.n_action_samples = 3;
  c.batch_size = 8;
  c.epochs = 1;
  c.seed = 3;
  return c;
}

DatasetMeta unit_meta() {
  DatasetMeta m;
  m.p_max = 10.0;
  return m;
}

Batch random_batch(Index n, unsigned seed) {
  Batch b;
  b.s = random_matrix(n, 19, seed);
  b.a = random_matrix(n, 1, seed + 1, 0.05, 0.95);
  b.r = random_matrix(n, 1, seed + 2, -1.0, 1.0);
  b.s2 = random_matrix(n, 19, seed + 3);
  b.done = Matrix::Zero(n, 1);
  b.done(n - 1, 0) = 1.0;
  return b;
}

void zero_net(nn::MlpNetwork& net) {
  for (auto* p : net.parameters()) p->value.matrix().setZero();
}

// Makes a critic return `c` everywhere.
void constant_critic(nn::MlpNetwork& net, double c) {
  zero_net(net);
  net.parameters().back()->value(0, 0) = c;
}

// Q(s, a) = a through the first hidden unit.
void action_critic(nn::MlpNetwork& net) {
  zero_net(net);
  auto p = net.parameters();
  p[0]->value(19, 0) = 1.0;
  for (std::size_t l = 2; l + 2 < p.size(); l += 2) p[l]->value(0, 0) = 1.0;
  p[p.size() - 2]->value(0, 0) = 1.0;
}

std::vector<nn::Parameter*> join(std::initializer_list<std::vector<nn::Parameter*>> groups) {
  std::vector<nn::Parameter*> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

OfflineDataset tiny_dataset(std::size_t n, std::uint64_t seed) {
  simenv::GeneratorConfig g;
  g.n_surgeries = n;
  g.duration_min = 20;
  g.duration_max = 30;
  g.seed = seed;
  std::vector<data::RawSurgery> raw;
  for (auto& s : simenv::generate_surgeries(g)) raw.push_back(s.raw);
  return data::build_transition_dataset(raw);
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.gamma = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.tau_temp = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.n_action_samples = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.phi_mode = PhiMode::kEuclidean;
  c.phi_joint = true;
  auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
}

TEST_CASE("critic td loss") {
  PcqlAgent agent(tiny_config(), unit_meta());
  SUBCASE("fixed point gives zero") {
    const double c = 2.5;
    for (auto* q : {&agent.q1, &agent.q2, &agent.q1_target, &agent.q2_target}) constant_critic(*q, c);
    Batch b = random_batch(6, 10);
    b.done.setZero();
    b.r.setConstant(c - agent.config.gamma * c);
    Tape t;
    CHECK(critic_td_loss(agent, t, b).value().item() == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("terminal step with unit reward") {
    for (auto* q : {&agent.q1, &agent.q2, &agent.q1_target, &agent.q2_target}) constant_critic(*q, 0.0);
    Batch b = random_batch(1, 11);
    b.done(0, 0) = 1.0;
    b.r(0, 0) = 1.0;
    Tape t;
    CHECK(critic_td_loss(agent, t, b).value().item() == doctest::Approx(1.0));
  }
  SUBCASE("zero discount regresses onto the reward") {
    agent.config.gamma = 0.0;
    Batch b = random_batch(5, 12);
    Tape t;
    const double loss = critic_td_loss(agent, t, b).value().item();
    const Matrix x = critic_input(b.s, b.a);
    const double l1 = (agent.q1.predict(x) - b.r).squaredNorm() / 5.0;
    const double l2 = (agent.q2.predict(x) - b.r).squaredNorm() / 5.0;
    CHECK(loss == doctest::Approx(0.5 * (l1 + l2)).epsilon(1e-12));
  }
  SUBCASE("gradient reaches critics only") {
    Batch b = random_batch(7, 13);
    CHECK(param_gradcheck(agent.critic_parameters(), [&](Tape& t) { return critic_td_loss(agent, t, b); }) < 1e-4);
    agent.actor.zero_grad();
    Tape t;
    t.backward(critic_td_loss(agent, t, b));
    CHECK(nn::grad_norm(agent.actor.parameters()) == 0.0);
    CHECK(nn::grad_norm(agent.q1_target.parameters()) == 0.0);
  }
  SUBCASE("empty batch") {
    Tape t;
    CHECK_THROWS_AS(critic_td_loss(agent, t, Batch{}), DomainError);
  }
}

TEST_CASE("conservative term") {
  PcqlAgent agent(tiny_config(), unit_meta());
  std::mt19937_64 rng(4);
  Batch b = random_batch(6, 20);
  SUBCASE("constant critic gives zero") {
    constant_critic(agent.q1, 1.7);
    constant_critic(agent.q2, -0.4);
    auto samples = CqlSamples::draw(6, 5, 0.1, rng);
    Tape t;
    CHECK(std::abs(cql_conservative_term(agent, t, b, samples).value().item()) <= 1e-9);
  }
  SUBCASE("two-action hand check") {
    action_critic(agent.q1);
    action_critic(agent.q2);
    Batch one = random_batch(1, 21);
    one.a(0, 0) = 0.0;
    CqlSamples samples;
    samples.uniform = Matrix::Constant(1, 1, 0.9);
    samples.policy_noise = Matrix::Constant(1, 1, 0.0);
    const double pol = agent.actor.predict(one.s)(0, 0);
    const double expect = agent.config.alpha_cql * (std::log(std::exp(0.9) + std::exp(pol)) - std::log(2.0) - 0.0);
    Tape t;
    const double term = cql_conservative_term(agent, t, one, samples).value().item();
    CHECK(term == doctest::Approx(expect).epsilon(1e-12));
    CHECK(term > 0.0);
  }
  SUBCASE("alpha zero switches it off") {
    agent.config.alpha_cql = 0.0;
    auto samples = CqlSamples::draw(6, 3, 0.1, rng);
    Tape t;
    CHECK(cql_conservative_term(agent, t, b, samples).value().item() == 0.0);
  }
  SUBCASE("gradient with frozen samples") {
    auto samples = CqlSamples::draw(6, 3, 0.1, rng);
    CHECK(param_gradcheck(agent.critic_parameters(),
                          [&](Tape& t) { return cql_conservative_term(agent, t, b, samples); }) < 1e-4);
  }
  SUBCASE("sample count must match the batch") {
    auto samples = CqlSamples::draw(5, 3, 0.1, rng);
    Tape t;
    CHECK_THROWS_AS(cql_conservative_term(agent, t, b, samples), SchemaError);
  }
}

TEST_CASE("actor loss") {
  PcqlAgent agent(tiny_config(), unit_meta());
  Batch b = random_batch(6, 30);
  SUBCASE("components reassemble") {
    Tape t;
    auto terms = actor_loss(agent, t, b);
    REQUIRE(terms.has_phi);
    CHECK(std::abs(terms.total.value().item() -
                   (terms.q_term.value().item() + agent.config.phi_weight * terms.phi.value().item())) < 1e-10);
  }
  SUBCASE("phi weight zero is pure Q ascent") {
    agent.config.phi_weight = 0.0;
    Tape t;
    auto terms = actor_loss(agent, t, b);
    CHECK_FALSE(terms.has_phi);
    const Matrix q = agent.q_value(b.s, agent.actor.predict(b.s));
    CHECK(terms.total.value().item() == doctest::Approx(-q.mean()).epsilon(1e-12));
  }
  SUBCASE("gradient, latent and euclidean") {
    Matrix in(b.s.rows(), 20);
    in << b.s, agent.actor.predict(b.s);
    const Matrix target = agent.h.projector.predict(agent.h.encoder.predict(in));
    auto frozen = [&](Tape& t) {
      Var s = t.constant(nn::Tensor(b.s));
      Var a_hat = agent.actor.forward(t, s);
      Var x = nn::concat_cols(s, a_hat);
      Var q = nn::minimum(agent.q1.forward(t, x), agent.q2.forward(t, x));
      Var phi = phi_penalty_against(agent, t, s, a_hat, t.constant(nn::Tensor(target)));
      return -nn::mean(q) + agent.config.phi_weight * phi;
    };
    CHECK(param_gradcheck(
              agent.actor.parameters(), [&](Tape& t) { return actor_loss(agent, t, b).total; }, 1e-5, frozen) < 1e-4);
    agent.config.phi_mode = PhiMode::kEuclidean;
    CHECK(param_gradcheck(agent.actor.parameters(), [&](Tape& t) { return actor_loss(agent, t, b).total; }) < 1e-4);
  }
  SUBCASE("actions stay in range when saturated") {
    auto p = agent.actor.parameters();
    p.back()->value(0, 0) = 80.0;
    Matrix a = agent.actor.predict(b.s);
    CHECK(a.maxCoeff() <= 1.0);
    p.back()->value(0, 0) = -80.0;
    a = agent.actor.predict(b.s);
    CHECK(a.minCoeff() >= 0.0);
  }
}

TEST_CASE("actor climbs a frozen quadratic critic") {
  TrainConfig cfg = tiny_config();
  cfg.hidden = {32, 32};
  cfg.phi_weight = 0.0;
  cfg.lr_actor = 1e-2;
  PcqlAgent agent(cfg, unit_meta());
  const Matrix state = random_matrix(1, 19, 40);

  // Fit both critics to Q(s, a) = -(a - 0.3)^2 on the probe state, full batch
  // over a grid of actions.
  Matrix a(201, 1);
  for (Index i = 0; i < 201; ++i) a(i, 0) = static_cast<double>(i) / 200.0;
  const Matrix y = -(a.array() - 0.3).square().matrix();
  const Matrix x = critic_input(state.replicate(201, 1), a);
  nn::AdamConfig fit_cfg;
  fit_cfg.learning_rate = 3e-3;
  for (auto* q : {&agent.q1, &agent.q2}) {
    auto opt = nn::make_adam_state(q->parameters(), fit_cfg);
    for (int it = 0; it < 6000; ++it) {
      if (it == 3000) opt.config.learning_rate = 3e-4;
      q->zero_grad();
      Tape t;
      Var pred = q->forward(t, t.constant(nn::Tensor(x)));
      t.backward(nn::mean(nn::square(pred - t.constant(nn::Tensor(y)))));
      nn::adam_step(q->parameters(), opt);
    }
  }
  Batch b;
  b.s = state;
  b.a = Matrix::Constant(1, 1, 0.5);
  b.r = Matrix::Zero(1, 1);
  b.s2 = state;
  b.done = Matrix::Ones(1, 1);
  for (int it = 0; it < 1500; ++it) {
    agent.actor.zero_grad();
    Tape t;
    t.backward(actor_loss(agent, t, b).total);
    nn::adam_step(agent.actor.parameters(), agent.actor_opt);
  }
  Matrix grid(1001, 1);
  for (Index i = 0; i <= 1000; ++i) grid(i, 0) = static_cast<double>(i) / 1000.0;
  Index best = 0;
  agent.q_value(state.replicate(1001, 1), grid).col(0).maxCoeff(&best);
  CHECK(std::abs(grid(best, 0) - 0.3) <= 0.01);
  CHECK(std::abs(agent.actor.predict(state)(0, 0) - 0.3) <= 0.02);
}

TEST_CASE("latent penalty") {
  TrainConfig cfg = tiny_config();
  cfg.d_proj = 2;
  cfg.tau_temp = 1.0;
  PcqlAgent agent(cfg, unit_meta());
  Batch b = random_batch(5, 50);
  auto phi_value = [&](PcqlAgent& ag) {
    Tape t;
    Var s = t.constant(nn::Tensor(b.s));
    return phi_penalty(ag, t, s, ag.actor.forward(t, s)).value().item();
  };
  SUBCASE("uniform projections give ln 2") {
    zero_net(agent.h.projector);
    CHECK(phi_value(agent) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("action-blind h reaches the entropy floor") {
    agent.h.encoder.parameters()[0]->value.matrix().row(19).setZero();
    const Matrix a_hat = agent.actor.predict(b.s);
    Matrix in(b.s.rows(), 20);
    in << b.s, a_hat;
    const Matrix proj = agent.h.projector.predict(agent.h.encoder.predict(in));
    const Matrix p = nn::softmax_rows(proj / cfg.tau_temp);
    const double entropy = -(p.array() * p.array().log()).sum() / static_cast<double>(b.s.rows());
    CHECK(phi_value(agent) == doctest::Approx(entropy).epsilon(1e-12));
  }
  SUBCASE("large temperature flattens to ln d_proj") {
    agent.config.tau_temp = 1e7;
    CHECK(phi_value(agent) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }
  SUBCASE("gradient flows into the actor") {
    auto f = [&](Tape& t) {
      Var s = t.constant(nn::Tensor(b.s));
      return phi_penalty(agent, t, s, agent.actor.forward(t, s));
    };
    // Finite differences hold the detached target at its current value.
    Matrix in(b.s.rows(), 20);
    in << b.s, agent.actor.predict(b.s);
    const Matrix target = agent.h.projector.predict(agent.h.encoder.predict(in));
    auto frozen = [&](Tape& t) {
      Var s = t.constant(nn::Tensor(b.s));
      return phi_penalty_against(agent, t, s, agent.actor.forward(t, s), t.constant(nn::Tensor(target)));
    };
    CHECK(param_gradcheck(agent.actor.parameters(), f, 1e-5, frozen) < 1e-4);
    CHECK(param_gradcheck(join({agent.h.parameters(), agent.g.parameters()}), f, 1e-5, frozen) < 1e-4);
  }
}

TEST_CASE("euclidean penalty") {
  PcqlAgent agent(tiny_config(), unit_meta());
  zero_net(agent.g.predictor);
  agent.g.predictor.parameters()[1]->value(0, 0) = 0.4;
  const double c = 1.0 / (1.0 + std::exp(-0.4));
  auto phi = [&](Matrix a_hat) {
    Tape t;
    Var s = t.constant(nn::Tensor(random_matrix(a_hat.rows(), 19, 60)));
    return phi_euclidean(agent, t, s, t.constant(nn::Tensor(a_hat))).value().item();
  };
  CHECK(phi(Matrix::Constant(3, 1, c)) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(phi(Matrix::Constant(1, 1, c - 0.1)) == doctest::Approx(0.1).epsilon(1e-12));
  Matrix two(2, 1);
  two << c, c + 0.2;
  CHECK(phi(two) == doctest::Approx(0.1).epsilon(1e-12));

  PcqlAgent fresh(tiny_config(), unit_meta());
  Batch b = random_batch(4, 61);
  auto f = [&](Tape& t) {
    Var s = t.constant(nn::Tensor(b.s));
    return phi_euclidean(fresh, t, s, fresh.actor.forward(t, s));
  };
  CHECK(param_gradcheck(join({fresh.actor.parameters(), fresh.h.parameters(), fresh.g.parameters()}), f) < 1e-4);
}

TEST_CASE("cycle loss") {
  PcqlAgent agent(tiny_config(), unit_meta());
  SUBCASE("matches a direct evaluation") {
    Batch b = random_batch(5, 70);
    Tape t;
    const double loss = constraint_cycle_loss(agent, t, b).value().item();
    const Matrix a_rec = agent.g.predict(b.s, agent.h.predict(b.s, b.a));
    const Matrix s2_rec = agent.h.predict(b.s, agent.g.predict(b.s, b.s2));
    const double expect = ((a_rec - b.a).squaredNorm() + (s2_rec - b.s2).squaredNorm()) / 5.0;
    CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("action offset of 0.1 with an exact h branch") {
    zero_net(agent.g.predictor);
    const double c = 0.5;
    Batch b = random_batch(1, 71);
    b.a(0, 0) = c - 0.1;
    b.s2 = agent.h.predict(b.s, Matrix::Constant(1, 1, c));
    Tape t;
    CHECK(constraint_cycle_loss(agent, t, b).value().item() == doctest::Approx(0.01).epsilon(1e-12));
  }
  SUBCASE("gradient to h and g") {
    Batch b = random_batch(5, 72);
    CHECK(param_gradcheck(join({agent.h.parameters(), agent.g.parameters()}),
                          [&](Tape& t) { return constraint_cycle_loss(agent, t, b); }) < 1e-4);
  }
}

TEST_CASE("entropy consistency loss") {
  TrainConfig cfg = tiny_config();
  cfg.d_proj = 2;
  cfg.tau_temp = 1.0;
  PcqlAgent agent(cfg, unit_meta());
  Batch b = random_batch(4, 80);
  SUBCASE("uniform projections give ln 2 per term") {
    zero_net(agent.h.projector);
    zero_net(agent.g.projector);
    Tape t;
    CHECK(constraint_entropy_loss(agent, t, b).value().item() == doctest::Approx(2.0 * std::log(2.0)));
  }
  SUBCASE("bounded below by the target entropies") {
    Tape t;
    const double loss = constraint_entropy_loss(agent, t, b).value().item();
    const Matrix a_dot = agent.g.predict(b.s, agent.h.predict(b.s, b.a));
    const Matrix s2_dot = agent.h.predict(b.s, agent.g.predict(b.s, b.s2));
    auto proj = [](const ConstraintNet& n, const Matrix& x, const Matrix& y) {
      Matrix in(x.rows(), x.cols() + y.cols());
      in << x, y;
      return Matrix(n.projector.predict(n.encoder.predict(in)));
    };
    auto entropy = [](const Matrix& logits) {
      const Matrix p = nn::softmax_rows(logits);
      return -(p.array() * p.array().log()).sum() / static_cast<double>(logits.rows());
    };
    CHECK(loss >= entropy(proj(agent.h, b.s, a_dot)) + entropy(proj(agent.g, b.s, s2_dot)) - 1e-12);
  }
  SUBCASE("gradient") {
    agent.config.tau_temp = 0.5;
    const auto targets = entropy_targets(agent, b);
    CHECK(param_gradcheck(
              join({agent.h.parameters(), agent.g.parameters()}),
              [&](Tape& t) { return constraint_entropy_loss(agent, t, b); }, 1e-5,
              [&](Tape& t) { return constraint_entropy_against(agent, t, b, targets); }) < 1e-4);
  }
}

TEST_CASE("end-to-end mlp gradient through the full objective") {
  PcqlAgent agent(tiny_config(), unit_meta());
  Batch b = random_batch(6, 90);
  std::mt19937_64 rng(9);
  auto samples = CqlSamples::draw(6, 3, 0.1, rng);
  CHECK(param_gradcheck(agent.critic_parameters(), [&](Tape& t) {
          return critic_td_loss(agent, t, b) + cql_conservative_term(agent, t, b, samples);
        }) < 1e-4);
}

TEST_CASE("act") {
  PcqlAgent agent(tiny_config(), unit_meta());
  auto obs = ObservationState::make(ClinicalInfo::make(50, 1, 170, 70, 2), {120, 70, 85}, {118, 69, 84},
                                    {119, 70, 85}, 0.1, 82);
  const auto a1 = agent.act(obs);
  CHECK(a1.normalized() >= 0.0);
  CHECK(a1.normalized() <= 1.0);
  CHECK(agent.act(obs).normalized() == a1.normalized());

  zero_net(agent.actor);
  CHECK(agent.act(obs).normalized() == 0.5);
  CHECK(agent.act(obs).physical(agent.meta.p_max) == doctest::Approx(5.0));
}

TEST_CASE("target tracking") {
  PcqlAgent agent(tiny_config(), unit_meta());
  agent.config.target_update_rate = 0.3;
  for (auto* p : agent.q1.parameters()) p->value.matrix().array() += 0.5;
  const Matrix old_t = agent.q1_target.parameters()[0]->value.matrix();
  const Matrix src = agent.q1.parameters()[0]->value.matrix();
  agent.soft_update_targets();
  CHECK(agent.q1_target.parameters()[0]->value.matrix() == Matrix(0.7 * old_t + 0.3 * src));
}

TEST_CASE("training") {
  const auto ds = tiny_dataset(12, 5);
  auto split = data::split_dataset(ds, {}, 1);
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 32;

  SUBCASE("zero epochs returns the initial agent") {
    cfg.epochs = 0;
    auto r = train_pcql(split.train, split.valid, cfg);
    CHECK(r.log.empty());
    CHECK(r.agent.to_json() == PcqlAgent(cfg, split.train.meta).to_json());
  }
  SUBCASE("seeded runs are identical") {
    cfg.epochs = 2;
    auto r1 = train_pcql(split.train, split.valid, cfg);
    auto r2 = train_pcql(split.train, split.valid, cfg);
    CHECK(train_log_csv(r1.log) == train_log_csv(r2.log));
    CHECK(valid_log_csv(r1.valid_log) == valid_log_csv(r2.valid_log));
    CHECK(nn::checkpoint_to_string(r1.agent.to_json()) == nn::checkpoint_to_string(r2.agent.to_json()));
    CHECK(r1.valid_log.size() == 2);
    CHECK(train_log_csv(r1.log).rfind("epoch,step,l_td,l_cql,l_actor,phi,l_cycle,l_entropy,grad_norms\n", 0) == 0);
    for (const auto& row : r1.log) {
      CHECK(row.l_actor == doctest::Approx(row.l_actor_q + cfg.phi_weight * row.phi).epsilon(1e-12));
    }
  }
  SUBCASE("cql variant leaves h and g untouched") {
    cfg.epochs = 1;
    cfg.phi_weight = 0.0;
    auto r = train_pcql(split.train, split.valid, cfg);
    PcqlAgent init(cfg, split.train.meta);
    CHECK(r.agent.h.to_json() == init.h.to_json());
    CHECK(r.agent.g.to_json() == init.g.to_json());
    CHECK(r.agent.actor.to_json() != init.actor.to_json());
  }
  SUBCASE("nonfinite loss aborts with its position") {
    auto bad = split.train;
    bad.episodes[0].transitions[0].reward = 1e300;
    cfg.epochs = 1;
    cfg.batch_size = 100000;
    try {
      train_pcql(bad, split.valid, cfg);
      FAIL("expected an abort");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("epoch 1 step 0") != std::string::npos);
    }
  }
  SUBCASE("checkpoint round trip") {
    cfg.epochs = 1;
    auto r = train_pcql(split.train, split.valid, cfg);
    const auto path = std::filesystem::temp_directory_path() / "pcql_unit_agent.json";
    save_agent(path, r.agent);
    auto back = load_agent(path);
    CHECK(nn::checkpoint_to_string(back.to_json()) == nn::checkpoint_to_string(r.agent.to_json()));
    std::filesystem::remove(path);
  }
}
