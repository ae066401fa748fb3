#include "pcql/algorithms/pcql.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "pcql/core/errors.hpp"
#include "pcql/core/util.hpp"
#include "pcql/data/pipeline.hpp"
#include "pcql/nn/checkpoint.hpp"

namespace pcql::algorithms {

using nn::Tensor;

std::string to_string(PhiMode m) { return m == PhiMode::kLatent ? "latent" : "euclidean"; }

PhiMode phi_mode_from_string(const std::string& s) {
  if (s == "latent") return PhiMode::kLatent;
  if (s == "euclidean") return PhiMode::kEuclidean;
  throw ConfigError("phi_mode must be 'latent' or 'euclidean', got '" + s + "'");
}

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (!(gamma > 0.0 && gamma < 1.0)) fail("gamma must lie in (0, 1)");
  if (!(alpha_cql >= 0.0)) fail("alpha_cql must be >= 0");
  if (!(tau_temp > 0.0)) fail("tau_temp must be > 0");
  if (!(phi_weight >= 0.0)) fail("phi_weight must be >= 0");
  if (n_action_samples < 1) fail("n_action_samples must be >= 1");
  if (!(target_update_rate > 0.0 && target_update_rate <= 1.0)) fail("target_update_rate must lie in (0, 1]");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  for (double lr : {lr_actor, lr_critic, lr_h, lr_g}) {
    if (!(lr > 0.0)) fail("learning rates must be > 0");
  }
  if (hidden.empty() || constraint_hidden.empty()) fail("hidden widths must be nonempty");
  for (auto w : hidden) {
    if (w < 1) fail("hidden widths must be positive");
  }
  for (auto w : constraint_hidden) {
    if (w < 1) fail("constraint hidden widths must be positive");
  }
  if (d_proj < 1) fail("d_proj must be >= 1");
  if (!(cql_policy_noise >= 0.0)) fail("cql_policy_noise must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["gamma"] = gamma;
  j["alpha_cql"] = alpha_cql;
  j["tau_temp"] = tau_temp;
  j["phi_weight"] = phi_weight;
  j["n_action_samples"] = n_action_samples;
  j["target_update_rate"] = target_update_rate;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr_actor"] = lr_actor;
  j["lr_critic"] = lr_critic;
  j["lr_h"] = lr_h;
  j["lr_g"] = lr_g;
  j["seed"] = seed;
  j["hidden"] = hidden;
  j["constraint_hidden"] = constraint_hidden;
  j["d_proj"] = d_proj;
  j["phi_mode"] = to_string(phi_mode);
  j["phi_joint"] = phi_joint;
  j["cql_policy_noise"] = cql_policy_noise;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.gamma = j.at("gamma").get<double>();
    c.alpha_cql = j.at("alpha_cql").get<double>();
    c.tau_temp = j.at("tau_temp").get<double>();
    c.phi_weight = j.at("phi_weight").get<double>();
    c.n_action_samples = j.at("n_action_samples").get<int>();
    c.target_update_rate = j.at("target_update_rate").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr_actor = j.at("lr_actor").get<double>();
    c.lr_critic = j.at("lr_critic").get<double>();
    c.lr_h = j.at("lr_h").get<double>();
    c.lr_g = j.at("lr_g").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.hidden = j.at("hidden").get<std::vector<Index>>();
    c.constraint_hidden = j.at("constraint_hidden").get<std::vector<Index>>();
    c.d_proj = j.at("d_proj").get<Index>();
    c.phi_mode = phi_mode_from_string(j.at("phi_mode").get<std::string>());
    c.phi_joint = j.at("phi_joint").get<bool>();
    c.cql_policy_noise = j.at("cql_policy_noise").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// ConstraintNet
// ---------------------------------------------------------------------------

namespace {

std::vector<Index> widths_of(Index in, const std::vector<Index>& hidden, Index out) {
  std::vector<Index> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

}  // namespace

ConstraintNet::ConstraintNet(Index input_width, const std::vector<Index>& hidden, Index target_width,
                             nn::Activation target_act, Index d_proj, std::mt19937_64& rng) {
  if (hidden.empty()) throw ConfigError("ConstraintNet needs at least one hidden layer");
  std::vector<Index> enc{input_width};
  enc.insert(enc.end(), hidden.begin(), hidden.end());
  encoder = nn::MlpNetwork(enc, nn::Activation::kRelu, rng);
  predictor = nn::MlpNetwork({hidden.back(), target_width}, target_act, rng);
  projector = nn::MlpNetwork({hidden.back(), d_proj}, nn::Activation::kIdentity, rng);
}

ConstraintNet::Output ConstraintNet::forward(Tape& tape, Var x, Var y) {
  Var e = encoder.forward(tape, nn::concat_cols(x, y));
  return {predictor.forward(tape, e), projector.forward(tape, e)};
}

Matrix ConstraintNet::predict(const Matrix& x, const Matrix& y) const {
  Matrix in(x.rows(), x.cols() + y.cols());
  in << x, y;
  return predictor.predict(encoder.predict(in));
}

std::vector<nn::Parameter*> ConstraintNet::parameters() {
  std::vector<nn::Parameter*> out;
  for (auto* net : {&encoder, &predictor, &projector}) {
    auto p = net->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void ConstraintNet::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

nlohmann::json ConstraintNet::to_json() const {
  return {{"encoder", encoder.to_json()}, {"predictor", predictor.to_json()}, {"projector", projector.to_json()}};
}

ConstraintNet ConstraintNet::from_json(const nlohmann::json& j) {
  ConstraintNet c;
  try {
    c.encoder = nn::MlpNetwork::from_json(j.at("encoder"));
    c.predictor = nn::MlpNetwork::from_json(j.at("predictor"));
    c.projector = nn::MlpNetwork::from_json(j.at("projector"));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("ConstraintNet: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Sampling and agent
// ---------------------------------------------------------------------------

CqlSamples CqlSamples::draw(Index batch, int n, double noise_std, std::mt19937_64& rng) {
  CqlSamples out;
  const Index rows = batch * n;
  out.uniform.resize(rows, 1);
  out.policy_noise.resize(rows, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> z(0.0, 1.0);
  for (Index i = 0; i < rows; ++i) out.uniform(i, 0) = u(rng);
  for (Index i = 0; i < rows; ++i) out.policy_noise(i, 0) = noise_std * z(rng);
  return out;
}

PcqlAgent::PcqlAgent(const TrainConfig& cfg, const DatasetMeta& m) : config(cfg), meta(m) {
  config.validate();
  meta.validate();
  std::mt19937_64 rng(derive_seed(config.seed, "init"));
  const auto nf = static_cast<Index>(kNumFeatures);
  actor = nn::MlpNetwork(widths_of(nf, config.hidden, 1), nn::Activation::kSigmoid, rng);
  q1 = nn::MlpNetwork(widths_of(nf + 1, config.hidden, 1), nn::Activation::kIdentity, rng);
  q2 = nn::MlpNetwork(widths_of(nf + 1, config.hidden, 1), nn::Activation::kIdentity, rng);
  q1_target = q1;
  q2_target = q2;
  h = ConstraintNet(nf + 1, config.constraint_hidden, nf, nn::Activation::kIdentity, config.d_proj, rng);
  g = ConstraintNet(2 * nf, config.constraint_hidden, 1, nn::Activation::kSigmoid, config.d_proj, rng);

  actor_opt = nn::make_adam_state(actor.parameters(), {config.lr_actor});
  critic_opt = nn::make_adam_state(critic_parameters(), {config.lr_critic});
  h_opt = nn::make_adam_state(h.parameters(), {config.lr_h});
  g_opt = nn::make_adam_state(g.parameters(), {config.lr_g});
}

std::vector<nn::Parameter*> PcqlAgent::critic_parameters() {
  auto p = q1.parameters();
  auto p2 = q2.parameters();
  p.insert(p.end(), p2.begin(), p2.end());
  return p;
}

Matrix PcqlAgent::standardize_rows(const Matrix& raw) const {
  if (raw.cols() != static_cast<Index>(kNumFeatures)) {
    throw SchemaError("observation rows must have " + std::to_string(kNumFeatures) + " features");
  }
  Matrix s(raw.rows(), raw.cols());
  for (Index j = 0; j < raw.cols(); ++j) {
    const auto k = static_cast<std::size_t>(j);
    s.col(j) = (raw.col(j).array() - meta.feature_means[k]) / meta.feature_stds[k];
  }
  return s;
}

Matrix PcqlAgent::act_standardized(const Matrix& s) const { return actor.predict(s); }

std::vector<double> PcqlAgent::act_raw(const Matrix& raw_states) const {
  Matrix a = actor.predict(standardize_rows(raw_states));
  return {a.data(), a.data() + a.size()};
}

Action PcqlAgent::act(const ObservationState& obs) const {
  obs.validate();
  const auto f = flatten_observation(obs);
  Matrix raw(1, static_cast<Index>(kNumFeatures));
  for (std::size_t i = 0; i < kNumFeatures; ++i) raw(0, static_cast<Index>(i)) = f[i];
  return Action(act_raw(raw).front());
}

Matrix critic_input(const Matrix& s, const Matrix& a) {
  if (s.rows() != a.rows() || a.cols() != 1) throw SchemaError("critic input: state/action rows differ");
  Matrix x(s.rows(), s.cols() + 1);
  x << s, a;
  return x;
}

Matrix PcqlAgent::q_value(const Matrix& s, const Matrix& a) const {
  const Matrix x = critic_input(s, a);
  return q1.predict(x).cwiseMin(q2.predict(x));
}

void PcqlAgent::soft_update_targets() {
  q1_target.soft_update_from(q1, config.target_update_rate);
  q2_target.soft_update_from(q2, config.target_update_rate);
}

nlohmann::json PcqlAgent::to_json() const {
  nlohmann::json j;
  j["config"] = config.to_json();
  j["meta"] = nlohmann::json::parse(data::meta_to_json(meta));
  j["actor"] = actor.to_json();
  j["q1"] = q1.to_json();
  j["q2"] = q2.to_json();
  j["q1_target"] = q1_target.to_json();
  j["q2_target"] = q2_target.to_json();
  j["h"] = h.to_json();
  j["g"] = g.to_json();
  j["actor_opt"] = nn::adam_to_json(actor_opt);
  j["critic_opt"] = nn::adam_to_json(critic_opt);
  j["h_opt"] = nn::adam_to_json(h_opt);
  j["g_opt"] = nn::adam_to_json(g_opt);
  return j;
}

PcqlAgent PcqlAgent::from_json(const nlohmann::json& j) {
  PcqlAgent a;
  try {
    a.config = TrainConfig::from_json(j.at("config"));
    a.meta = data::meta_from_json(j.at("meta").dump());
    a.actor = nn::MlpNetwork::from_json(j.at("actor"));
    a.q1 = nn::MlpNetwork::from_json(j.at("q1"));
    a.q2 = nn::MlpNetwork::from_json(j.at("q2"));
    a.q1_target = nn::MlpNetwork::from_json(j.at("q1_target"));
    a.q2_target = nn::MlpNetwork::from_json(j.at("q2_target"));
    a.h = ConstraintNet::from_json(j.at("h"));
    a.g = ConstraintNet::from_json(j.at("g"));
    a.actor_opt = nn::adam_from_json(j.at("actor_opt"));
    a.critic_opt = nn::adam_from_json(j.at("critic_opt"));
    a.h_opt = nn::adam_from_json(j.at("h_opt"));
    a.g_opt = nn::adam_from_json(j.at("g_opt"));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("agent checkpoint: ") + e.what());
  }
  const auto nf = static_cast<Index>(kNumFeatures);
  if (a.actor.input_width() != nf || a.actor.output_width() != 1 ||
      a.actor.output_activation() != nn::Activation::kSigmoid || a.q1.input_width() != nf + 1) {
    throw SchemaError("agent checkpoint: network shapes do not match the observation layout");
  }
  return a;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

Var constant(Tape& tape, const Matrix& m) { return tape.constant(Tensor(m)); }

}  // namespace

Var critic_td_loss(PcqlAgent& agent, Tape& tape, const Batch& batch) {
  if (batch.size() == 0) throw DomainError("critic_td_loss: empty batch");
  const Matrix a2 = agent.actor.predict(batch.s2);
  const Matrix x2 = critic_input(batch.s2, a2);
  const Matrix q_next = agent.q1_target.predict(x2).cwiseMin(agent.q2_target.predict(x2));
  const Matrix y = batch.r.array() + agent.config.gamma * (1.0 - batch.done.array()) * q_next.array();
  Var x = constant(tape, critic_input(batch.s, batch.a));
  Var target = constant(tape, y);
  Var l1 = nn::mean(nn::square(agent.q1.forward(tape, x) - target));
  Var l2 = nn::mean(nn::square(agent.q2.forward(tape, x) - target));
  return 0.5 * (l1 + l2);
}

Var cql_conservative_term(PcqlAgent& agent, Tape& tape, const Batch& batch, const CqlSamples& samples) {
  const Index b = batch.size();
  if (b == 0) throw DomainError("cql_conservative_term: empty batch");
  const Index n = samples.uniform.rows() / b;
  if (n < 1 || samples.uniform.rows() != n * b || samples.policy_noise.rows() != n * b) {
    throw SchemaError("cql_conservative_term: sample count is not a multiple of the batch size");
  }
  const Matrix policy = agent.actor.predict(batch.s);
  Matrix actions(2 * n * b, 1);
  actions.topRows(n * b) = samples.uniform;
  actions.bottomRows(n * b) = (policy.replicate(n, 1) + samples.policy_noise).cwiseMax(0.0).cwiseMin(1.0);
  Var x_sampled = constant(tape, critic_input(batch.s.replicate(2 * n, 1), actions));
  Var x_data = constant(tape, critic_input(batch.s, batch.a));
  const double log_count = std::log(static_cast<double>(2 * n));

  auto term = [&](nn::MlpNetwork& q) {
    Var qs = nn::reshape(q.forward(tape, x_sampled), 2 * n, b);
    Var lse = nn::add_scalar(nn::logsumexp(qs, 0), -log_count);
    return nn::mean(lse) - nn::mean(q.forward(tape, x_data));
  };
  return (0.5 * agent.config.alpha_cql) * (term(agent.q1) + term(agent.q2));
}

Var phi_penalty_against(PcqlAgent& agent, Tape& tape, Var states, Var actions_hat, Var target) {
  Var s_next = agent.h.forward(tape, states, actions_hat).prediction;
  Var a_dot = agent.g.forward(tape, states, s_next).prediction;
  Var recon = agent.h.forward(tape, states, a_dot).projection;
  return nn::softmax_xent(target, recon, agent.config.tau_temp);
}

Var phi_penalty(PcqlAgent& agent, Tape& tape, Var states, Var actions_hat) {
  Var target = nn::detach(agent.h.forward(tape, states, actions_hat).projection);
  return phi_penalty_against(agent, tape, states, actions_hat, target);
}

Var phi_euclidean(PcqlAgent& agent, Tape& tape, Var states, Var actions_hat) {
  Var s_next = agent.h.forward(tape, states, actions_hat).prediction;
  Var a_dot = agent.g.forward(tape, states, s_next).prediction;
  return nn::mean(nn::row_norm(a_dot - actions_hat));
}

ActorTerms actor_loss(PcqlAgent& agent, Tape& tape, const Batch& batch) {
  if (batch.size() == 0) throw DomainError("actor_loss: empty batch");
  ActorTerms out;
  Var s = constant(tape, batch.s);
  Var a_hat = agent.actor.forward(tape, s);
  Var x = nn::concat_cols(s, a_hat);
  Var q = nn::minimum(agent.q1.forward(tape, x), agent.q2.forward(tape, x));
  out.q_term = -nn::mean(q);
  out.total = out.q_term;
  if (agent.config.phi_weight > 0.0) {
    out.phi = agent.config.phi_mode == PhiMode::kLatent ? phi_penalty(agent, tape, s, a_hat)
                                                         : phi_euclidean(agent, tape, s, a_hat);
    out.has_phi = true;
    out.total = out.q_term + agent.config.phi_weight * out.phi;
  }
  return out;
}

Var constraint_cycle_loss(PcqlAgent& agent, Tape& tape, const Batch& batch) {
  Var s = constant(tape, batch.s);
  Var a = constant(tape, batch.a);
  Var s2 = constant(tape, batch.s2);
  Var a_rec = agent.g.forward(tape, s, agent.h.forward(tape, s, a).prediction).prediction;
  Var s2_rec = agent.h.forward(tape, s, agent.g.forward(tape, s, s2).prediction).prediction;
  return nn::mean(nn::sum(nn::square(a_rec - a), 1)) + nn::mean(nn::sum(nn::square(s2_rec - s2), 1));
}

namespace {

Matrix projection_of(const ConstraintNet& net, const Matrix& x, const Matrix& y) {
  Matrix in(x.rows(), x.cols() + y.cols());
  in << x, y;
  return net.projector.predict(net.encoder.predict(in));
}

}  // namespace

EntropyTargets entropy_targets(const PcqlAgent& agent, const Batch& batch) {
  const Matrix a_dot = agent.g.predict(batch.s, agent.h.predict(batch.s, batch.a));
  const Matrix s2_dot = agent.h.predict(batch.s, agent.g.predict(batch.s, batch.s2));
  return {projection_of(agent.h, batch.s, a_dot), projection_of(agent.g, batch.s, s2_dot)};
}

Var constraint_entropy_against(PcqlAgent& agent, Tape& tape, const Batch& batch, const EntropyTargets& targets) {
  const double tau = agent.config.tau_temp;
  Var s = constant(tape, batch.s);
  Var h_sa = agent.h.forward(tape, s, constant(tape, batch.a)).projection;
  Var g_ss = agent.g.forward(tape, s, constant(tape, batch.s2)).projection;
  return nn::softmax_xent(constant(tape, targets.h), h_sa, tau) + nn::softmax_xent(constant(tape, targets.g), g_ss, tau);
}

Var constraint_entropy_loss(PcqlAgent& agent, Tape& tape, const Batch& batch) {
  return constraint_entropy_against(agent, tape, batch, entropy_targets(agent, batch));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

Batch dataset_batch(const OfflineDataset& ds, const DatasetMeta& meta) {
  const auto n = static_cast<Index>(ds.num_transitions());
  const auto nf = static_cast<Index>(kNumFeatures);
  Batch b;
  b.s.resize(n, nf);
  b.s2.resize(n, nf);
  b.a.resize(n, 1);
  b.r.resize(n, 1);
  b.done.resize(n, 1);
  Index i = 0;
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep.transitions) {
      const auto s = standardize(flatten_observation(tr.state), meta);
      const auto s2 = standardize(flatten_observation(tr.next_state), meta);
      for (Index j = 0; j < nf; ++j) {
        b.s(i, j) = s[static_cast<std::size_t>(j)];
        b.s2(i, j) = s2[static_cast<std::size_t>(j)];
      }
      b.a(i, 0) = tr.action.normalized();
      b.r(i, 0) = tr.reward;
      b.done(i, 0) = tr.terminal ? 1.0 : 0.0;
      ++i;
    }
  }
  return b;
}

Batch select_rows(const Batch& all, const std::vector<Index>& rows) {
  const auto n = static_cast<Index>(rows.size());
  Batch b;
  b.s.resize(n, all.s.cols());
  b.s2.resize(n, all.s2.cols());
  b.a.resize(n, 1);
  b.r.resize(n, 1);
  b.done.resize(n, 1);
  for (Index i = 0; i < n; ++i) {
    const Index k = rows[static_cast<std::size_t>(i)];
    b.s.row(i) = all.s.row(k);
    b.s2.row(i) = all.s2.row(k);
    b.a(i, 0) = all.a(k, 0);
    b.r(i, 0) = all.r(k, 0);
    b.done(i, 0) = all.done(k, 0);
  }
  return b;
}

TrainLogRow train_step(PcqlAgent& agent, const Batch& batch, std::mt19937_64& rng) {
  const auto& cfg = agent.config;
  const bool use_phi = cfg.phi_weight > 0.0;
  TrainLogRow row;

  if (use_phi) {
    agent.h.zero_grad();
    agent.g.zero_grad();
    Tape tape;
    Var cycle = constraint_cycle_loss(agent, tape, batch);
    Var entropy = constraint_entropy_loss(agent, tape, batch);
    tape.backward(cycle + entropy);
    row.l_cycle = cycle.value().item();
    row.l_entropy = entropy.value().item();
    row.grad_norm_h = nn::grad_norm(agent.h.parameters());
    row.grad_norm_g = nn::grad_norm(agent.g.parameters());
    nn::adam_step(agent.h.parameters(), agent.h_opt);
    nn::adam_step(agent.g.parameters(), agent.g_opt);
  }

  {
    const auto samples = CqlSamples::draw(batch.size(), cfg.n_action_samples, cfg.cql_policy_noise, rng);
    auto params = agent.critic_parameters();
    for (auto* p : params) p->zero_grad();
    Tape tape;
    Var td = critic_td_loss(agent, tape, batch);
    Var cql = cql_conservative_term(agent, tape, batch, samples);
    tape.backward(td + cql);
    row.l_td = td.value().item();
    row.l_cql = cql.value().item();
    row.grad_norm_critic = nn::grad_norm(params);
    nn::adam_step(params, agent.critic_opt);
  }

  {
    agent.actor.zero_grad();
    if (cfg.phi_joint) {
      agent.h.zero_grad();
      agent.g.zero_grad();
    }
    Tape tape;
    auto terms = actor_loss(agent, tape, batch);
    tape.backward(terms.total);
    row.l_actor = terms.total.value().item();
    row.l_actor_q = terms.q_term.value().item();
    row.phi = terms.has_phi ? terms.phi.value().item() : 0.0;
    row.grad_norm_actor = nn::grad_norm(agent.actor.parameters());
    nn::adam_step(agent.actor.parameters(), agent.actor_opt);
    if (cfg.phi_joint && terms.has_phi) {
      nn::adam_step(agent.h.parameters(), agent.h_opt);
      nn::adam_step(agent.g.parameters(), agent.g_opt);
    }
  }

  agent.soft_update_targets();
  return row;
}

namespace {

ValidLogRow validate_epoch(PcqlAgent& agent, const Batch& valid, int epoch) {
  ValidLogRow row;
  row.epoch = epoch;
  const Index n = valid.size();
  if (n == 0) return row;
  std::mt19937_64 rng(derive_seed(agent.config.seed, "valid", static_cast<std::uint64_t>(epoch)));
  const Index chunk = agent.config.batch_size;
  std::vector<Index> idx;
  for (Index start = 0; start < n; start += chunk) {
    const Index len = std::min(chunk, n - start);
    idx.resize(static_cast<std::size_t>(len));
    std::iota(idx.begin(), idx.end(), start);
    Batch b = select_rows(valid, idx);
    const auto samples = CqlSamples::draw(len, agent.config.n_action_samples, agent.config.cql_policy_noise, rng);
    Tape tape;
    const double w = static_cast<double>(len) / static_cast<double>(n);
    row.l_td += w * critic_td_loss(agent, tape, b).value().item();
    row.l_cql += w * cql_conservative_term(agent, tape, b, samples).value().item();
    if (agent.config.phi_weight > 0.0) {
      Var s = tape.constant(Tensor(b.s));
      Var a_hat = tape.constant(Tensor(agent.actor.predict(b.s)));
      Var phi = agent.config.phi_mode == PhiMode::kLatent ? phi_penalty(agent, tape, s, a_hat)
                                                           : phi_euclidean(agent, tape, s, a_hat);
      row.phi += w * phi.value().item();
    }
  }
  const Matrix rec = agent.actor.predict(valid.s) * agent.meta.p_max;
  const Matrix act = valid.a * agent.meta.p_max;
  double total = 0.0;
  for (Index i = 0; i < n; ++i) total += std::abs(rec(i, 0) - act(i, 0)) / std::max(1e-8, act(i, 0));
  row.mape_pct = 100.0 * total / static_cast<double>(n);
  return row;
}

}  // namespace

TrainResult train_pcql(const OfflineDataset& train, const OfflineDataset& valid, const TrainConfig& config,
                       const EpochCallback& on_epoch) {
  config.validate();
  train.validate();
  if (train.num_transitions() == 0) throw DomainError("train_pcql: empty training set");
  if (!valid.episodes.empty()) {
    valid.validate();
    if (valid.meta.p_max != train.meta.p_max || valid.meta.feature_means != train.meta.feature_means ||
        valid.meta.feature_stds != train.meta.feature_stds) {
      throw SchemaError("train_pcql: validation split was normalized with different metadata");
    }
  }

  TrainResult result{PcqlAgent(config, train.meta), {}, {}};
  auto& agent = result.agent;
  const Batch all = dataset_batch(train, train.meta);
  const Batch valid_all = dataset_batch(valid, train.meta);
  std::mt19937_64 rng(derive_seed(config.seed, "train"));
  std::vector<Index> order(static_cast<std::size_t>(all.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      Batch b = select_rows(all, std::vector<Index>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                    order.begin() + static_cast<std::ptrdiff_t>(end)));
      TrainLogRow row;
      try {
        row = train_step(agent, b, rng);
      } catch (const NumericError& e) {
        throw NumericError("training aborted at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": " + e.what());
      }
      row.epoch = epoch;
      row.step = step++;
      result.log.push_back(row);
    }
    result.valid_log.push_back(validate_epoch(agent, valid_all, epoch));
    if (on_epoch) on_epoch(result.valid_log.back());
  }
  return result;
}

std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::ostringstream out;
  out << "epoch,step,l_td,l_cql,l_actor,phi,l_cycle,l_entropy,grad_norms\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.step << ',' << format_double(r.l_td) << ',' << format_double(r.l_cql) << ','
        << format_double(r.l_actor) << ',' << format_double(r.phi) << ',' << format_double(r.l_cycle) << ','
        << format_double(r.l_entropy) << ',' << format_double(r.grad_norm_critic) << ';'
        << format_double(r.grad_norm_actor) << ';' << format_double(r.grad_norm_h) << ';'
        << format_double(r.grad_norm_g) << '\n';
  }
  return out.str();
}

std::string valid_log_csv(const std::vector<ValidLogRow>& rows) {
  std::ostringstream out;
  out << "epoch,l_td,l_cql,phi,mape_pct\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << format_double(r.l_td) << ',' << format_double(r.l_cql) << ',' << format_double(r.phi)
        << ',' << format_double(r.mape_pct) << '\n';
  }
  return out.str();
}

void save_agent(const std::filesystem::path& path, const PcqlAgent& agent) {
  nn::save_checkpoint(path, agent.to_json());
}

PcqlAgent load_agent(const std::filesystem::path& path) { return PcqlAgent::from_json(nn::load_checkpoint(path)); }

}  // namespace pcql::algorithms
