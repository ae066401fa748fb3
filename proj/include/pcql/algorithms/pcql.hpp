#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcql/core/types.hpp"
#include "pcql/nn/adam.hpp"
#include "pcql/nn/autograd.hpp"
#include "pcql/nn/mlp.hpp"

namespace pcql::algorithms {

using nn::Index;
using nn::Matrix;
using nn::Tape;
using nn::Var;

enum class PhiMode { kLatent, kEuclidean };

std::string to_string(PhiMode m);
PhiMode phi_mode_from_string(const std::string& s);

struct TrainConfig {
  double gamma = 0.99;
  double alpha_cql = 5.0;
  double tau_temp = 0.5;
  double phi_weight = 1.0;
  int n_action_samples = 10;
  double target_update_rate = 0.005;
  int epochs = 200;
  int batch_size = 256;
  double lr_actor = 1e-4;
  double lr_critic = 3e-4;
  double lr_h = 1e-4;
  double lr_g = 3e-4;
  std::uint64_t seed = 0;

  std::vector<Index> hidden = {256, 256};
  std::vector<Index> constraint_hidden = {128, 128};
  Index d_proj = 32;
  PhiMode phi_mode = PhiMode::kLatent;
  // When set, the actor's Φ gradient also updates h and g.
  bool phi_joint = false;
  // Std of the Gaussian noise around the actor's action in the CQL sampler.
  double cql_policy_noise = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Encoder shared by a predictor head and a projector head.
class ConstraintNet {
 public:
  struct Output {
    Var prediction;
    Var projection;
  };

  ConstraintNet() = default;
  ConstraintNet(Index input_width, const std::vector<Index>& hidden, Index target_width, nn::Activation target_act,
                Index d_proj, std::mt19937_64& rng);

  // x and y are concatenated column-wise: (s, a) for h, (s, s') for g.
  Output forward(Tape& tape, Var x, Var y);
  Matrix predict(const Matrix& x, const Matrix& y) const;

  std::vector<nn::Parameter*> parameters();
  void zero_grad();

  nlohmann::json to_json() const;
  static ConstraintNet from_json(const nlohmann::json& j);

  nn::MlpNetwork encoder;
  nn::MlpNetwork predictor;
  nn::MlpNetwork projector;
};

// A mini-batch in standardized state coordinates; every member has one row
// per transition.
struct Batch {
  Matrix s;     // B x 19
  Matrix a;     // B x 1, normalized dose
  Matrix r;     // B x 1
  Matrix s2;    // B x 19
  Matrix done;  // B x 1, 1 for terminal

  Index size() const { return s.rows(); }
};

// Actions for the conservative term, drawn once per mini-batch so the loss
// is a deterministic function of the parameters. Row k*B + i belongs to
// state i.
struct CqlSamples {
  Matrix uniform;       // (N*B) x 1 in [0, 1]
  Matrix policy_noise;  // (N*B) x 1, added to the actor's action then clipped

  static CqlSamples draw(Index batch, int n, double noise_std, std::mt19937_64& rng);
};

class PcqlAgent {
 public:
  PcqlAgent() = default;
  PcqlAgent(const TrainConfig& config, const DatasetMeta& meta);

  // Mean action in [0, 1] for a raw (unstandardized) observation.
  Action act(const ObservationState& obs) const;
  // Batched version over raw feature rows (n x 19).
  std::vector<double> act_raw(const Matrix& raw_states) const;
  Matrix act_standardized(const Matrix& s) const;
  Matrix standardize_rows(const Matrix& raw) const;

  // min(Q1, Q2) on standardized states.
  Matrix q_value(const Matrix& s, const Matrix& a) const;

  void soft_update_targets();

  nlohmann::json to_json() const;
  static PcqlAgent from_json(const nlohmann::json& j);

  TrainConfig config;
  DatasetMeta meta;
  nn::MlpNetwork actor;
  nn::MlpNetwork q1, q2;
  nn::MlpNetwork q1_target, q2_target;
  ConstraintNet h;
  ConstraintNet g;
  nn::AdamState actor_opt, critic_opt, h_opt, g_opt;

  std::vector<nn::Parameter*> critic_parameters();
};

// ---------------------------------------------------------------------------
// Losses. Each records onto the given tape and returns a scalar.
// ---------------------------------------------------------------------------

Matrix critic_input(const Matrix& s, const Matrix& a);

// Mean squared Bellman residual of both critics, averaged. The backup uses
// min of the target critics at (s', actor(s')) and is a constant.
Var critic_td_loss(PcqlAgent& agent, Tape& tape, const Batch& batch);

// alpha * (logsumexp over sampled actions - log(2N) - mean Q(s, a_data)),
// averaged over the two critics.
Var cql_conservative_term(PcqlAgent& agent, Tape& tape, const Batch& batch, const CqlSamples& samples);

struct ActorTerms {
  Var total;
  Var q_term;
  Var phi;  // absent (default Var) when phi_weight is 0
  bool has_phi = false;
};

ActorTerms actor_loss(PcqlAgent& agent, Tape& tape, const Batch& batch);

Var phi_penalty(PcqlAgent& agent, Tape& tape, Var states, Var actions_hat);
// Φ against an explicit target projection; phi_penalty uses the detached
// Prj(h(s, a_hat)).
Var phi_penalty_against(PcqlAgent& agent, Tape& tape, Var states, Var actions_hat, Var target);
Var phi_euclidean(PcqlAgent& agent, Tape& tape, Var states, Var actions_hat);

Var constraint_cycle_loss(PcqlAgent& agent, Tape& tape, const Batch& batch);
Var constraint_entropy_loss(PcqlAgent& agent, Tape& tape, const Batch& batch);

// Detached first arguments of the entropy consistency loss:
// Prj(h(s, a_dot)) and Prj(g(s, s2_dot)).
struct EntropyTargets {
  Matrix h;
  Matrix g;
};
EntropyTargets entropy_targets(const PcqlAgent& agent, const Batch& batch);
Var constraint_entropy_against(PcqlAgent& agent, Tape& tape, const Batch& batch, const EntropyTargets& targets);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainLogRow {
  int epoch = 0;
  std::int64_t step = 0;
  double l_td = 0.0;
  double l_cql = 0.0;
  double l_actor = 0.0;
  double l_actor_q = 0.0;
  double phi = 0.0;
  double l_cycle = 0.0;
  double l_entropy = 0.0;
  double grad_norm_critic = 0.0;
  double grad_norm_actor = 0.0;
  double grad_norm_h = 0.0;
  double grad_norm_g = 0.0;
};

struct ValidLogRow {
  int epoch = 0;
  double l_td = 0.0;
  double l_cql = 0.0;
  double phi = 0.0;
  double mape_pct = 0.0;
};

struct TrainResult {
  PcqlAgent agent;
  std::vector<TrainLogRow> log;
  std::vector<ValidLogRow> valid_log;
};

Batch dataset_batch(const OfflineDataset& ds, const DatasetMeta& meta);
Batch select_rows(const Batch& all, const std::vector<Index>& rows);

// One training iteration on a mini-batch: h/g, critics, actor, targets.
TrainLogRow train_step(PcqlAgent& agent, const Batch& batch, std::mt19937_64& rng);

using EpochCallback = std::function<void(const ValidLogRow&)>;

TrainResult train_pcql(const OfflineDataset& train, const OfflineDataset& valid, const TrainConfig& config,
                       const EpochCallback& on_epoch = {});

std::string train_log_csv(const std::vector<TrainLogRow>& rows);
std::string valid_log_csv(const std::vector<ValidLogRow>& rows);

void save_agent(const std::filesystem::path& path, const PcqlAgent& agent);
PcqlAgent load_agent(const std::filesystem::path& path);

}  // namespace pcql::algorithms
