#include "genpred/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "genpred/errors.hpp"

namespace genpred::ppo {

using nn::Matrix;

namespace {

Matrix log_softmax_rows(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    out.row(r) = z.row(r).array() - lse;
  }
  return out;
}

Matrix obs_row(std::span<const double> obs) {
  Matrix row(1, static_cast<Eigen::Index>(obs.size()));
  std::copy(obs.begin(), obs.end(), row.data());
  return row;
}

void write_optional(std::ostream& os, const std::optional<double>& v) {
  if (v) os << *v;
}

}  // namespace

void PpoConfig::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw InvalidConfig("gamma must lie in [0, 1)");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidConfig("lambda must lie in [0, 1]");
  if (!(clip_epsilon > 0.0)) throw InvalidConfig("clip epsilon must be positive");
  if (!(c3 >= 0.0)) throw InvalidConfig("c3 must be non-negative");
  if (n_steps < 1 || minibatch_size < 1 || n_epochs < 0) throw InvalidConfig("n_steps, minibatch and epochs must be positive");
  if (!(learning_rate > 0.0)) throw InvalidConfig("learning rate must be positive");
}

void to_json(nlohmann::json& j, const PpoConfig& c) {
  j = nlohmann::json{{"gamma", c.gamma},
                     {"lambda", c.lambda},
                     {"clip_epsilon", c.clip_epsilon},
                     {"c1", c.c1},
                     {"c2", c.c2},
                     {"c3", c.c3},
                     {"learning_rate", c.learning_rate},
                     {"n_steps", c.n_steps},
                     {"minibatch_size", c.minibatch_size},
                     {"n_epochs", c.n_epochs},
                     {"value_clip", c.value_clip},
                     {"normalize_advantage", c.normalize_advantage}};
}

void from_json(const nlohmann::json& j, PpoConfig& c) {
  const PpoConfig d;
  c.gamma = j.value("gamma", d.gamma);
  c.lambda = j.value("lambda", d.lambda);
  c.clip_epsilon = j.value("clip_epsilon", d.clip_epsilon);
  c.c1 = j.value("c1", d.c1);
  c.c2 = j.value("c2", d.c2);
  c.c3 = j.value("c3", d.c3);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.n_steps = j.value("n_steps", d.n_steps);
  c.minibatch_size = j.value("minibatch_size", d.minibatch_size);
  c.n_epochs = j.value("n_epochs", d.n_epochs);
  c.value_clip = j.value("value_clip", d.value_clip);
  c.normalize_advantage = j.value("normalize_advantage", d.normalize_advantage);
}

PolicyNet PolicyNet::make(SplitMix64& rng, std::span<const int> sizes) {
  if (sizes.size() != 4) throw ShapeMismatch("policy network has exactly three weight matrices");
  const std::array<nn::Activation, 3> acts = {nn::Activation::Tanh, nn::Activation::Tanh, nn::Activation::Softmax};
  return PolicyNet{nn::Mlp::glorot(sizes, acts, rng)};
}

std::vector<double> PolicyNet::probabilities(std::span<const double> obs) const {
  const Matrix p = net.forward(obs_row(obs));
  return {p.data(), p.data() + p.size()};
}

int PolicyNet::greedy_action(std::span<const double> obs) const {
  const Matrix p = net.forward(obs_row(obs));
  Eigen::Index best = 0;
  p.row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

ValueNet ValueNet::make(SplitMix64& rng, std::span<const int> sizes) {
  if (sizes.size() != 4 || sizes.back() != 1) throw ShapeMismatch("value network is three layers with scalar output");
  const std::array<nn::Activation, 3> acts = {nn::Activation::Tanh, nn::Activation::Tanh, nn::Activation::Identity};
  return ValueNet{nn::Mlp::glorot(sizes, acts, rng)};
}

double ValueNet::value(std::span<const double> obs) const { return net.forward(obs_row(obs))(0, 0); }

RolloutBuffer collect_rollout(const PolicyNet& policy, const ValueNet& value, EnvRunner& runner, int n_steps,
                              SplitMix64& rng) {
  RolloutBuffer buf;
  const auto n = static_cast<std::size_t>(n_steps);
  buf.observations.resize(n_steps, env::kObsSize);
  buf.actions.reserve(n);
  buf.rewards.reserve(n);
  buf.dones.reserve(n);
  buf.log_probs.reserve(n);
  buf.values.reserve(n);

  nn::Mlp::Trace trace;
  for (int t = 0; t < n_steps; ++t) {
    const Matrix row = obs_row(runner.obs.values);
    buf.observations.row(t) = row;
    const Matrix probs = policy.net.forward(row, trace);
    const Matrix logp = log_softmax_rows(trace.logits);
    const std::size_t a = rng.categorical(std::span<const double>(probs.data(), static_cast<std::size_t>(probs.size())));
    buf.actions.push_back(static_cast<int>(a));
    buf.log_probs.push_back(logp(0, static_cast<Eigen::Index>(a)));
    buf.values.push_back(value.net.forward(row)(0, 0));

    const env::StepOutcome out = runner.world.step(static_cast<int>(a));
    buf.rewards.push_back(out.reward);
    buf.dones.push_back(out.done ? 1 : 0);
    runner.episode_return += out.reward;
    if (out.done) {
      buf.completed_episode_returns.push_back(runner.episode_return);
      runner.episode_return = 0.0;
      runner.obs = runner.world.reset();
    } else {
      runner.obs = out.obs;
    }
  }
  buf.bootstrap_value = value.value(runner.obs.values);
  return buf;
}

void compute_gae(RolloutBuffer& buffer, double gamma, double lambda, double bootstrap_value) {
  const std::size_t n = buffer.size();
  if (buffer.rewards.size() != n || buffer.values.size() != n || buffer.dones.size() != n)
    throw ShapeMismatch("rollout columns differ in length");
  buffer.bootstrap_value = bootstrap_value;
  buffer.deltas.assign(n, 0.0);
  buffer.advantages.assign(n, 0.0);
  buffer.returns.assign(n, 0.0);
  double next_advantage = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double next_value = t + 1 == n ? bootstrap_value : buffer.values[t + 1];
    const double nonterminal = buffer.dones[t] ? 0.0 : 1.0;
    const double delta = buffer.rewards[t] + gamma * next_value * nonterminal - buffer.values[t];
    const double adv = delta + gamma * lambda * nonterminal * next_advantage;
    buffer.deltas[t] = delta;
    buffer.advantages[t] = adv;
    buffer.returns[t] = adv + buffer.values[t];
    next_advantage = adv;
  }
}

Minibatch gather(const RolloutBuffer& buffer, std::span<const std::size_t> indices) {
  Minibatch mb;
  mb.observations.resize(static_cast<Eigen::Index>(indices.size()), buffer.observations.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    mb.observations.row(static_cast<Eigen::Index>(k)) = buffer.observations.row(static_cast<Eigen::Index>(i));
    mb.actions.push_back(buffer.actions[i]);
    mb.old_log_probs.push_back(buffer.log_probs[i]);
    mb.old_values.push_back(buffer.values[i]);
    mb.advantages.push_back(buffer.advantages.at(i));
    mb.returns.push_back(buffer.returns.at(i));
  }
  return mb;
}

void GenLossHook::validate() const {
  if (!predictor) throw InvalidArgument("generalization hook has no predictor");
  if (predictor->architecture() != predictor::Architecture::Dnn)
    throw InvalidArgument("generalization hook needs a DNN predictor");
  const auto& dnn = predictor->dnn();
  if (dnn.mask.count() != static_cast<std::size_t>(dnn.net.input_size()))
    throw MaskMismatch("mask selects " + std::to_string(dnn.mask.count()) + " features, predictor takes " +
                       std::to_string(dnn.net.input_size()));
}

LossResult ppo_loss(const PolicyNet& policy, const ValueNet& value, const Minibatch& batch, const PpoConfig& cfg,
                    const GenLossHook* hook) {
  const auto b = static_cast<Eigen::Index>(batch.size());
  if (b == 0) throw InvalidArgument("empty minibatch");
  if (hook) hook->validate();
  const double inv_b = 1.0 / static_cast<double>(b);

  std::vector<double> adv = batch.advantages;
  if (cfg.normalize_advantage && b > 1) {
    double mean = 0.0;
    for (double a : adv) mean += a;
    mean *= inv_b;
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var * inv_b);
    for (double& a : adv) a = (a - mean) / (sd + 1e-8);
  }

  LossResult out;

  // Policy: clipped surrogate and entropy, differentiated w.r.t. the logits.
  nn::Mlp::Trace ptrace;
  const Matrix probs = policy.net.forward(batch.observations, ptrace);
  const Matrix logp = log_softmax_rows(ptrace.logits);
  Matrix dlogits = Matrix::Zero(b, probs.cols());
  double surrogate_sum = 0.0;
  double entropy_sum = 0.0;
  const double lo = 1.0 - cfg.clip_epsilon;
  const double hi = 1.0 + cfg.clip_epsilon;
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto a = static_cast<Eigen::Index>(batch.actions[static_cast<std::size_t>(i)]);
    const double ratio = std::exp(logp(i, a) - batch.old_log_probs[static_cast<std::size_t>(i)]);
    const double A = adv[static_cast<std::size_t>(i)];
    const double unclipped = ratio * A;
    const double clipped = std::clamp(ratio, lo, hi) * A;
    surrogate_sum += std::min(unclipped, clipped);
    // d min(.)/d log pi(a|s): the unclipped branch carries ratio * A, the
    // clipped branch is constant in theta.
    const double dsurr = unclipped <= clipped ? unclipped : 0.0;

    double h = 0.0;
    for (Eigen::Index k = 0; k < probs.cols(); ++k) h -= probs(i, k) * logp(i, k);
    entropy_sum += h;

    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double onehot = k == a ? 1.0 : 0.0;
      // -(1/B) dsurr * (onehot - p) for the surrogate, and
      // c2 * (1/B) * p_k (log p_k + H) for -H.
      dlogits(i, k) = -inv_b * dsurr * (onehot - probs(i, k)) + cfg.c2 * inv_b * probs(i, k) * (logp(i, k) + h);
    }
  }
  out.policy = -surrogate_sum * inv_b;
  out.entropy = -entropy_sum * inv_b;
  out.policy_grad = policy.net.backward(ptrace, dlogits, nn::GradAt::Logits, false);

  // Value loss.
  nn::Mlp::Trace vtrace;
  const Matrix v = value.net.forward(batch.observations, vtrace);
  Matrix dv(b, 1);
  double vf_sum = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double vi = v(i, 0);
    const double ret = batch.returns[static_cast<std::size_t>(i)];
    const double unclipped = (vi - ret) * (vi - ret);
    double d = 2.0 * (vi - ret);
    double loss = unclipped;
    if (cfg.value_clip) {
      const double old = batch.old_values[static_cast<std::size_t>(i)];
      const double diff = vi - old;
      const double vclip = old + std::clamp(diff, -cfg.clip_epsilon, cfg.clip_epsilon);
      const double clipped = (vclip - ret) * (vclip - ret);
      if (clipped > unclipped) {
        loss = clipped;
        const bool inside = diff > -cfg.clip_epsilon && diff < cfg.clip_epsilon;
        d = inside ? 2.0 * (vclip - ret) : 0.0;
      }
    }
    vf_sum += loss;
    dv(i, 0) = cfg.c1 * inv_b * d;
  }
  out.value = vf_sum * inv_b;
  out.value_grad = value.net.backward(vtrace, dv, nn::GradAt::Output, false);

  out.total = out.policy + cfg.c1 * out.value + cfg.c2 * out.entropy;

  if (hook) {
    const predictor::GenScore g = predictor::gen_score_with_gradient(*hook->predictor, policy.net);
    out.predicted_generalization = g.value;
    out.gen = -g.value;
    out.total = out.total + cfg.c3 * out.gen;
    out.policy_grad.add_scaled(g.gradient, -cfg.c3);
  }

  if (!std::isfinite(out.total) || !out.policy_grad.all_finite() || !out.value_grad.all_finite())
    throw NonFiniteLoss("PPO loss or its gradient is not finite");
  return out;
}

void write_checkpoint_csv(const std::filesystem::path& path, std::span<const CheckpointRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << "step,train_mean_reward,zeta_eval,loss_clip,loss_vf,loss_ent,loss_gen\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.step << ',';
    write_optional(out, r.train_mean_reward);
    out << ',';
    write_optional(out, r.zeta_eval);
    out << ',';
    write_optional(out, r.loss_clip);
    out << ',';
    write_optional(out, r.loss_vf);
    out << ',';
    write_optional(out, r.loss_ent);
    out << ',';
    write_optional(out, r.loss_gen);
    out << '\n';
  }
}

std::pair<PolicyNet, ValueNet> initial_networks(std::uint64_t seed) {
  SplitMix64 rng(derive_seed(seed, 1));
  PolicyNet p = PolicyNet::make(rng);
  ValueNet v = ValueNet::make(rng);
  return {std::move(p), std::move(v)};
}

TrainResult train(const env::GridSpec& env_spec, const PpoConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (options.total_steps < static_cast<std::size_t>(cfg.n_steps))
    throw InvalidConfig("total_steps must be at least n_steps");
  if (options.hook) options.hook->validate();
  if (!options.eval_steps.empty() && !options.evaluate) throw InvalidConfig("eval steps given without an evaluator");

  auto [policy, value] = initial_networks(options.seed);
  SplitMix64 sample_rng(derive_seed(options.seed, 2));
  SplitMix64 shuffle_rng(derive_seed(options.seed, 3));
  EnvRunner runner(env::generate(env_spec));
  nn::AdamState policy_adam = nn::AdamState::for_params(policy.net, cfg.learning_rate);
  nn::AdamState value_adam = nn::AdamState::for_params(value.net, cfg.learning_rate);

  std::vector<std::size_t> schedule = options.eval_steps;
  std::sort(schedule.begin(), schedule.end());
  schedule.erase(std::unique(schedule.begin(), schedule.end()), schedule.end());
  auto next_eval = schedule.begin();

  TrainResult result;
  std::optional<double> last_train_reward;
  auto evaluate_until = [&](std::size_t limit, bool inclusive) {
    while (next_eval != schedule.end() && (*next_eval < limit || (inclusive && *next_eval == limit))) {
      CheckpointRow row;
      row.step = *next_eval;
      row.train_mean_reward = last_train_reward;
      row.zeta_eval = options.evaluate(policy);
      result.log.push_back(row);
      if (options.keep_snapshots) result.snapshots.emplace_back(*next_eval, policy);
      ++next_eval;
    }
  };

  std::size_t steps_done = 0;
  std::vector<std::size_t> order;
  while (steps_done < options.total_steps) {
    const int n = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(cfg.n_steps),
                                                         options.total_steps - steps_done));
    evaluate_until(steps_done + static_cast<std::size_t>(n), false);

    RolloutBuffer buffer = collect_rollout(policy, value, runner, n, sample_rng);
    compute_gae(buffer, cfg.gamma, cfg.lambda, buffer.bootstrap_value);

    order.resize(buffer.size());
    std::iota(order.begin(), order.end(), 0);
    double sum_clip = 0.0, sum_vf = 0.0, sum_ent = 0.0, sum_gen = 0.0;
    int batches = 0;
    for (int epoch = 0; epoch < cfg.n_epochs; ++epoch) {
      shuffle_rng.shuffle(std::span<std::size_t>(order));
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.minibatch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch_size));
        const Minibatch mb = gather(buffer, std::span<const std::size_t>(order.data() + start, end - start));
        const LossResult loss = ppo_loss(policy, value, mb, cfg, options.hook);
        nn::adam_step(policy.net, loss.policy_grad, policy_adam);
        nn::adam_step(value.net, loss.value_grad, value_adam);
        sum_clip += loss.policy;
        sum_vf += loss.value;
        sum_ent += loss.entropy;
        sum_gen += loss.gen;
        ++batches;
      }
    }
    steps_done += static_cast<std::size_t>(n);
    ++result.updates;

    if (!buffer.completed_episode_returns.empty()) {
      const auto& r = buffer.completed_episode_returns;
      last_train_reward = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    }
    CheckpointRow row;
    row.step = steps_done;
    row.train_mean_reward = last_train_reward;
    if (batches > 0) {
      row.loss_clip = sum_clip / batches;
      row.loss_vf = sum_vf / batches;
      row.loss_ent = sum_ent / batches;
      row.loss_gen = sum_gen / batches;
    }
    result.log.push_back(row);
    if (options.on_update) options.on_update(steps_done);
  }
  evaluate_until(options.total_steps, true);

  result.policy = std::move(policy);
  result.value = std::move(value);
  return result;
}

}  // namespace genpred::ppo
