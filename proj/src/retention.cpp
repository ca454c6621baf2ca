#include "rapo/retention.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

#include "rapo/errors.hpp"

namespace rapo {

void RetentionConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("retention alpha must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("retention lambda must be >= 0");
}

Rollout annotate_anchor(Rollout rollout, const PolicyParams& anchor, const FeatureMap& fmap,
                        const DecodeOptions& opts) {
  rollout.anchor_logprobs = log_prob_tokens(anchor, fmap, rollout.prompt_id, rollout.tokens, opts);
  rollout.anchor_annotated = true;
  return rollout;
}

double signed_drift(const Rollout& rollout) {
  if (!rollout.anchor_annotated) throw StateError("rollout has no anchor log-probabilities");
  const std::size_t m = rollout.tokens.size();
  if (m == 0) throw InputError("drift of an empty rollout");
  if (rollout.actor_logprobs.size() != m || rollout.anchor_logprobs.size() != m)
    throw InputError("log-probability arrays do not match rollout length");
  double acc = 0.0;
  for (std::size_t s = 0; s < m; ++s) acc += rollout.actor_logprobs[s] - rollout.anchor_logprobs[s];
  return acc / static_cast<double>(m);
}

double drift(const Rollout& rollout) { return std::max(signed_drift(rollout), 0.0); }

double retention_reward(double drift_value, const RetentionConfig& cfg) {
  if (!(drift_value >= 0.0)) throw InputError("drift must be >= 0");
  // exp underflows to 0 past drift ~37 at alpha 20; the reward stays positive.
  return std::max(std::exp(-cfg.alpha * drift_value), std::numeric_limits<double>::min());
}

double total_reward(double r_task, double r_ret, const RetentionConfig& cfg, int current_task) {
  if (current_task < cfg.active_from_task) return r_task;
  return r_task + cfg.lambda * r_ret;
}

CtanState ctan_update(CtanState state, double sigma_batch) {
  if (!(sigma_batch >= 0.0)) throw InputError("sigma_batch must be >= 0");
  if (!state.initialized) {
    state.sigma_hat = sigma_batch;
    state.initialized = true;
  } else {
    state.sigma_hat = state.beta * state.sigma_hat + (1.0 - state.beta) * sigma_batch;
  }
  return state;
}

double population_std(std::span<const double> values) {
  if (values.empty()) return 0.0;
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / n);
}

std::vector<double> group_advantages(std::span<const double> rewards, AdvantageMode mode,
                                     const CtanState& state, double sigma_batch, double eps) {
  if (rewards.size() < 2) throw InputError("a rollout group needs at least two rewards");
  std::vector<double> adv(rewards.size(), 0.0);
  const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
  if (*lo == *hi) return adv;
  const double mean =
      std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  double sigma = state.sigma_hat;
  if (mode == AdvantageMode::kGroupSigma) sigma = population_std(rewards);
  if (mode == AdvantageMode::kBatchSigma) sigma = sigma_batch;
  const double denom = sigma + eps;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / denom;
  return adv;
}

double categorical_kl(std::span<const double> logp, std::span<const double> logq) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  double kl = 0.0;
  for (std::size_t v = 0; v < logp.size(); ++v) {
    if (logp[v] == kNegInf) continue;
    const double p = std::exp(logp[v]);
    if (p == 0.0) continue;
    kl += p * (logp[v] - logq[v]);
  }
  return std::max(kl, 0.0);
}

double kl_to_anchor(const RolloutGroup& group, const PolicyParams& actor,
                    const PolicyParams& anchor, const FeatureMap& fmap,
                    const DecodeOptions& opts) {
  if (group.rollouts.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : group.rollouts) {
    if (!r.anchor_annotated) throw StateError("kl_to_anchor on an unannotated rollout");
    if (r.tokens.empty()) continue;
    const Matrix p = position_log_distributions(actor, fmap, r.prompt_id, r.tokens, opts);
    const Matrix q = position_log_distributions(anchor, fmap, r.prompt_id, r.tokens, opts);
    double acc = 0.0;
    for (std::size_t s = 0; s < r.tokens.size(); ++s) acc += categorical_kl(p.row(s), q.row(s));
    total += acc / static_cast<double>(r.tokens.size());
  }
  return total / static_cast<double>(group.rollouts.size());
}

std::vector<double> apply_gating_variant(std::span<const double> rewards,
                                         std::span<const double> drifts, GatingVariant variant,
                                         double max_task_reward) {
  if (rewards.size() != drifts.size()) throw InputError("rewards and drifts differ in length");
  std::vector<double> out(rewards.begin(), rewards.end());
  if (out.empty()) return out;
  for (double r : rewards)
    if (r < max_task_reward) return out;
  const double mean =
      std::accumulate(drifts.begin(), drifts.end(), 0.0) / static_cast<double>(drifts.size());
  // Identical drifts: nothing lies strictly above the mean, whatever the rounding of the sum.
  const auto [lo, hi] = std::minmax_element(drifts.begin(), drifts.end());
  const bool tied = *lo == *hi;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool above = !tied && drifts[i] > mean;
    if (variant == GatingVariant::kV1 ? above : !above) out[i] = 0.0;
  }
  return out;
}

void write_ctan(std::ostream& os, const CtanState& state) {
  write_le_f64(os, state.sigma_hat);
  write_le_f64(os, state.beta);
  write_le_i64(os, state.initialized ? 1 : 0);
}

CtanState read_ctan(std::istream& is) {
  CtanState s;
  s.sigma_hat = read_le_f64(is);
  s.beta = read_le_f64(is);
  const auto flag = read_le_i64(is);
  if (flag != 0 && flag != 1) throw ConfigError("corrupt CTAN state flag");
  s.initialized = flag == 1;
  if (!(s.sigma_hat >= 0.0) || !(s.beta > 0.0 && s.beta < 1.0))
    throw ConfigError("corrupt CTAN state values");
  return s;
}

}  // namespace rapo
