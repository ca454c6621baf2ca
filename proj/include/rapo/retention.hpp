#pragma once

// Retention reward and cross-task advantage normalization.
//
//   drift(y)   = max( mean_s [log pi_t(y_s|.) - log pi_{t-1}(y_s|.)], 0 )
//   r_ret(y)   = exp(-alpha * drift(y))                  in (0, 1]
//   r_total(y) = r_task(y) + lambda * r_ret(y)           (from active_from_task)
//   sigma_hat <- beta * sigma_hat + (1 - beta) * sigma_batch
//   A_i        = (r_i - mean_group) / (sigma_hat + eps)
//
// Drift and retention reward are plain numbers: nothing here is
// differentiated, so the shaped reward reaches the optimizer detached.

#include <iosfwd>
#include <span>
#include <vector>

#include "rapo/policy.hpp"

namespace rapo {

struct CtanState {
  double sigma_hat = 0.0;
  double beta = 0.999;
  bool initialized = false;

  bool operator==(const CtanState&) const = default;
};

struct RetentionConfig {
  double alpha = 20.0;
  double lambda = 0.5;
  int active_from_task = 2;

  void validate() const;
};

/// Advantage denominator: the group's own reward std, the instantaneous std
/// over every reward of the step, or the CTAN running estimate.
enum class AdvantageMode { kGroupSigma, kBatchSigma, kCtan };
enum class GatingVariant { kV1, kV2 };

inline constexpr double kDefaultAdvantageEps = 1e-4;

/// Fills anchor_logprobs by scoring the rollout under the frozen anchor.
Rollout annotate_anchor(Rollout rollout, const PolicyParams& anchor, const FeatureMap& fmap,
                        const DecodeOptions& opts = {});

/// Length-normalized, zero-truncated actor/anchor log-ratio.
/// Throws StateError when the anchor has not been annotated.
double drift(const Rollout& rollout);

/// Mean per-token actor/anchor log-ratio before truncation.
double signed_drift(const Rollout& rollout);

/// exp(-alpha * d), floored at the smallest normal double so it stays in (0, 1].
double retention_reward(double drift_value, const RetentionConfig& cfg);

/// r_task + lambda * r_ret when current_task >= active_from_task, else r_task.
double total_reward(double r_task, double r_ret, const RetentionConfig& cfg, int current_task);

CtanState ctan_update(CtanState state, double sigma_batch);

/// Population standard deviation.
double population_std(std::span<const double> values);

/// Group-relative advantages (r_i - mean) / (sigma + eps), sigma picked by
/// `mode`: the group's own population std, `sigma_batch`, or
/// state.sigma_hat. Groups with identical rewards get all zeros.
std::vector<double> group_advantages(std::span<const double> rewards, AdvantageMode mode,
                                     const CtanState& state, double sigma_batch = 0.0,
                                     double eps = kDefaultAdvantageEps);

/// Exact KL(p || q) between two log-distributions; -inf entries are skipped.
double categorical_kl(std::span<const double> logp, std::span<const double> logq);

/// Mean over rollouts of the position-averaged exact KL(actor || anchor) of
/// the next-token distributions along each rollout.
double kl_to_anchor(const RolloutGroup& group, const PolicyParams& actor,
                    const PolicyParams& anchor, const FeatureMap& fmap,
                    const DecodeOptions& opts = {});

/// Pilot-study gating on groups whose every rollout reached max_task_reward:
/// v1 zeroes rollouts with drift strictly above the group mean, v2 zeroes
/// those at or below it. Other groups are returned unchanged.
std::vector<double> apply_gating_variant(std::span<const double> rewards,
                                         std::span<const double> drifts, GatingVariant variant,
                                         double max_task_reward);

/// sigma_hat, beta, initialized as little-endian f64, f64, i64.
void write_ctan(std::ostream& os, const CtanState& state);
CtanState read_ctan(std::istream& is);

}  // namespace rapo
