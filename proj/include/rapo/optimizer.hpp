#pragma once

// Policy-gradient updates for the linear-softmax policy.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rapo/policy.hpp"

namespace rapo {

enum class Algorithm { kSft, kGrpo, kRapo, kGrpoV1, kGrpoV2 };

std::string to_string(Algorithm algo);
/// Throws ConfigError for unknown names.
Algorithm parse_algorithm(const std::string& name);

struct OptimConfig {
  double learning_rate = 0.05;
  double clip_range = 0.2;
  double kl_coeff = 0.0;
  std::size_t group_size = 8;
  std::size_t epochs_per_task = 12;
  std::size_t inner_epochs = 1;
  Algorithm algorithm = Algorithm::kRapo;

  void validate() const;
};

struct StepLog {
  std::size_t step = 0;
  double reward_mean = 0.0;
  double sigma_batch = 0.0;
  double sigma_hat = 0.0;
  double adv_magnitude = 0.0;  // sum of |A_i| over the batch
  double ret_reward_mean = 0.0;
  double kl_anchor = 0.0;
};

/// Rollout groups of one optimization step with one advantage per rollout.
struct PolicyBatch {
  std::span<const RolloutGroup> groups;
  std::span<const std::vector<double>> advantages;  // parallel to groups
};

/// Token-mean clipped surrogate
///   (1/N) sum_{i,s} min(rho A_i, clip(rho, 1-c, 1+c) A_i)
///   - kl_coeff * (1/N) sum_{i,s} KL(actor || anchor)(. | prefix_{i,s})
/// with rho = pi_actor / pi_old, pi_old read from the rollouts' actor_logprobs.
/// The anchor is only consulted when kl_coeff > 0.
double surrogate_objective(const PolicyParams& actor, const PolicyParams* anchor,
                           const FeatureMap& fmap, const PolicyBatch& batch,
                           double clip_range, double kl_coeff, const DecodeOptions& opts = {});

Matrix surrogate_gradient(const PolicyParams& actor, const PolicyParams* anchor,
                          const FeatureMap& fmap, const PolicyBatch& batch, double clip_range,
                          double kl_coeff, const DecodeOptions& opts = {});

struct StepResult {
  PolicyParams params;
  StepLog log;  // adv_magnitude filled; reward statistics are the caller's
};

/// One gradient-ascent step on the surrogate. Advantages are constants.
/// Throws std::runtime_error when the gradient is not finite.
StepResult policy_gradient_step(const PolicyParams& actor, const PolicyParams* anchor,
                                const FeatureMap& fmap, const PolicyBatch& batch,
                                const OptimConfig& cfg, const DecodeOptions& opts = {});

struct GoldSequence {
  PromptId prompt = 0;
  std::vector<Token> tokens;
};

/// Mean token log-likelihood of the gold sequences.
double sft_objective(const PolicyParams& actor, const FeatureMap& fmap,
                     std::span<const GoldSequence> gold, const DecodeOptions& opts = {});
Matrix sft_gradient(const PolicyParams& actor, const FeatureMap& fmap,
                    std::span<const GoldSequence> gold, const DecodeOptions& opts = {});

/// One ascent step on sft_objective (cross-entropy descent).
PolicyParams sft_step(const PolicyParams& actor, const FeatureMap& fmap,
                      std::span<const GoldSequence> gold, double learning_rate,
                      const DecodeOptions& opts = {});

using SequenceReward = std::function<double(std::span<const Token>)>;

/// Monte Carlo score-function estimate
///   (1/M) sum_j (R(y_j) - baseline) grad log pi(y_j),  y_j ~ pi(. | prompt)
/// with rewards used as plain numbers.
Matrix estimate_local_gradient(const PolicyParams& actor, const FeatureMap& fmap,
                               PromptId prompt, const SequenceReward& reward, double baseline,
                               std::size_t samples, Rng& rng, const DecodeOptions& opts = {});

/// Largest number of sequences the enumerators accept.
inline constexpr std::size_t kMaxEnumeratedSequences = 100000;

/// Exact E_{y ~ pi}[R(y)] by enumerating every terminated sequence.
/// Throws ConfigError when the sequence space exceeds kMaxEnumeratedSequences.
double enumerate_objective(const PolicyParams& actor, const FeatureMap& fmap, PromptId prompt,
                           const SequenceReward& reward, const DecodeOptions& opts = {});

/// Exact gradient of enumerate_objective with R held fixed.
Matrix enumerate_objective_gradient(const PolicyParams& actor, const FeatureMap& fmap,
                                    PromptId prompt, const SequenceReward& reward,
                                    const DecodeOptions& opts = {});

}  // namespace rapo
