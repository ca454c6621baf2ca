#include "rapo/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "rapo/errors.hpp"
#include "rapo/retention.hpp"

namespace rapo {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::size_t count_tokens(const PolicyBatch& batch) {
  std::size_t n = 0;
  for (const auto& g : batch.groups)
    for (const auto& r : g.rollouts) n += r.tokens.size();
  return n;
}

void check_batch(const PolicyBatch& batch) {
  if (batch.groups.size() != batch.advantages.size())
    throw InputError("one advantage vector per rollout group is required");
  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    if (batch.groups[g].rollouts.size() != batch.advantages[g].size())
      throw InputError("advantage count does not match group size");
    for (double a : batch.advantages[g])
      if (!std::isfinite(a)) throw InputError("non-finite advantage");
    for (const auto& r : batch.groups[g].rollouts)
      if (r.actor_logprobs.size() != r.tokens.size())
        throw InputError("rollout is missing behaviour log-probabilities");
  }
}

// phi (x) resid accumulated into grad with weight w, skipping zero features.
void accumulate_outer(Matrix& grad, std::span<const double> phi, std::span<const double> resid,
                      double w) {
  for (std::size_t k = 0; k < phi.size(); ++k) {
    const double f = w * phi[k];
    if (f == 0.0) continue;
    auto row = grad.row(k);
    for (std::size_t v = 0; v < resid.size(); ++v) row[v] += f * resid[v];
  }
}

// Walks every (rollout, position) of the batch and evaluates the per-token
// surrogate; optionally accumulates its gradient.
double surrogate_walk(const PolicyParams& actor, const PolicyParams* anchor,
                      const FeatureMap& fmap, const PolicyBatch& batch, double clip_range,
                      double kl_coeff, const DecodeOptions& opts, Matrix* grad) {
  check_batch(batch);
  if (kl_coeff > 0.0 && anchor == nullptr)
    throw InputError("kl_coeff > 0 requires an anchor policy");
  const std::size_t n_tokens = count_tokens(batch);
  if (n_tokens == 0) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(n_tokens);
  const std::size_t vocab = actor.vocab_size();

  std::vector<double> phi(actor.feature_dim());
  std::vector<double> logp(vocab), logq(vocab), resid(vocab);
  double objective = 0.0;
  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    const auto& group = batch.groups[g];
    for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
      const Rollout& r = group.rollouts[i];
      const double adv = batch.advantages[g][i];
      for (std::size_t s = 0; s < r.tokens.size(); ++s) {
        const auto prefix = std::span<const Token>(r.tokens).first(s);
        fmap.embed(r.prompt_id, prefix, phi);
        next_token_log_probs(actor, phi, opts, logp);
        const auto tok = static_cast<std::size_t>(r.tokens[s]);
        if (logp[tok] == kNegInf) throw InputError("rollout token excluded by the decode mask");

        const double ratio = std::exp(logp[tok] - r.actor_logprobs[s]);
        const double clipped = std::clamp(ratio, 1.0 - clip_range, 1.0 + clip_range);
        const double unclipped_term = ratio * adv;
        const double clipped_term = clipped * adv;
        objective += std::min(unclipped_term, clipped_term) * inv_n;
        // The clipped branch is constant in theta; only the ratio branch
        // carries gradient, and only while it is the active minimum.
        const bool ratio_active = unclipped_term <= clipped_term;

        double kl = 0.0;
        if (kl_coeff > 0.0) {
          next_token_log_probs(*anchor, phi, opts, logq);
          kl = categorical_kl(logp, logq);
          objective -= kl_coeff * kl * inv_n;
        }
        if (grad == nullptr) continue;

        std::fill(resid.begin(), resid.end(), 0.0);
        if (ratio_active && adv != 0.0) {
          const double w = adv * ratio;
          for (std::size_t v = 0; v < vocab; ++v) resid[v] = -w * std::exp(logp[v]);
          resid[tok] += w;
        }
        if (kl_coeff > 0.0) {
          // d KL(p||q) / d logits = p (log p - log q - KL)
          for (std::size_t v = 0; v < vocab; ++v) {
            if (logp[v] == kNegInf) continue;
            resid[v] -= kl_coeff * std::exp(logp[v]) * (logp[v] - logq[v] - kl);
          }
        }
        accumulate_outer(*grad, phi, resid, inv_n);
      }
    }
  }
  return objective;
}

}  // namespace

std::string to_string(Algorithm algo) {
  switch (algo) {
    case Algorithm::kSft: return "sft";
    case Algorithm::kGrpo: return "grpo";
    case Algorithm::kRapo: return "rapo";
    case Algorithm::kGrpoV1: return "grpo_v1";
    case Algorithm::kGrpoV2: return "grpo_v2";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  for (auto a : {Algorithm::kSft, Algorithm::kGrpo, Algorithm::kRapo, Algorithm::kGrpoV1,
                 Algorithm::kGrpoV2})
    if (to_string(a) == name) return a;
  throw ConfigError("unknown algorithm '" + name + "'");
}

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(clip_range > 0.0)) throw ConfigError("clip_range must be > 0");
  if (!(kl_coeff >= 0.0)) throw ConfigError("kl_coeff must be >= 0");
  if (group_size < 2) throw ConfigError("group_size must be >= 2");
  if (epochs_per_task == 0) throw ConfigError("epochs_per_task must be >= 1");
  if (inner_epochs == 0) throw ConfigError("inner_epochs must be >= 1");
}

double surrogate_objective(const PolicyParams& actor, const PolicyParams* anchor,
                           const FeatureMap& fmap, const PolicyBatch& batch, double clip_range,
                           double kl_coeff, const DecodeOptions& opts) {
  return surrogate_walk(actor, anchor, fmap, batch, clip_range, kl_coeff, opts, nullptr);
}

Matrix surrogate_gradient(const PolicyParams& actor, const PolicyParams* anchor,
                          const FeatureMap& fmap, const PolicyBatch& batch, double clip_range,
                          double kl_coeff, const DecodeOptions& opts) {
  Matrix grad(actor.feature_dim(), actor.vocab_size());
  surrogate_walk(actor, anchor, fmap, batch, clip_range, kl_coeff, opts, &grad);
  return grad;
}

StepResult policy_gradient_step(const PolicyParams& actor, const PolicyParams* anchor,
                                const FeatureMap& fmap, const PolicyBatch& batch,
                                const OptimConfig& cfg, const DecodeOptions& opts) {
  const Matrix grad =
      surrogate_gradient(actor, anchor, fmap, batch, cfg.clip_range, cfg.kl_coeff, opts);
  if (!grad.all_finite()) throw std::runtime_error("policy gradient is not finite");
  StepResult out{actor, {}};
  out.params.weights.add_scaled(grad, cfg.learning_rate);
  for (const auto& adv : batch.advantages)
    for (double a : adv) out.log.adv_magnitude += std::abs(a);
  return out;
}

double sft_objective(const PolicyParams& actor, const FeatureMap& fmap,
                     std::span<const GoldSequence> gold, const DecodeOptions& opts) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& g : gold) {
    for (double lp : log_prob_tokens(actor, fmap, g.prompt, g.tokens, opts)) total += lp;
    n += g.tokens.size();
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

Matrix sft_gradient(const PolicyParams& actor, const FeatureMap& fmap,
                    std::span<const GoldSequence> gold, const DecodeOptions& opts) {
  Matrix grad(actor.feature_dim(), actor.vocab_size());
  std::size_t n = 0;
  for (const auto& g : gold) {
    // Validates token ids and mask membership.
    (void)log_prob_tokens(actor, fmap, g.prompt, g.tokens, opts);
    grad += score_gradient(actor, fmap, g.tokens, g.prompt, opts);
    n += g.tokens.size();
  }
  if (n > 0) grad *= 1.0 / static_cast<double>(n);
  return grad;
}

PolicyParams sft_step(const PolicyParams& actor, const FeatureMap& fmap,
                      std::span<const GoldSequence> gold, double learning_rate,
                      const DecodeOptions& opts) {
  const Matrix grad = sft_gradient(actor, fmap, gold, opts);
  if (!grad.all_finite()) throw std::runtime_error("SFT gradient is not finite");
  PolicyParams next = actor;
  next.weights.add_scaled(grad, learning_rate);
  return next;
}

Matrix estimate_local_gradient(const PolicyParams& actor, const FeatureMap& fmap,
                               PromptId prompt, const SequenceReward& reward, double baseline,
                               std::size_t samples, Rng& rng, const DecodeOptions& opts) {
  if (samples == 0) throw InputError("estimate_local_gradient needs at least one sample");
  Matrix acc(actor.feature_dim(), actor.vocab_size());
  for (std::size_t j = 0; j < samples; ++j) {
    const Rollout y = sample_rollout(actor, fmap, prompt, rng, opts);
    const double weight = reward(y.tokens) - baseline;
    if (weight == 0.0) continue;
    acc.add_scaled(score_gradient(actor, fmap, y, opts), weight);
  }
  acc *= 1.0 / static_cast<double>(samples);
  return acc;
}

namespace {

struct Enumerator {
  const PolicyParams& actor;
  const FeatureMap& fmap;
  PromptId prompt;
  const SequenceReward& reward;
  const DecodeOptions& opts;
  std::size_t horizon;
  Matrix* grad;
  double value = 0.0;
  std::vector<Token> prefix;

  void walk(double log_prob) {
    std::vector<double> phi(actor.feature_dim());
    std::vector<double> logp(actor.vocab_size());
    fmap.embed(prompt, prefix, phi);
    next_token_log_probs(actor, phi, opts, logp);
    for (std::size_t v = 0; v < logp.size(); ++v) {
      if (logp[v] == kNegInf) continue;
      prefix.push_back(static_cast<Token>(v));
      const double lp = log_prob + logp[v];
      const bool done =
          prefix.size() == horizon || (opts.eos && static_cast<Token>(v) == *opts.eos);
      if (done) {
        const double weight = std::exp(lp) * reward(prefix);
        value += weight;
        if (grad != nullptr && weight != 0.0)
          grad->add_scaled(score_gradient(actor, fmap, prefix, prompt, opts), weight);
      } else {
        walk(lp);
      }
      prefix.pop_back();
    }
  }
};

Enumerator run_enumeration(const PolicyParams& actor, const FeatureMap& fmap, PromptId prompt,
                           const SequenceReward& reward, const DecodeOptions& opts,
                           Matrix* grad) {
  const std::size_t horizon = opts.horizon(actor);
  std::size_t branching = actor.vocab_size();
  if (!opts.allowed.empty())
    branching = static_cast<std::size_t>(std::count(opts.allowed.begin(), opts.allowed.end(), 1));
  double bound = 1.0;
  for (std::size_t s = 0; s < horizon; ++s) bound *= static_cast<double>(branching);
  if (bound > static_cast<double>(kMaxEnumeratedSequences))
    throw ConfigError("sequence space too large to enumerate");
  Enumerator e{actor, fmap, prompt, reward, opts, horizon, grad, 0.0, {}};
  e.walk(0.0);
  return e;
}

}  // namespace

double enumerate_objective(const PolicyParams& actor, const FeatureMap& fmap, PromptId prompt,
                           const SequenceReward& reward, const DecodeOptions& opts) {
  return run_enumeration(actor, fmap, prompt, reward, opts, nullptr).value;
}

Matrix enumerate_objective_gradient(const PolicyParams& actor, const FeatureMap& fmap,
                                    PromptId prompt, const SequenceReward& reward,
                                    const DecodeOptions& opts) {
  Matrix grad(actor.feature_dim(), actor.vocab_size());
  run_enumeration(actor, fmap, prompt, reward, opts, &grad);
  return grad;
}

}  // namespace rapo
