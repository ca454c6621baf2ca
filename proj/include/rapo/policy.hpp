#pragma once

// Linear-softmax autoregressive token policy.
//
// A policy scores the next token from a feature vector phi(prompt, prefix):
//   logits = W^T phi,  pi(. | prompt, prefix) = softmax(logits)
// where W has shape (feature_dim x vocab_size). Every quantity the
// optimizers need (log-probabilities, score gradients, per-position
// distributions) is available in closed form.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rapo/reward.hpp"
#include "rapo/rng.hpp"

namespace rapo {

using Token = int;
using PromptId = std::int64_t;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  Matrix& operator+=(const Matrix& other);
  Matrix& operator*=(double s);
  /// this += s * other
  void add_scaled(const Matrix& other, double s);

  double frobenius_norm() const;
  bool all_finite() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Weights of the policy plus the hard cap on generated length.
struct PolicyParams {
  Matrix weights;  // feature_dim x vocab_size
  std::size_t max_len = 3;

  PolicyParams() = default;
  PolicyParams(std::size_t feature_dim, std::size_t vocab_size, std::size_t max_len);

  std::size_t feature_dim() const { return weights.rows(); }
  std::size_t vocab_size() const { return weights.cols(); }

  /// Throws InputError if an invariant is broken (finite weights,
  /// vocab_size >= 2, feature_dim >= 1, max_len >= 3).
  void validate() const;

  bool operator==(const PolicyParams& other) const = default;
};

/// Deep copy used as a frozen anchor.
PolicyParams snapshot(const PolicyParams& params);

/// Context features for (prompt, prefix). Implementations must be
/// deterministic and emit entries in [-1, 1].
class FeatureMap {
 public:
  virtual ~FeatureMap() = default;
  virtual std::size_t dim() const = 0;
  virtual void embed(PromptId prompt, std::span<const Token> prefix,
                     std::span<double> out) const = 0;

  std::vector<double> embed(PromptId prompt, std::span<const Token> prefix) const {
    std::vector<double> out(dim());
    embed(prompt, prefix, out);
    return out;
  }
};

/// Pseudo-random features keyed by a hash of (seed, prompt, prefix).
/// Entries are uniform in [-1, 1].
class HashedFeatureMap final : public FeatureMap {
 public:
  HashedFeatureMap(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}
  std::size_t dim() const override { return dim_; }
  void embed(PromptId prompt, std::span<const Token> prefix,
             std::span<double> out) const override;
  using FeatureMap::embed;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

/// How sequences are decoded: optional terminating token, an optional length
/// cap below params.max_len, and an optional set of permitted tokens (closed
/// candidate vocabularies). Disallowed tokens get probability zero.
struct DecodeOptions {
  std::optional<Token> eos;
  std::size_t max_len = 0;            // 0 means params.max_len
  std::vector<std::uint8_t> allowed;  // empty means every token allowed

  std::size_t horizon(const PolicyParams& params) const;
  bool is_allowed(Token t) const {
    return allowed.empty() || allowed[static_cast<std::size_t>(t)] != 0;
  }
};

struct Rollout {
  PromptId prompt_id = 0;
  std::vector<Token> tokens;
  std::vector<double> actor_logprobs;
  std::vector<double> anchor_logprobs;  // zero until annotated
  bool anchor_annotated = false;
  std::string text;
  RewardBreakdown reward;

  std::size_t length() const { return tokens.size(); }
};

struct RolloutGroup {
  PromptId prompt_id = 0;
  std::vector<Rollout> rollouts;
};

/// Log-probabilities of every token at one context, written to `out`
/// (size vocab_size). Disallowed tokens receive -infinity.
void next_token_log_probs(const PolicyParams& params, std::span<const double> phi,
                          const DecodeOptions& opts, std::span<double> out);

/// log pi(tokens[s] | prompt, tokens[<s]) for every position s.
std::vector<double> log_prob_tokens(const PolicyParams& params, const FeatureMap& fmap,
                                    PromptId prompt, std::span<const Token> tokens,
                                    const DecodeOptions& opts = {});

/// Full next-token log-distribution at each position of `tokens`
/// (row s conditions on tokens[<s]). Shape: tokens.size() x vocab_size.
Matrix position_log_distributions(const PolicyParams& params, const FeatureMap& fmap,
                                  PromptId prompt, std::span<const Token> tokens,
                                  const DecodeOptions& opts = {});

/// Ancestral sampling until eos or the length cap. anchor_logprobs stay zero.
Rollout sample_rollout(const PolicyParams& params, const FeatureMap& fmap, PromptId prompt,
                       Rng& rng, const DecodeOptions& opts = {});

/// Argmax decoding (ties resolved to the lowest token id).
std::vector<Token> greedy_decode(const PolicyParams& params, const FeatureMap& fmap,
                                 PromptId prompt, const DecodeOptions& opts = {});

/// Gradient of sum_s log pi(tokens[s] | prefix) with respect to the weights:
///   sum_s phi_s (onehot(tokens[s]) - p_s)^T
Matrix score_gradient(const PolicyParams& params, const FeatureMap& fmap,
                      std::span<const Token> tokens, PromptId prompt,
                      const DecodeOptions& opts = {});
Matrix score_gradient(const PolicyParams& params, const FeatureMap& fmap,
                      const Rollout& rollout, const DecodeOptions& opts = {});

/// Binary layout: feature_dim, vocab_size, max_len as little-endian int64,
/// then feature_dim*vocab_size little-endian doubles in row-major order.
void write_params(std::ostream& os, const PolicyParams& params);
PolicyParams read_params(std::istream& is);

// Little-endian primitives shared by the checkpoint writers.
void write_le_i64(std::ostream& os, std::int64_t v);
void write_le_f64(std::ostream& os, double v);
std::int64_t read_le_i64(std::istream& is);
double read_le_f64(std::istream& is);

}  // namespace rapo
