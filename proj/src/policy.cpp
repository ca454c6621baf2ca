#include "rapo/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "rapo/errors.hpp"

namespace rapo {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_token(const PolicyParams& params, Token t) {
  if (t < 0 || static_cast<std::size_t>(t) >= params.vocab_size()) {
    std::ostringstream msg;
    msg << "token id " << t << " out of range for vocab_size " << params.vocab_size();
    throw InputError(msg.str());
  }
}

void check_dims(const PolicyParams& params, const FeatureMap& fmap) {
  if (fmap.dim() != params.feature_dim()) {
    std::ostringstream msg;
    msg << "feature map dim " << fmap.dim() << " != policy feature_dim "
        << params.feature_dim();
    throw InputError(msg.str());
  }
}

void check_options(const PolicyParams& params, const DecodeOptions& opts) {
  if (!opts.allowed.empty() && opts.allowed.size() != params.vocab_size())
    throw InputError("decode mask size does not match vocab_size");
  if (opts.eos) check_token(params, *opts.eos);
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix

Matrix& Matrix::operator+=(const Matrix& other) {
  add_scaled(other, 1.0);
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

void Matrix::add_scaled(const Matrix& other, double s) {
  if (other.rows_ != rows_ || other.cols_ != cols_)
    throw InputError("matrix shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
}

double Matrix::frobenius_norm() const {
  double acc = 0.0;
  for (double v : data_) acc += v * v;
  return std::sqrt(acc);
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// PolicyParams

PolicyParams::PolicyParams(std::size_t feature_dim, std::size_t vocab_size, std::size_t max_len)
    : weights(feature_dim, vocab_size), max_len(max_len) {
  validate();
}

void PolicyParams::validate() const {
  if (vocab_size() < 2) throw InputError("vocab_size must be >= 2");
  if (feature_dim() < 1) throw InputError("feature_dim must be >= 1");
  if (max_len < 3) throw InputError("max_len must be >= 3");
  if (!weights.all_finite()) throw InputError("policy weights contain non-finite values");
}

PolicyParams snapshot(const PolicyParams& params) { return params; }

std::size_t DecodeOptions::horizon(const PolicyParams& params) const {
  return max_len == 0 ? params.max_len : std::min(max_len, params.max_len);
}

// ---------------------------------------------------------------------------
// Features

void HashedFeatureMap::embed(PromptId prompt, std::span<const Token> prefix,
                             std::span<double> out) const {
  std::uint64_t h = derive_seed({seed_, static_cast<std::uint64_t>(prompt), prefix.size()});
  for (Token t : prefix) h = mix64(h ^ static_cast<std::uint64_t>(t));
  for (std::size_t k = 0; k < dim_; ++k) {
    const std::uint64_t bits = mix64(h + k);
    out[k] = 2.0 * (static_cast<double>(bits >> 11) * 0x1.0p-53) - 1.0;
  }
}

// ---------------------------------------------------------------------------
// Distributions

void next_token_log_probs(const PolicyParams& params, std::span<const double> phi,
                          const DecodeOptions& opts, std::span<double> out) {
  const std::size_t vocab = params.vocab_size();
  const std::size_t dim = params.feature_dim();
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t k = 0; k < dim; ++k) {
    const double f = phi[k];
    if (f == 0.0) continue;
    const auto w = params.weights.row(k);
    for (std::size_t v = 0; v < vocab; ++v) out[v] += f * w[v];
  }
  double max_logit = kNegInf;
  for (std::size_t v = 0; v < vocab; ++v) {
    if (!opts.is_allowed(static_cast<Token>(v))) {
      out[v] = kNegInf;
      continue;
    }
    max_logit = std::max(max_logit, out[v]);
  }
  if (max_logit == kNegInf) throw InputError("decode mask forbids every token");
  double sum = 0.0;
  for (std::size_t v = 0; v < vocab; ++v)
    if (out[v] != kNegInf) sum += std::exp(out[v] - max_logit);
  const double lse = max_logit + std::log(sum);
  for (std::size_t v = 0; v < vocab; ++v)
    if (out[v] != kNegInf) out[v] -= lse;
}

std::vector<double> log_prob_tokens(const PolicyParams& params, const FeatureMap& fmap,
                                    PromptId prompt, std::span<const Token> tokens,
                                    const DecodeOptions& opts) {
  check_dims(params, fmap);
  check_options(params, opts);
  for (Token t : tokens) check_token(params, t);

  std::vector<double> phi(params.feature_dim());
  std::vector<double> logp(params.vocab_size());
  std::vector<double> result(tokens.size());
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    fmap.embed(prompt, tokens.first(s), phi);
    next_token_log_probs(params, phi, opts, logp);
    const double lp = logp[static_cast<std::size_t>(tokens[s])];
    if (lp == kNegInf) throw InputError("token is excluded by the decode mask");
    result[s] = std::min(lp, 0.0);
  }
  return result;
}

Matrix position_log_distributions(const PolicyParams& params, const FeatureMap& fmap,
                                  PromptId prompt, std::span<const Token> tokens,
                                  const DecodeOptions& opts) {
  check_dims(params, fmap);
  check_options(params, opts);
  Matrix out(tokens.size(), params.vocab_size());
  std::vector<double> phi(params.feature_dim());
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    fmap.embed(prompt, tokens.first(s), phi);
    next_token_log_probs(params, phi, opts, out.row(s));
  }
  return out;
}

Rollout sample_rollout(const PolicyParams& params, const FeatureMap& fmap, PromptId prompt,
                       Rng& rng, const DecodeOptions& opts) {
  check_dims(params, fmap);
  check_options(params, opts);
  const std::size_t horizon = opts.horizon(params);
  Rollout r;
  r.prompt_id = prompt;
  r.tokens.reserve(horizon);
  r.actor_logprobs.reserve(horizon);

  std::vector<double> phi(params.feature_dim());
  std::vector<double> logp(params.vocab_size());
  while (r.tokens.size() < horizon) {
    fmap.embed(prompt, r.tokens, phi);
    next_token_log_probs(params, phi, opts, logp);
    // Inverse-CDF draw; the last allowed token absorbs rounding slack.
    const double u = rng.uniform();
    double cdf = 0.0;
    Token chosen = -1;
    for (std::size_t v = 0; v < logp.size(); ++v) {
      if (logp[v] == kNegInf) continue;
      chosen = static_cast<Token>(v);
      cdf += std::exp(logp[v]);
      if (u < cdf) break;
    }
    r.tokens.push_back(chosen);
    r.actor_logprobs.push_back(std::min(logp[static_cast<std::size_t>(chosen)], 0.0));
    if (opts.eos && chosen == *opts.eos) break;
  }
  r.anchor_logprobs.assign(r.tokens.size(), 0.0);
  return r;
}

std::vector<Token> greedy_decode(const PolicyParams& params, const FeatureMap& fmap,
                                 PromptId prompt, const DecodeOptions& opts) {
  check_dims(params, fmap);
  check_options(params, opts);
  const std::size_t horizon = opts.horizon(params);
  std::vector<Token> tokens;
  std::vector<double> phi(params.feature_dim());
  std::vector<double> logp(params.vocab_size());
  while (tokens.size() < horizon) {
    fmap.embed(prompt, tokens, phi);
    next_token_log_probs(params, phi, opts, logp);
    const auto best = std::max_element(logp.begin(), logp.end());
    const Token t = static_cast<Token>(best - logp.begin());
    tokens.push_back(t);
    if (opts.eos && t == *opts.eos) break;
  }
  return tokens;
}

Matrix score_gradient(const PolicyParams& params, const FeatureMap& fmap,
                      std::span<const Token> tokens, PromptId prompt,
                      const DecodeOptions& opts) {
  check_dims(params, fmap);
  check_options(params, opts);
  for (Token t : tokens) check_token(params, t);
  const std::size_t vocab = params.vocab_size();
  Matrix grad(params.feature_dim(), vocab);
  std::vector<double> phi(params.feature_dim());
  std::vector<double> logp(vocab);
  std::vector<double> resid(vocab);
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    fmap.embed(prompt, tokens.first(s), phi);
    next_token_log_probs(params, phi, opts, logp);
    for (std::size_t v = 0; v < vocab; ++v) resid[v] = -std::exp(logp[v]);
    resid[static_cast<std::size_t>(tokens[s])] += 1.0;
    for (std::size_t k = 0; k < phi.size(); ++k) {
      const double f = phi[k];
      if (f == 0.0) continue;
      auto g = grad.row(k);
      for (std::size_t v = 0; v < vocab; ++v) g[v] += f * resid[v];
    }
  }
  return grad;
}

Matrix score_gradient(const PolicyParams& params, const FeatureMap& fmap,
                      const Rollout& rollout, const DecodeOptions& opts) {
  return score_gradient(params, fmap, rollout.tokens, rollout.prompt_id, opts);
}

// ---------------------------------------------------------------------------
// Serialization

void write_le_i64(std::ostream& os, std::int64_t v) {
  auto u = static_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

void write_le_f64(std::ostream& os, double v) {
  write_le_i64(os, static_cast<std::int64_t>(std::bit_cast<std::uint64_t>(v)));
}

std::int64_t read_le_i64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw ConfigError("truncated binary stream");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<std::int64_t>(u);
}

double read_le_f64(std::istream& is) {
  return std::bit_cast<double>(static_cast<std::uint64_t>(read_le_i64(is)));
}

void write_params(std::ostream& os, const PolicyParams& params) {
  write_le_i64(os, static_cast<std::int64_t>(params.feature_dim()));
  write_le_i64(os, static_cast<std::int64_t>(params.vocab_size()));
  write_le_i64(os, static_cast<std::int64_t>(params.max_len));
  for (double w : params.weights.data()) write_le_f64(os, w);
}

PolicyParams read_params(std::istream& is) {
  const std::int64_t dim = read_le_i64(is);
  const std::int64_t vocab = read_le_i64(is);
  const std::int64_t max_len = read_le_i64(is);
  if (dim < 1 || vocab < 2 || max_len < 3 || dim > (1 << 20) || vocab > (1 << 20))
    throw ConfigError("checkpoint header has invalid dimensions");
  PolicyParams params(static_cast<std::size_t>(dim), static_cast<std::size_t>(vocab),
                      static_cast<std::size_t>(max_len));
  for (double& w : params.weights.data()) w = read_le_f64(is);
  params.validate();
  return params;
}

}  // namespace rapo
