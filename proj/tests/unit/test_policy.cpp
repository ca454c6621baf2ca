#include <cmath>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "rapo/errors.hpp"
#include "rapo/policy.hpp"
#include "support.hpp"

using namespace rapo;
using rapo::testing::ConstantFeatureMap;

TEST_CASE("forced eos gives a length-one rollout") {
  ConstantFeatureMap fmap({1.0});
  PolicyParams p(1, 2, 5);
  p.weights(0, 1) = 1000.0;
  DecodeOptions opts;
  opts.eos = 1;
  Rng rng(3);
  const Rollout r = sample_rollout(p, fmap, 0, rng, opts);
  REQUIRE(r.tokens == std::vector<Token>{1});
  CHECK(r.actor_logprobs[0] == doctest::Approx(0.0));
  CHECK_FALSE(r.anchor_annotated);
}

TEST_CASE("zero weights sample the first token uniformly") {
  HashedFeatureMap fmap(4, 1);
  PolicyParams p(4, 5, 3);
  Rng rng(11);
  std::vector<int> counts(5, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[sample_rollout(p, fmap, 7, rng).tokens[0]];
  for (int c : counts) CHECK(std::abs(c / double(n) - 0.2) < 0.01);
}

TEST_CASE("sampling is deterministic in the seed") {
  HashedFeatureMap fmap(4, 1);
  Rng init(5);
  const PolicyParams p = rapo::testing::random_policy(init, 4, 6, 8, 1.0);
  DecodeOptions opts;
  opts.eos = 0;
  Rng a(42), b(42);
  const Rollout ra = sample_rollout(p, fmap, 3, a, opts);
  const Rollout rb = sample_rollout(p, fmap, 3, b, opts);
  CHECK(ra.tokens == rb.tokens);
  CHECK(ra.actor_logprobs == rb.actor_logprobs);
}

TEST_CASE("sampled log-probs match log_prob_tokens and rollouts stop at eos or max_len") {
  HashedFeatureMap fmap(4, 2);
  Rng init(6);
  const PolicyParams p = rapo::testing::random_policy(init, 4, 5, 6, 1.0);
  DecodeOptions opts;
  opts.eos = 2;
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const Rollout r = sample_rollout(p, fmap, i, rng, opts);
    CHECK(r.actor_logprobs == log_prob_tokens(p, fmap, i, r.tokens, opts));
    const auto eos_at = std::find(r.tokens.begin(), r.tokens.end(), 2);
    if (eos_at != r.tokens.end()) CHECK(eos_at + 1 == r.tokens.end());
    else CHECK(r.tokens.size() == 6);
    for (double lp : r.actor_logprobs) CHECK(lp <= 0.0);
  }
}

TEST_CASE("log_prob_tokens closed forms") {
  HashedFeatureMap fmap(3, 4);
  PolicyParams zero(3, 4, 3);
  for (double lp : log_prob_tokens(zero, fmap, 0, std::vector<Token>{0, 3, 1}))
    CHECK(lp == doctest::Approx(std::log(0.25)).epsilon(1e-14));

  ConstantFeatureMap one({1.0});
  PolicyParams sat(1, 3, 3);
  sat.weights(0, 2) = 1000.0;
  const auto lp = log_prob_tokens(sat, one, 0, std::vector<Token>{2});
  CHECK(lp[0] == doctest::Approx(0.0));

  CHECK_THROWS_AS(log_prob_tokens(zero, fmap, 0, std::vector<Token>{4}), InputError);
  CHECK_THROWS_AS(log_prob_tokens(zero, fmap, 0, std::vector<Token>{-1}), InputError);
}

TEST_CASE("position distributions normalize even for extreme weights") {
  HashedFeatureMap fmap(5, 8);
  Rng rng(12);
  for (double scale : {0.1, 10.0, 500.0}) {
    const PolicyParams p = rapo::testing::random_policy(rng, 5, 7, 4, scale);
    const Matrix d = position_log_distributions(p, fmap, 1, std::vector<Token>{1, 2, 3}, {});
    for (std::size_t s = 0; s < d.rows(); ++s) {
      double total = 0.0;
      for (double v : d.row(s)) total += std::exp(v);
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("masked tokens get zero probability") {
  HashedFeatureMap fmap(3, 2);
  PolicyParams p(3, 4, 3);
  DecodeOptions opts;
  opts.allowed = {1, 0, 1, 0};
  const Matrix d = position_log_distributions(p, fmap, 0, std::vector<Token>{0}, opts);
  CHECK(std::isinf(d(0, 1)));
  CHECK(d(0, 0) == doctest::Approx(std::log(0.5)));
  Rng rng(1);
  for (int i = 0; i < 100; ++i)
    for (Token t : sample_rollout(p, fmap, 0, rng, opts).tokens) CHECK(opts.is_allowed(t));
}

TEST_CASE("score gradient at uniform weights") {
  const std::vector<double> phi{0.5, -1.0, 0.25};
  ConstantFeatureMap fmap(phi);
  PolicyParams p(3, 2, 3);
  const Matrix g = score_gradient(p, fmap, std::vector<Token>{0}, 0);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(g(k, 0) == doctest::Approx(0.5 * phi[k]));
    CHECK(g(k, 1) == doctest::Approx(-0.5 * phi[k]));
  }
  ConstantFeatureMap zero({0.0, 0.0});
  PolicyParams q(2, 3, 3);
  CHECK(score_gradient(q, zero, std::vector<Token>{1, 2}, 0).frobenius_norm() == 0.0);
}

TEST_CASE("score gradient matches central differences") {
  HashedFeatureMap fmap(4, 3);
  Rng rng(21);
  for (int k = 0; k < 100; ++k) {
    const PolicyParams p = rapo::testing::random_policy(rng, 4, 5, 3, 1.0);
    std::vector<Token> tokens(3);
    for (Token& t : tokens) t = static_cast<Token>(rng.below(5));
    const Matrix g = score_gradient(p, fmap, tokens, k);
    const Matrix fd = rapo::testing::central_difference(p, [&](const PolicyParams& q) {
      const auto lp = log_prob_tokens(q, fmap, k, tokens);
      return std::accumulate(lp.begin(), lp.end(), 0.0);
    });
    CHECK(rapo::testing::rel_error(g, fd) < 1e-5);
  }
}

TEST_CASE("score gradient rejects a mismatched feature map") {
  HashedFeatureMap fmap(4, 3);
  PolicyParams p(3, 5, 3);
  CHECK_THROWS_AS(score_gradient(p, fmap, std::vector<Token>{0}, 0), InputError);
}

TEST_CASE("snapshot is an independent deep copy") {
  HashedFeatureMap fmap(3, 1);
  Rng rng(2);
  PolicyParams actor = rapo::testing::random_policy(rng, 3, 4, 3, 1.0);
  const std::vector<Token> toks{1, 2};
  const auto before = log_prob_tokens(actor, fmap, 0, toks);
  const PolicyParams snap = snapshot(actor);
  CHECK(snap == actor);
  const double w = snap.weights(0, 0);
  actor.weights(0, 0) += 1.0;
  CHECK(snap.weights(0, 0) == w);
  CHECK(log_prob_tokens(snap, fmap, 0, toks) == before);
}

TEST_CASE("greedy decode picks argmax with lowest-id ties") {
  ConstantFeatureMap fmap({1.0});
  PolicyParams p(1, 3, 3);
  DecodeOptions opts;
  opts.eos = 0;
  CHECK(greedy_decode(p, fmap, 0, opts) == std::vector<Token>{0});
  p.weights(0, 2) = 1.0;
  CHECK(greedy_decode(p, fmap, 0, opts) == std::vector<Token>{2, 2, 2});
}

TEST_CASE("params round-trip exactly through the binary format") {
  Rng rng(8);
  const PolicyParams p = rapo::testing::random_policy(rng, 3, 4, 5, 3.0);
  std::stringstream ss;
  write_params(ss, p);
  CHECK(ss.str().size() == 3 * 8 + 12 * 8);
  const PolicyParams q = read_params(ss);
  CHECK(q == p);
  std::stringstream bad("short");
  CHECK_THROWS(read_params(bad));
}

TEST_CASE("params validation") {
  CHECK_THROWS_AS(PolicyParams(1, 1, 3), InputError);
  CHECK_THROWS_AS(PolicyParams(1, 2, 2), InputError);
  PolicyParams p(1, 2, 3);
  p.weights(0, 0) = std::nan("");
  CHECK_THROWS_AS(p.validate(), InputError);
}
