#include <cmath>
#include <numeric>

#include "doctest.h"
#include "rapo/errors.hpp"
#include "rapo/optimizer.hpp"
#include "rapo/retention.hpp"
#include "support.hpp"

using namespace rapo;
using rapo::testing::central_difference;
using rapo::testing::ConstantFeatureMap;
using rapo::testing::random_policy;
using rapo::testing::rel_error;

namespace {

struct Fixture {
  HashedFeatureMap fmap{4, 31};
  DecodeOptions opts;
  PolicyParams actor;
  std::vector<RolloutGroup> groups;
  std::vector<std::vector<double>> adv;

  explicit Fixture(std::uint64_t seed) {
    opts.eos = 0;
    Rng rng(seed);
    actor = random_policy(rng, 4, 5, 4, 1.0);
    for (int g = 0; g < 3; ++g) {
      RolloutGroup group;
      group.prompt_id = g;
      std::vector<double> a;
      for (int i = 0; i < 4; ++i) {
        group.rollouts.push_back(sample_rollout(actor, fmap, g, rng, opts));
        a.push_back(rng.uniform(-1.0, 1.0));
      }
      groups.push_back(std::move(group));
      adv.push_back(std::move(a));
    }
  }
  PolicyBatch batch() const { return {groups, adv}; }
  std::size_t tokens() const {
    std::size_t n = 0;
    for (const auto& g : groups)
      for (const auto& r : g.rollouts) n += r.tokens.size();
    return n;
  }
};

}  // namespace

TEST_CASE("algorithm names") {
  for (auto a : {Algorithm::kSft, Algorithm::kGrpo, Algorithm::kRapo, Algorithm::kGrpoV1,
                 Algorithm::kGrpoV2})
    CHECK(parse_algorithm(to_string(a)) == a);
  CHECK_THROWS_AS(parse_algorithm("ppo"), ConfigError);
}

TEST_CASE("optim config validation") {
  OptimConfig c;
  CHECK_NOTHROW(c.validate());
  c.group_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.clip_range = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("zero advantages leave the policy unchanged") {
  Fixture f(1);
  for (auto& a : f.adv) std::fill(a.begin(), a.end(), 0.0);
  OptimConfig cfg;
  const StepResult r = policy_gradient_step(f.actor, nullptr, f.fmap, f.batch(), cfg, f.opts);
  CHECK(r.params == f.actor);
  CHECK(r.log.adv_magnitude == 0.0);
}

TEST_CASE("on-policy step is the vanilla policy gradient") {
  Fixture f(2);
  OptimConfig cfg;
  cfg.learning_rate = 0.3;
  const StepResult r = policy_gradient_step(f.actor, nullptr, f.fmap, f.batch(), cfg, f.opts);
  Matrix expect(f.actor.feature_dim(), f.actor.vocab_size());
  double mag = 0.0;
  for (std::size_t g = 0; g < f.groups.size(); ++g)
    for (std::size_t i = 0; i < f.groups[g].rollouts.size(); ++i) {
      expect.add_scaled(score_gradient(f.actor, f.fmap, f.groups[g].rollouts[i], f.opts), f.adv[g][i]);
      mag += std::abs(f.adv[g][i]);
    }
  Matrix delta = r.params.weights;
  delta.add_scaled(f.actor.weights, -1.0);
  delta *= static_cast<double>(f.tokens()) / cfg.learning_rate;
  CHECK(rel_error(delta, expect) < 1e-12);
  CHECK(r.log.adv_magnitude == doctest::Approx(mag));
}

TEST_CASE("kl term has zero gradient at the anchor") {
  Fixture f(3);
  for (auto& a : f.adv) std::fill(a.begin(), a.end(), 0.0);
  const Matrix g = surrogate_gradient(f.actor, &f.actor, f.fmap, f.batch(), 0.2, 0.5, f.opts);
  CHECK(g.frobenius_norm() < 1e-15);
  CHECK_THROWS_AS(surrogate_gradient(f.actor, nullptr, f.fmap, f.batch(), 0.2, 0.5, f.opts),
                  InputError);
}

TEST_CASE("clipped tokens carry no gradient") {
  Fixture f(4);
  // Stale behaviour log-probs far below the current ones push every ratio above 1 + c.
  for (auto& g : f.groups)
    for (auto& r : g.rollouts)
      for (double& lp : r.actor_logprobs) lp -= 1.0;
  for (auto& a : f.adv) std::fill(a.begin(), a.end(), 1.0);
  CHECK(surrogate_gradient(f.actor, nullptr, f.fmap, f.batch(), 0.2, 0.0, f.opts).frobenius_norm() == 0.0);
  for (auto& a : f.adv) std::fill(a.begin(), a.end(), -1.0);
  CHECK(surrogate_gradient(f.actor, nullptr, f.fmap, f.batch(), 0.2, 0.0, f.opts).frobenius_norm() > 0.0);
}

TEST_CASE("surrogate gradient matches central differences") {
  Rng rng(5);
  for (int k = 0; k < 100; ++k) {
    Fixture f(100 + k);
    const PolicyParams anchor = random_policy(rng, 4, 5, 4, 1.0);
    for (auto& g : f.groups)
      for (auto& r : g.rollouts)
        for (double& lp : r.actor_logprobs) {
          double s;
          do s = rng.uniform(-0.4, 0.4);
          while (std::abs(std::exp(-s) - 0.8) < 1e-3 || std::abs(std::exp(-s) - 1.2) < 1e-3);
          lp += s;
        }
    const Matrix g = surrogate_gradient(f.actor, &anchor, f.fmap, f.batch(), 0.2, 0.05, f.opts);
    const Matrix fd = central_difference(f.actor, [&](const PolicyParams& p) {
      return surrogate_objective(p, &anchor, f.fmap, f.batch(), 0.2, 0.05, f.opts);
    });
    CHECK(rel_error(g, fd) < 1e-5);
  }
}

TEST_CASE("batch shape errors") {
  Fixture f(6);
  f.adv.pop_back();
  CHECK_THROWS_AS(surrogate_gradient(f.actor, nullptr, f.fmap, f.batch(), 0.2, 0.0), InputError);
  Fixture h(7);
  h.adv[0][0] = std::nan("");
  CHECK_THROWS_AS(surrogate_gradient(h.actor, nullptr, h.fmap, h.batch(), 0.2, 0.0), InputError);
}

TEST_CASE("ctan updates are bounded") {
  Rng rng(8);
  const double eps = 1e-4, r_max = 2.5;
  for (int k = 0; k < 50; ++k) {
    Fixture f(200 + k);
    CtanState st;
    st.sigma_hat = 0.0;
    for (auto& a : f.adv) {
      std::vector<double> rewards(a.size());
      for (double& r : rewards) r = rng.uniform(0.0, r_max);
      a = group_advantages(rewards, AdvantageMode::kCtan, st, 0.0, eps);
    }
    OptimConfig cfg;
    cfg.learning_rate = 0.01;
    const StepResult r = policy_gradient_step(f.actor, nullptr, f.fmap, f.batch(), cfg, f.opts);
    Matrix delta = r.params.weights;
    delta.add_scaled(f.actor.weights, -1.0);
    const double max_phi = std::sqrt(4.0);
    CHECK(delta.frobenius_norm() <= cfg.learning_rate * f.tokens() * r_max / eps * max_phi);
  }
}

TEST_CASE("sft step") {
  HashedFeatureMap fmap(4, 9);
  Rng rng(10);
  PolicyParams p = random_policy(rng, 4, 5, 6, 0.5);
  const std::vector<GoldSequence> gold{{3, {1, 2, 2, 0}}};
  double prev = sft_objective(p, fmap, gold);
  for (int i = 0; i < 50; ++i) {
    p = sft_step(p, fmap, gold, 0.5);
    const double now = sft_objective(p, fmap, gold);
    CHECK(now > prev);
    prev = now;
  }
  CHECK(sft_step(p, fmap, gold, 0.0) == p);
  const std::vector<GoldSequence> bad{{3, {1, 9}}};
  CHECK_THROWS_AS(sft_step(p, fmap, bad, 0.1), InputError);
}

TEST_CASE("sft gradient matches central differences") {
  HashedFeatureMap fmap(4, 11);
  Rng rng(12);
  for (int k = 0; k < 100; ++k) {
    const PolicyParams p = random_policy(rng, 4, 5, 6, 1.0);
    std::vector<GoldSequence> gold(3);
    for (auto& g : gold) {
      g.prompt = static_cast<PromptId>(rng.below(20));
      g.tokens.resize(1 + rng.below(5));
      for (Token& t : g.tokens) t = static_cast<Token>(rng.below(5));
    }
    const Matrix fd = central_difference(p, [&](const PolicyParams& q) { return sft_objective(q, fmap, gold); });
    CHECK(rel_error(sft_gradient(p, fmap, gold), fd) < 1e-5);
  }
}

TEST_CASE("local gradient estimator") {
  HashedFeatureMap fmap(3, 13);
  Rng init(14);
  const PolicyParams p = random_policy(init, 3, 4, 3, 1.0);
  DecodeOptions one;
  one.max_len = 1;
  const SequenceReward constant = [](std::span<const Token>) { return 0.7; };
  Rng rng(15);
  CHECK(estimate_local_gradient(p, fmap, 0, constant, 0.7, 100, rng, one).frobenius_norm() == 0.0);

  // Mean-zero score: the estimate of a constant reward shrinks as M grows.
  const Matrix small = estimate_local_gradient(p, fmap, 0, constant, 0.0, 1000, rng, one);
  const Matrix large = estimate_local_gradient(p, fmap, 0, constant, 0.0, 400000, rng, one);
  CHECK(large.frobenius_norm() < small.frobenius_norm());
  CHECK(large.frobenius_norm() < 0.01);

  const std::vector<double> values{1.0, 0.2, 0.4, 0.0};
  const SequenceReward reward = [&](std::span<const Token> y) { return values[y[0]]; };
  const Matrix exact = enumerate_objective_gradient(p, fmap, 0, reward, one);
  for (double b : {0.0, 0.5, 2.0}) {
    Rng r(16);
    CHECK(rel_error(estimate_local_gradient(p, fmap, 0, reward, b, 200000, r, one), exact) < 0.05);
  }
  CHECK_THROWS_AS(estimate_local_gradient(p, fmap, 0, reward, 0.0, 0, rng, one), InputError);
}

TEST_CASE("enumerated objective") {
  ConstantFeatureMap fmap({1.0, -0.5});
  PolicyParams p(2, 2, 3);
  p.weights(0, 0) = 0.3;
  p.weights(1, 1) = 0.8;
  DecodeOptions one;
  one.max_len = 1;
  const SequenceReward first = [](std::span<const Token> y) { return y[0] == 0 ? 1.0 : 0.0; };
  // d pi_0 / d W(k, v) = phi_k pi_0 (1[v=0] - pi_v)
  const double l0 = 0.3, l1 = -0.4;
  const double pi0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
  CHECK(enumerate_objective(p, fmap, 0, first, one) == doctest::Approx(pi0).epsilon(1e-14));
  const Matrix g = enumerate_objective_gradient(p, fmap, 0, first, one);
  const double phi[] = {1.0, -0.5};
  for (int k = 0; k < 2; ++k) {
    CHECK(g(k, 0) == doctest::Approx(phi[k] * pi0 * (1.0 - pi0)).epsilon(1e-14));
    CHECK(g(k, 1) == doctest::Approx(-phi[k] * pi0 * (1.0 - pi0)).epsilon(1e-14));
  }
  const SequenceReward flat = [](std::span<const Token>) { return 3.0; };
  CHECK(enumerate_objective_gradient(p, fmap, 0, flat, one).frobenius_norm() < 1e-15);
}

TEST_CASE("enumerated gradient matches central differences over multi-token sequences") {
  HashedFeatureMap fmap(3, 17);
  Rng rng(18);
  DecodeOptions opts;
  opts.eos = 0;
  for (int k = 0; k < 20; ++k) {
    const PolicyParams p = random_policy(rng, 3, 4, 3, 1.0);
    const SequenceReward reward = [](std::span<const Token> y) {
      double s = 0.0;
      for (Token t : y) s += 0.1 * t;
      return s + 0.05 * static_cast<double>(y.size());
    };
    const Matrix g = enumerate_objective_gradient(p, fmap, 1, reward, opts);
    const Matrix fd = central_difference(p, [&](const PolicyParams& q) {
      return enumerate_objective(q, fmap, 1, reward, opts);
    });
    CHECK(rel_error(g, fd) < 1e-6);
  }
  PolicyParams big(3, 20, 5);
  CHECK_THROWS_AS(enumerate_objective(big, fmap, 0, [](std::span<const Token>) { return 0.0; }),
                  ConfigError);
}
