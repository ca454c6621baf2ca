#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "rapo/policy.hpp"

namespace rapo::testing {

// Same vector for every context; lets tests reason about one softmax.
class ConstantFeatureMap final : public FeatureMap {
 public:
  explicit ConstantFeatureMap(std::vector<double> phi) : phi_(std::move(phi)) {}
  std::size_t dim() const override { return phi_.size(); }
  void embed(PromptId, std::span<const Token>, std::span<double> out) const override {
    std::copy(phi_.begin(), phi_.end(), out.begin());
  }
  using FeatureMap::embed;

 private:
  std::vector<double> phi_;
};

inline PolicyParams random_policy(Rng& rng, std::size_t dim, std::size_t vocab,
                                  std::size_t max_len, double scale) {
  PolicyParams p(dim, vocab, max_len);
  for (double& w : p.weights.data()) w = scale * rng.normal();
  return p;
}

inline Matrix central_difference(const PolicyParams& at,
                                 const std::function<double(const PolicyParams&)>& f,
                                 double h = 1e-5) {
  Matrix g(at.feature_dim(), at.vocab_size());
  PolicyParams p = at;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double w = p.weights.data()[k];
    p.weights.data()[k] = w + h;
    const double up = f(p);
    p.weights.data()[k] = w - h;
    const double down = f(p);
    p.weights.data()[k] = w;
    g.data()[k] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double rel_error(const Matrix& a, const Matrix& b) {
  Matrix d = a;
  d.add_scaled(b, -1.0);
  const double scale = std::max(a.frobenius_norm(), b.frobenius_norm());
  return scale == 0.0 ? d.frobenius_norm() : d.frobenius_norm() / scale;
}

}  // namespace rapo::testing
