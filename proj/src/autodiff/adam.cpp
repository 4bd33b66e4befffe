#include "avw2/autodiff/adam.h"

#include <cmath>

#include "avw2/error.h"

namespace avw2::ad {

template <typename T>
void adamStep(NamedParams<T>& params, const Gradients<T>& grads, AdamState<T>& state,
              double learningRate) {
  const auto& cfg = state.config;
  const double lr = learningRate >= 0.0 ? learningRate : cfg.learningRate;

  std::map<std::string, std::vector<T>> g;
  for (auto& [name, p] : params) {
    auto grad = grads.of(p);
    for (auto x : grad) {
      if (!std::isfinite(x)) {
        fail(ErrorKind::Numeric, "adam: non-finite gradient for parameter '" + name + "'");
      }
    }
    g.emplace(name, std::move(grad));
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params) {
    auto& values = p.mutableData();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(values.size(), T(0));
      v.assign(values.size(), T(0));
    }
    if (m.size() != values.size()) {
      fail(ErrorKind::Shape, "adam: moment size mismatch for parameter '" + name + "'");
    }
    const auto& gp = g.at(name);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gi = gp[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      values[i] = static_cast<T>(values[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template void adamStep(NamedParams<float>&, const Gradients<float>&, AdamState<float>&, double);
template void adamStep(NamedParams<double>&, const Gradients<double>&, AdamState<double>&, double);

} // namespace avw2::ad
