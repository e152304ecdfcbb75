#include <cmath>

#include "mtclip/trainer.hpp"

namespace mtclip {

void AdamW::step(ParamMap& params, double lr) {
  const double b1 = config_.beta1, b2 = config_.beta2;
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    Slot& s = slots_[name];
    if (s.m.empty()) {
      s.m.assign(p.numel(), 0.0);
      s.v.assign(p.numel(), 0.0);
    }
    ++s.t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
    const double decay = p.dim() >= 2 ? lr * config_.weight_decay : 0.0;
    auto w = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = s.m[i] / c1;
      const double vhat = s.v[i] / c2;
      w[i] -= decay * w[i] + lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace mtclip
